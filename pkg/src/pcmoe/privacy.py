"""Per-step privacy risk under a geometric collusion prior and top-k expert routing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class DomainError(ValueError):
    """Parameters outside the model's domain."""


@dataclass(frozen=True)
class PrivacyParams:
    n: int
    m: int
    k: int
    gamma: float
    q: float
    q_total: float
    a: float | None = None  # coalition fraction, only for the |A| = a*n form

    def validate(self) -> None:
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        if not 1 <= self.k <= self.m:
            raise DomainError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        _check_gamma(self.gamma)
        if not 0.0 <= self.q <= self.q_total <= 1.0:
            raise DomainError(f"need 0 <= q <= q_total <= 1, got q={self.q}, q_total={self.q_total}")
        if self.a is not None and not 0.0 <= self.a <= 1.0:
            raise DomainError(f"a must lie in [0, 1], got {self.a}")

    @property
    def saturation(self) -> float:
        """``min(k q, q_total)``: best case for a coalition seeing all k experts."""
        return min(self.k * self.q, self.q_total)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")


def normalizer_K(gamma: float, n: int) -> float:
    """``K = (1 - gamma) / (1 - gamma**(n+1))`` so that sum_{s=0..n} K gamma^s = 1."""
    _check_gamma(gamma)
    if n < 0:
        raise DomainError("n must be >= 0")
    return (1.0 - gamma) / (1.0 - gamma ** (n + 1))


def normalizer_K_large_n(gamma: float) -> float:
    _check_gamma(gamma)
    return 1.0 - gamma


def prior_pmf(gamma: float, n: int) -> np.ndarray:
    """Probabilities of coalition sizes ``s = 1..n`` (index ``s-1``).

    The remaining mass ``1 - sum = K`` sits on ``s = 0`` (no coalition).
    """
    K = normalizer_K(gamma, n)
    out = np.empty(n)
    term = K
    for s in range(1, n + 1):
        term *= gamma
        out[s - 1] = term
    return out


def collusion_probability(gamma: float, n: int, a: float) -> float:
    """``K gamma^(a n)`` for a coalition holding a fraction ``a`` of the parties."""
    if not 0.0 <= a <= 1.0:
        raise DomainError(f"a must lie in [0, 1], got {a}")
    return normalizer_K(gamma, n) * gamma ** (a * n)


def hit_prob(s: int, n: int, k: int) -> float:
    """Chance that a size-``s`` coalition hosts at least one of ``k`` routed experts."""
    if n < 1 or k < 1:
        raise DomainError("need n >= 1 and k >= 1")
    if not 1 <= s <= n:
        raise DomainError(f"coalition size s={s} outside [1, {n}]")
    return 1.0 - (1.0 - s / n) ** k


def binomial_pmf(k: int, p: float) -> np.ndarray:
    if k < 0 or not 0.0 <= p <= 1.0:
        raise DomainError("need k >= 0 and p in [0, 1]")
    return np.array([math.comb(k, j) * p**j * (1.0 - p) ** (k - j) for j in range(k + 1)])


def expert_hit_pmf(k: int, n: int) -> np.ndarray:
    """Law of J, the number of one party's experts among the k routed ones: Binomial(k, 1/n)."""
    if k < 1 or n < 1:
        raise DomainError("need k >= 1 and n >= 1")
    return binomial_pmf(k, 1.0 / n)


def coalition_success_bound(s: int, params: PrivacyParams) -> tuple[float, float]:
    """``(min(kq, q_total) * P_hit(s), exact mixture)``.

    The mixture is ``sum_j Pr[J=j] min(j q, q_total)`` with ``J ~ Binomial(k, s/n)``,
    which never exceeds the bound.
    """
    params.validate()
    bound = params.saturation * hit_prob(s, params.n, params.k)
    pmf = binomial_pmf(params.k, s / params.n)
    mixture = math.fsum(pmf[j] * min(j * params.q, params.q_total) for j in range(params.k + 1))
    return bound, mixture


def risk_exact(params: PrivacyParams) -> float:
    """Finite sum ``K min(kq, q_total) sum_{s=1..n} gamma^s P_hit(s)``."""
    params.validate()
    pmf = prior_pmf(params.gamma, params.n)
    return params.saturation * math.fsum(pmf[s - 1] * hit_prob(s, params.n, params.k) for s in range(1, params.n + 1))


def risk_mixture(params: PrivacyParams) -> float:
    """Risk using the exact per-size mixture instead of the saturated bound."""
    params.validate()
    pmf = prior_pmf(params.gamma, params.n)
    return math.fsum(pmf[s - 1] * coalition_success_bound(s, params)[1] for s in range(1, params.n + 1))


def risk_closed(params: PrivacyParams) -> float:
    """``(k/n) * gamma/(1-gamma)^2 * K * min(kq, q_total)``."""
    params.validate()
    g = params.gamma
    return (params.k / params.n) * (g / (1.0 - g) ** 2) * normalizer_K(g, params.n) * params.saturation


def reduction_factor(params: PrivacyParams) -> float:
    """``n (1 - gamma) / (k gamma)``: risk reduction against a fully shared model."""
    params.validate()
    return params.n * (1.0 - params.gamma) / (params.k * params.gamma)


def gamma_for_factor(factor: float, n: int, k: int) -> float:
    """Largest gamma whose reduction factor is at least ``factor``: ``n / (n + factor k)``."""
    if factor <= 0 or n < 1 or k < 1:
        raise DomainError("need factor > 0, n >= 1, k >= 1")
    return n / (n + factor * k)


@dataclass
class RiskReport:
    K: float
    pmf: list[float]
    s0_mass: float
    hit_prob: list[float]
    succ_bound: list[float]
    succ_mixture: list[float]
    risk_exact: float
    risk_mixture: float
    risk_closed: float
    reduction_factor: float

    def to_record(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        lines = [
            f"K                 {self.K:.6f}",
            f"Pr[s=0]           {self.s0_mass:.6f}",
            f"risk_exact        {self.risk_exact:.6g}",
            f"risk_mixture      {self.risk_mixture:.6g}",
            f"risk_closed       {self.risk_closed:.6g}",
            f"reduction_factor  {self.reduction_factor:.6g}",
            "",
            f"{'s':>3} {'Pr[|A|=s]':>12} {'P_hit':>10} {'succ_bound':>12} {'succ_mix':>12}",
        ]
        for s, (p, h, b, x) in enumerate(zip(self.pmf, self.hit_prob, self.succ_bound, self.succ_mixture), start=1):
            lines.append(f"{s:>3} {p:>12.6g} {h:>10.6g} {b:>12.6g} {x:>12.6g}")
        return "\n".join(lines)


def risk_report(params: PrivacyParams) -> RiskReport:
    params.validate()
    n = params.n
    pmf = prior_pmf(params.gamma, n)
    bounds = [coalition_success_bound(s, params) for s in range(1, n + 1)]
    return RiskReport(
        K=normalizer_K(params.gamma, n),
        pmf=pmf.tolist(),
        s0_mass=1.0 - math.fsum(pmf),
        hit_prob=[hit_prob(s, n, params.k) for s in range(1, n + 1)],
        succ_bound=[b for b, _ in bounds],
        succ_mixture=[x for _, x in bounds],
        risk_exact=risk_exact(params),
        risk_mixture=risk_mixture(params),
        risk_closed=risk_closed(params),
        reduction_factor=reduction_factor(params),
    )


@dataclass
class MonteCarloResult:
    s: int
    trials: int
    p_hit: float
    p_hit_se: float
    mean_j: float
    mean_j_se: float


def monte_carlo_hit(params: PrivacyParams, trials: int, seed: int, s: int = 1) -> MonteCarloResult:
    """Simulate uniform routing: each of the k routed experts sits on an independent,
    uniformly chosen party; a random coalition of ``s`` parties is drawn per trial.

    ``J`` counts routed experts hosted inside the coalition.
    """
    params.validate()
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if not 1 <= s <= params.n:
        raise DomainError(f"coalition size s={s} outside [1, {params.n}]")
    rng = np.random.default_rng(seed)
    hosts = rng.integers(0, params.n, size=(trials, params.k))
    ranks = np.argsort(rng.random((trials, params.n)), axis=1)
    in_coalition = np.empty((trials, params.n), dtype=bool)
    np.put_along_axis(in_coalition, ranks, np.arange(params.n)[None, :] < s, axis=1)
    j = np.take_along_axis(in_coalition, hosts, axis=1).sum(axis=1)
    hit = j > 0
    p = float(hit.mean())
    return MonteCarloResult(
        s=s,
        trials=trials,
        p_hit=p,
        p_hit_se=math.sqrt(p * (1.0 - p) / trials),
        mean_j=float(j.mean()),
        mean_j_se=float(j.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
    )
