import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcmoe.privacy import (
    DomainError,
    PrivacyParams,
    coalition_success_bound,
    collusion_probability,
    expert_hit_pmf,
    gamma_for_factor,
    hit_prob,
    monte_carlo_hit,
    normalizer_K,
    normalizer_K_large_n,
    prior_pmf,
    reduction_factor,
    risk_closed,
    risk_exact,
    risk_mixture,
    risk_report,
)

DEFAULT = PrivacyParams(n=8, m=8, k=2, gamma=0.5, q=0.1, q_total=1.0)


@st.composite
def params(draw):
    n = draw(st.integers(1, 32))
    m = n * draw(st.integers(1, 4))
    k = draw(st.integers(1, m))
    gamma = draw(st.floats(0.01, 0.99))
    q_total = draw(st.floats(0.0, 1.0))
    q = draw(st.floats(0.0, 1.0)) * q_total
    return PrivacyParams(n=n, m=m, k=k, gamma=gamma, q=q, q_total=q_total)


def test_normalizer():
    assert abs(normalizer_K(0.5, 8) - 0.5 / (1 - 0.5**9)) < 1e-15
    assert abs(normalizer_K(0.5, 8) - 0.500978) < 1e-6
    assert abs(normalizer_K(1e-9, 8) - 1.0) < 1e-8
    assert normalizer_K_large_n(0.3) == pytest.approx(0.7)
    for g in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            normalizer_K(g, 8)


def test_prior_ratios():
    pmf = prior_pmf(0.5, 8)
    assert pmf[1] / pmf[0] == 0.5 and pmf[2] / pmf[0] == 0.25
    for g in (0.1, 0.37, 0.9):
        p = prior_pmf(g, 12)
        assert all(p[s + 1] / p[s] == pytest.approx(g, rel=1e-15) for s in range(11))
        assert math.fsum(p) + normalizer_K(g, 12) == pytest.approx(1.0, abs=1e-15)
    assert collusion_probability(0.5, 8, 0.25) == pytest.approx(normalizer_K(0.5, 8) * 0.25)


def test_hit_probabilities():
    assert hit_prob(1, 8, 2) == 15 / 64
    assert hit_prob(8, 8, 2) == 1.0
    for bad in (0, 9):
        with pytest.raises(DomainError):
            hit_prob(bad, 8, 2)
    pmf = expert_hit_pmf(2, 8)
    want = [Fraction(49, 64), Fraction(14, 64), Fraction(1, 64)]
    assert all(abs(p - float(w)) < 1e-15 for p, w in zip(pmf, want))


def test_success_bound_cases():
    zero = PrivacyParams(8, 8, 2, 0.5, 0.0, 1.0)
    assert coalition_success_bound(3, zero) == (0.0, 0.0)
    saturated = PrivacyParams(8, 8, 2, 0.5, 0.6, 1.0)
    assert coalition_success_bound(8, saturated)[0] == 1.0


@settings(max_examples=200)
@given(params(), st.data())
def test_mixture_never_exceeds_bound(p, data):
    s = data.draw(st.integers(1, p.n))
    bound, mixture = coalition_success_bound(s, p)
    assert mixture <= bound + 1e-15


def test_risk_reference_setting():
    exact, closed = risk_exact(DEFAULT), risk_closed(DEFAULT)
    assert abs(closed - 0.25 * 2 * normalizer_K(0.5, 8) * 0.2) < 1e-15
    assert abs(closed - 0.050098) < 1e-6
    assert 0 < exact <= closed
    assert risk_mixture(DEFAULT) <= exact


def test_risk_limits():
    tiny = PrivacyParams(8, 8, 2, 1e-6, 0.1, 1.0)
    leading = normalizer_K(1e-6, 8) * 1e-6 * 0.2 * hit_prob(1, 8, 2)
    assert risk_exact(tiny) == pytest.approx(leading, rel=1e-5)
    lone = PrivacyParams(1, 3, 3, 0.4, 0.2, 0.5)
    assert risk_exact(lone) == pytest.approx(normalizer_K(0.4, 1) * 0.4 * 0.5, rel=1e-15)


@settings(max_examples=300)
@given(params())
def test_exact_below_closed(p):
    assert risk_exact(p) <= risk_closed(p) * (1 + 1e-12) + 1e-300


def test_reduction_factor():
    assert reduction_factor(PrivacyParams(8, 8, 2, 0.5, 0.1, 1.0)) == 4.0
    g = gamma_for_factor(10, 8, 2)
    assert 0.28 <= g <= 0.29
    assert reduction_factor(PrivacyParams(8, 8, 2, g, 0.1, 1.0)) == pytest.approx(10.0)
    assert reduction_factor(PrivacyParams(8, 8, 2, 1 - 1e-9, 0.1, 1.0)) < 1e-7


def test_invalid_params():
    with pytest.raises(DomainError):
        risk_exact(PrivacyParams(8, 8, 2, 0.5, 0.5, 0.2))
    with pytest.raises(DomainError):
        risk_exact(PrivacyParams(8, 8, 9, 0.5, 0.1, 1.0))


def test_monte_carlo_matches_analytic():
    mc = monte_carlo_hit(DEFAULT, 100_000, seed=0)
    p = 15 / 64
    assert abs(mc.p_hit - p) < 3 * math.sqrt(p * (1 - p) / mc.trials)
    assert abs(mc.mean_j - 2 / 8) < 3 * mc.mean_j_se
    assert monte_carlo_hit(DEFAULT, 1000, seed=1, s=8).p_hit == 1.0
    with pytest.raises(DomainError):
        monte_carlo_hit(DEFAULT, 0, seed=1)


def test_report_record_and_table():
    rep = risk_report(DEFAULT)
    rec = rep.to_record()
    assert rec["risk_exact"] == risk_exact(DEFAULT) and len(rec["pmf"]) == 8
    table = rep.format_table()
    assert "risk_closed" in table and len(table.splitlines()) == 8 + 8
