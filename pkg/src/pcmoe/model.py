"""Toy sparse MoE classifier with hand-written forward and backward passes.

Layout per party::

    tokens -> embedding -> [block_0 -> (expert layer)] ... -> mean-pool -> head

Backbone blocks are residual GELU MLPs ``h + gelu(h W + b)``. An expert layer
replaces ``h`` by ``sum_j w_j * E_{I_j}(h)`` where ``(I, w)`` are the top-k
indices and raw softmax probabilities of the party's own gate. Experts are
called through an :class:`ExpertService`, which is either the party itself
or a proxy to the owning party.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np

from .numerics import (
    Prng,
    Tensor,
    cross_entropy,
    derive_seed,
    gelu,
    gelu_backward,
    matmul,
    matmul_tn,
    row_dot,
    softmax,
    softmax_backward,
    sum_rows,
)

DEFAULT_LR = 0.05
ROUTERS = ("learned", "uniform")

# stream tags for parameter initialization
_TAG_EMBED, _TAG_BLOCK, _TAG_GATE, _TAG_EXPERT, _TAG_HEAD, _TAG_ROUTE = 1, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    """Raised for an invalid model or experiment configuration."""


class ProtocolOrderError(RuntimeError):
    """Raised when a backward pass runs without its matching forward cache."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 8
    n_layers: int = 2
    n_expert_layers: int = 2
    m: int = 8
    k: int = 2
    d_ff: int = 16
    n_classes: int = 4
    seq_len: int = 8
    vocab: int = 32
    skip_first_ns: int = 0
    skip_last_ns: int = 0
    router: str = "learned"
    expert_residual: bool = True
    expert_gain: float = 1.0

    def validate(self, n: int | None = None) -> None:
        for name in ("d_model", "n_layers", "m", "k", "d_ff", "n_classes", "seq_len", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 1 <= self.k <= self.m:
            raise ConfigError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        if not 0 <= self.n_expert_layers <= self.n_layers:
            raise ConfigError("n_expert_layers must lie in [0, n_layers]")
        if self.skip_first_ns < 0 or self.skip_last_ns < 0:
            raise ConfigError("skip counts must be nonnegative")
        if self.skip_first_ns + self.skip_last_ns > self.n_expert_layers:
            raise ConfigError("skip_first_ns + skip_last_ns exceeds n_expert_layers")
        if self.router not in ROUTERS:
            raise ConfigError(f"router must be one of {ROUTERS}, got {self.router!r}")
        if n is not None:
            if n < 1:
                raise ConfigError("party count must be >= 1")
            if self.m % n:
                raise ConfigError(f"party count n={n} must divide m={self.m}")

    @property
    def expert_positions(self) -> tuple[int, ...]:
        """Block indices followed by an expert layer: the last ``n_expert_layers`` blocks."""
        ne, nl = self.n_expert_layers, self.n_layers
        return tuple(nl - ne + i for i in range(ne))

    def is_shared(self, layer: int) -> bool:
        return self.skip_first_ns <= layer < self.n_expert_layers - self.skip_last_ns

    def expert_param_count(self) -> int:
        d, f = self.d_model, self.d_ff
        return d * f + f + f * d + d


@dataclass(frozen=True)
class ShardMap:
    """Owner of every expert, per expert layer."""

    n: int
    m: int
    shared: tuple[bool, ...]

    def owner(self, layer: int, expert: int, party: int) -> int:
        """Owner of ``expert`` in ``layer`` as seen from ``party``.

        Skipped layers are private: every party holds its own copy of all m experts.
        """
        if not self.shared[layer]:
            return party
        return expert % self.n

    def owned(self, layer: int, party: int) -> list[int]:
        if not self.shared[layer]:
            return list(range(self.m))
        return [e for e in range(self.m) if e % self.n == party]


class _Params:
    PARAM_NAMES: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in self.PARAM_NAMES}

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.PARAM_NAMES:
            yield name, getattr(self, name)

    def add_grad(self, name: str, g: Tensor) -> None:
        self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def apply_sgd(self, lr: float) -> None:
        for name in self.PARAM_NAMES:
            setattr(self, name, getattr(self, name) - lr * self.grads[name])
        self.zero_grad()


@dataclass(eq=False)
class Expert(_Params):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    owner: int
    layer: int
    index: int
    PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(eq=False)
class GatingLayer(_Params):
    w_gate: Tensor
    PARAM_NAMES = ("w_gate",)


@dataclass(eq=False)
class BackboneBlock(_Params):
    w: Tensor
    b: Tensor
    activation: str = "gelu"
    residual: bool = True
    PARAM_NAMES = ("w", "b")


@dataclass(eq=False)
class Embedding(_Params):
    table: Tensor
    PARAM_NAMES = ("table",)


@dataclass(eq=False)
class Head(_Params):
    w: Tensor
    b: Tensor
    PARAM_NAMES = ("w", "b")


@dataclass
class PartyModel:
    """Everything one party owns: backbone, gates and its expert shard."""

    party: int
    config: ModelConfig
    shard_map: ShardMap
    embed: Embedding
    blocks: list[BackboneBlock]
    gates: list[GatingLayer]
    head: Head
    experts: dict[tuple[int, int], Expert] = field(default_factory=dict)

    def local_groups(self) -> list[tuple[str, _Params]]:
        groups: list[tuple[str, _Params]] = [("embed", self.embed)]
        groups += [(f"block{i}", b) for i, b in enumerate(self.blocks)]
        groups += [(f"gate{i}", g) for i, g in enumerate(self.gates)]
        groups.append(("head", self.head))
        return groups

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, group in self.local_groups():
            for name, value in group.named():
                out[f"{prefix}.{name}"] = value
        for (layer, e), ex in sorted(self.experts.items()):
            for name, value in ex.named():
                out[f"expert{layer}.{e}.{name}"] = value
        return out

    def load_params(self, params: dict[str, Tensor]) -> None:
        groups = dict(self.local_groups())
        for key, value in params.items():
            parts = key.split(".")
            if parts[0].startswith("expert"):
                target = self.experts[(int(parts[0][6:]), int(parts[1]))]
            else:
                target = groups[parts[0]]
            setattr(target, parts[-1], np.array(value, dtype=np.result_type(value, np.float64)))

    def zero_grad(self) -> None:
        for _, g in self.local_groups():
            g.zero_grad()
        for ex in self.experts.values():
            ex.zero_grad()


def _he(fan_in: int) -> float:
    """Uniform bound giving variance 2 / fan_in."""
    return math.sqrt(6.0 / fan_in)


def _uniform(seed: int, shape: tuple[int, ...], bound: float) -> Tensor:
    return Prng(seed).uniform_array(shape, -bound, bound)


def init_expert(config: ModelConfig, seed: int, layer: int, index: int, owner: int) -> Expert:
    d, f = config.d_model, config.d_ff
    s = derive_seed(seed, _TAG_EXPERT, layer, index)
    return Expert(
        w1=_uniform(derive_seed(s, 1), (d, f), _he(d)),
        b1=np.zeros(f),
        w2=_uniform(derive_seed(s, 2), (f, d), _he(f) * config.expert_gain),
        b2=np.zeros(d),
        owner=owner,
        layer=layer,
        index=index,
    )


def init_party_model(config: ModelConfig, shard_map: ShardMap, party: int, seed: int) -> PartyModel:
    """Initialize ``party``'s parameters from the common seed.

    Backbone and gates are identical on every party; each expert's values
    depend only on ``(seed, layer, index)``, never on its owner.
    """
    d = config.d_model
    blocks = [
        BackboneBlock(
            w=_uniform(derive_seed(seed, _TAG_BLOCK, i, 1), (d, d), _he(d)),
            b=np.zeros(d),
        )
        for i in range(config.n_layers)
    ]
    gates = [
        GatingLayer(w_gate=_uniform(derive_seed(seed, _TAG_GATE, layer), (d, config.m), 1.0 / math.sqrt(d)))
        for layer in range(config.n_expert_layers)
    ]
    model = PartyModel(
        party=party,
        config=config,
        shard_map=shard_map,
        embed=Embedding(table=_uniform(derive_seed(seed, _TAG_EMBED), (config.vocab, d), 1.0)),
        blocks=blocks,
        gates=gates,
        head=Head(
            w=_uniform(derive_seed(seed, _TAG_HEAD), (d, config.n_classes), 1.0 / math.sqrt(d)),
            b=np.zeros(config.n_classes),
        ),
    )
    for layer in range(config.n_expert_layers):
        for e in shard_map.owned(layer, party):
            model.experts[(layer, e)] = init_expert(config, seed, layer, e, party)
    return model


def make_shard_map(config: ModelConfig, n: int) -> ShardMap:
    config.validate(n)
    return ShardMap(n=n, m=config.m, shared=tuple(config.is_shared(l) for l in range(config.n_expert_layers)))


def shard_experts(config: ModelConfig, n: int, seed: int) -> tuple[ShardMap, list[PartyModel]]:
    """Round-robin expert ownership (expert e -> party e mod n) plus common initialization."""
    shard_map = make_shard_map(config, n)
    return shard_map, [init_party_model(config, shard_map, i, seed) for i in range(n)]


# --- gating and experts -----------------------------------------------------


def gate_topk(gate: GatingLayer, h: Tensor, k: int) -> tuple[np.ndarray, Tensor, Tensor]:
    """Top-k routing for each row of ``h``.

    Returns ``(indices [T,k], weights [T,k], probs [T,m])``. Indices are
    ordered by decreasing probability with ties going to the lower index;
    weights are the raw softmax entries, not renormalized.
    """
    squeeze = h.ndim == 1
    h2 = h[None, :] if squeeze else h
    probs = softmax(matmul(h2, gate.w_gate))
    if not 1 <= k <= probs.shape[1]:
        raise ConfigError(f"k={k} outside [1, {probs.shape[1]}]")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    weights = np.take_along_axis(probs, order, axis=1)
    if squeeze:
        return order[0], weights[0], probs[0]
    return order, weights, probs


def uniform_topk(t: int, m: int, k: int, seed: int) -> tuple[np.ndarray, Tensor, Tensor]:
    """Load-balanced synthetic routing: equal logits, a uniformly random k-subset per token.

    Weights are the (equal) softmax probabilities ``1/m``.
    """
    rng = Prng(seed)
    indices = np.zeros((t, k), dtype=np.int64)
    for i in range(t):
        pool = list(range(m))
        for j in range(k):
            r = j + rng.below(m - j)
            pool[j], pool[r] = pool[r], pool[j]
        indices[i] = sorted(pool[:k])
    probs = np.full((t, m), 1.0 / m)
    return indices, np.full((t, k), 1.0 / m), probs


@dataclass
class ExpertCache:
    x: Tensor
    pre: Tensor
    hidden: Tensor


def expert_forward(e: Expert, x: Tensor) -> tuple[Tensor, ExpertCache]:
    if x.ndim != 2 or x.shape[1] != e.w1.shape[0]:
        raise ValueError(f"expert input must be [tokens, {e.w1.shape[0]}], got {x.shape}")
    pre = matmul(x, e.w1) + e.b1
    hidden = gelu(pre)
    out = matmul(hidden, e.w2) + e.b2
    return out, ExpertCache(x=x, pre=pre, hidden=hidden)


def expert_backward(e: Expert, cache: ExpertCache, grad_out: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Return ``(dL/dx, parameter grads)`` for one expert call."""
    grads = {
        "w2": matmul_tn(cache.hidden, grad_out),
        "b2": sum_rows(grad_out),
    }
    d_pre = gelu_backward(cache.pre, matmul(grad_out, e.w2.T))
    grads["w1"] = matmul_tn(cache.x, d_pre)
    grads["b1"] = sum_rows(d_pre)
    return matmul(d_pre, e.w1.T), grads


class ExpertService(Protocol):
    """Something that can run a forward/backward pass of an expert it hosts."""

    def forward_expert(self, session: int, layer: int, expert: int, rows: Tensor) -> Tensor: ...

    def backward_expert(self, session: int, layer: int, expert: int, grad_rows: Tensor) -> Tensor: ...


class ExpertHost:
    """Serves the experts held in ``experts``; caches inputs between passes.

    After a backward pass the expert's parameters are updated immediately
    with plain SGD; with ``lr=None`` gradients are only accumulated. The
    updated-expert log lets callers audit sparsity.
    """

    def __init__(self, experts: dict[tuple[int, int], Expert], lr: float | None) -> None:
        self.experts = experts
        self.lr = lr
        self.cache: dict[tuple[int, int, int], ExpertCache] = {}
        self.updated: list[tuple[int, int]] = []
        # called as on_execute(session, layer, expert, token_count) on every forward
        self.on_execute: Callable[[int, int, int, int], None] | None = None

    def forward_expert(self, session: int, layer: int, expert: int, rows: Tensor) -> Tensor:
        ex = self.experts[(layer, expert)]
        out, cache = expert_forward(ex, rows)
        self.cache[(session, layer, expert)] = cache
        if self.on_execute is not None:
            self.on_execute(session, layer, expert, rows.shape[0])
        return out

    def backward_expert(self, session: int, layer: int, expert: int, grad_rows: Tensor) -> Tensor:
        try:
            cache = self.cache.pop((session, layer, expert))
        except KeyError:
            raise ProtocolOrderError(f"no forward cache for session={session} layer={layer} expert={expert}") from None
        ex = self.experts[(layer, expert)]
        dx, grads = expert_backward(ex, cache, grad_rows)
        for name, g in grads.items():
            ex.add_grad(name, g)
        if self.lr is not None:
            ex.apply_sgd(self.lr)
        self.updated.append((layer, expert))
        return dx


# --- routed expert layer ----------------------------------------------------


@dataclass
class LayerRoute:
    """Routing record of one expert layer for one batch (the forward cache)."""

    layer: int
    h_in: Tensor
    indices: np.ndarray
    weights: Tensor
    probs: Tensor
    # expert -> (token positions, slot within top-k, expert outputs)
    calls: dict[int, tuple[np.ndarray, np.ndarray, Tensor]]
    owners: dict[int, int]
    learned: bool = True


def _group_by_expert(indices: np.ndarray, m: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    groups = {}
    for e in range(m):
        toks, slots = np.nonzero(indices == e)
        if toks.size:
            groups[e] = (toks, slots)
    return groups


def process_experts(
    h: Tensor,
    layer: int,
    gate: GatingLayer,
    shard_map: ShardMap,
    party: int,
    k: int,
    services: Callable[[int], ExpertService],
    session: int,
    router: str = "learned",
) -> tuple[Tensor, LayerRoute]:
    """Route each token to its top-k experts and combine the weighted outputs.

    Tokens are grouped per expert (ascending expert index, tokens in order),
    so each expert receives a single call per batch. ``router="uniform"``
    ignores the gate and routes uniformly at random (seeded by session,
    layer and party).
    """
    learned = router == "learned"
    if learned:
        indices, weights, probs = gate_topk(gate, h, k)
    else:
        seed = derive_seed(_TAG_ROUTE, session, layer, party)
        indices, weights, probs = uniform_topk(h.shape[0], shard_map.m, k, seed)
        weights, probs = weights.astype(h.dtype), probs.astype(h.dtype)
    calls, owners = {}, {}
    for e, (toks, slots) in _group_by_expert(indices, shard_map.m).items():
        owner = shard_map.owner(layer, e, party)
        out = services(owner).forward_expert(session, layer, e, np.ascontiguousarray(h[toks]))
        calls[e] = (toks, slots, out)
        owners[e] = owner
    selected = np.zeros((h.shape[0], k, h.shape[1]), dtype=h.dtype)
    for toks, slots, out in calls.values():
        selected[toks, slots] = out
    combined = np.zeros_like(h)
    for j in range(k):
        combined += weights[:, j : j + 1] * selected[:, j]
    route = LayerRoute(layer, h, indices, weights, probs, calls, owners, learned)
    return combined, route


def backward_experts(
    grad_out: Tensor,
    route: LayerRoute,
    gate: GatingLayer,
    services: Callable[[int], ExpertService],
    session: int,
) -> Tensor:
    """Backprop through one expert layer; returns dL/d(layer input).

    Each called expert receives ``w_e * grad_out`` for its tokens and returns
    an activation-sized input gradient. The gate's gradient flows only through
    the selected experts' probabilities.
    """
    t, k = route.indices.shape
    d = grad_out.shape[1]
    expert_dx = np.zeros((t, k, d), dtype=grad_out.dtype)
    selected = np.zeros((t, k, d), dtype=grad_out.dtype)
    for e in sorted(route.calls):
        toks, slots, out = route.calls[e]
        scaled = route.weights[toks, slots][:, None] * grad_out[toks]
        dx = services(route.owners[e]).backward_expert(session, route.layer, e, np.ascontiguousarray(scaled))
        expert_dx[toks, slots] = dx
        selected[toks, slots] = out
    dh = np.zeros_like(grad_out)
    for j in range(k):
        dh += expert_dx[:, j]
    if not route.learned:
        return dh
    d_weights = row_dot(np.broadcast_to(grad_out[:, None, :], selected.shape), selected)
    d_probs = np.zeros_like(route.probs)
    np.put_along_axis(d_probs, route.indices, d_weights, axis=1)
    d_logits = softmax_backward(route.probs, d_probs)
    gate.add_grad("w_gate", matmul_tn(route.h_in, d_logits))
    return matmul(d_logits, gate.w_gate.T) + dh


# --- full model -------------------------------------------------------------


@dataclass
class ForwardCache:
    tokens: np.ndarray
    block_inputs: list[Tensor] = field(default_factory=list)
    block_pre: list[Tensor] = field(default_factory=list)
    routes: dict[int, LayerRoute] = field(default_factory=dict)
    pooled: Tensor | None = None
    session: int = 0


def local_forward(
    model: PartyModel,
    tokens: np.ndarray,
    services: Callable[[int], ExpertService],
    session: int = 0,
) -> tuple[Tensor, ForwardCache]:
    """Logits ``[batch, n_classes]`` for integer ``tokens [batch, seq_len]``."""
    cfg = model.config
    tokens = np.asarray(tokens)
    batch, seq = tokens.shape
    cache = ForwardCache(tokens=tokens, session=session)
    h = np.ascontiguousarray(model.embed.table[tokens.reshape(-1)])
    positions = dict((pos, layer) for layer, pos in enumerate(cfg.expert_positions))
    for i, block in enumerate(model.blocks):
        cache.block_inputs.append(h)
        pre = matmul(h, block.w) + block.b
        cache.block_pre.append(pre)
        act = gelu(pre)
        h = h + act if block.residual else act
        if i in positions:
            layer = positions[i]
            moe, route = process_experts(
                h, layer, model.gates[layer], model.shard_map, model.party, cfg.k, services, session, cfg.router
            )
            h = h + moe if cfg.expert_residual else moe
            cache.routes[layer] = route
    pooled = np.zeros((batch, cfg.d_model), dtype=h.dtype)
    h3 = h.reshape(batch, seq, cfg.d_model)
    for s in range(seq):
        pooled += h3[:, s]
    pooled /= seq
    cache.pooled = pooled
    return matmul(pooled, model.head.w) + model.head.b, cache


def batch_loss(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient wrt logits."""
    batch = logits.shape[0]
    total = 0.0
    grad = np.zeros_like(logits)
    for i in range(batch):
        loss, g = cross_entropy(logits[i], int(labels[i]))
        total += loss
        grad[i] = g / batch
    return total / batch, grad


def backward_local(
    model: PartyModel,
    cache: ForwardCache | None,
    grad_logits: Tensor,
    services: Callable[[int], ExpertService],
) -> Tensor:
    """Reverse pass over the party's layers; returns dL/d(embedded input).

    Local parameter gradients are accumulated into the party's grad buffers;
    expert layers delegate to :func:`backward_experts`.
    """
    if cache is None or cache.pooled is None:
        raise ProtocolOrderError("backward_local called without a forward cache")
    cfg = model.config
    batch, seq = cache.tokens.shape
    model.head.add_grad("w", matmul_tn(cache.pooled, grad_logits))
    model.head.add_grad("b", sum_rows(grad_logits))
    d_pooled = matmul(grad_logits, model.head.w.T) / seq
    dh = np.ascontiguousarray(np.repeat(d_pooled, seq, axis=0))
    layer_at = dict((pos, layer) for layer, pos in enumerate(cfg.expert_positions))
    for i in reversed(range(len(model.blocks))):
        if i in layer_at:
            layer = layer_at[i]
            route = cache.routes.pop(layer, None)
            if route is None:
                raise ProtocolOrderError(f"missing routing record for expert layer {layer}")
            d_moe = backward_experts(dh, route, model.gates[layer], services, cache.session)
            dh = dh + d_moe if cfg.expert_residual else d_moe
        block = model.blocks[i]
        d_pre = gelu_backward(cache.block_pre[i], dh)
        block.add_grad("w", matmul_tn(cache.block_inputs[i], d_pre))
        block.add_grad("b", sum_rows(d_pre))
        dh_in = matmul(d_pre, block.w.T)
        dh = dh + dh_in if block.residual else dh_in
    flat_tokens = cache.tokens.reshape(-1)
    table_grad = model.embed.grads["table"]
    for t, tok in enumerate(flat_tokens):
        table_grad[tok] += dh[t]
    cache.block_inputs.clear()
    cache.block_pre.clear()
    cache.pooled = None
    return dh


def sgd_step(model: PartyModel, lr: float) -> None:
    """``theta <- theta - lr * grad`` for the party's backbone and gates.

    Experts are updated by their host right after their backward pass, so
    only experts with pending gradients (none, in normal operation) are
    touched here.
    """
    for _, group in model.local_groups():
        group.apply_sgd(lr)
    for ex in model.experts.values():
        if any(np.any(g) for g in ex.grads.values()):
            ex.apply_sgd(lr)


def predict(model: PartyModel, tokens: np.ndarray, services: Callable[[int], ExpertService]) -> np.ndarray:
    logits, _ = local_forward(model, tokens, services, session=-1)
    return np.argmax(logits, axis=1)


class EvalService:
    """Stateless expert access used for evaluation; nothing is cached."""

    def __init__(self, experts: dict[tuple[int, int], Expert]) -> None:
        self.experts = experts

    def forward_expert(self, session: int, layer: int, expert: int, rows: Tensor) -> Tensor:
        return expert_forward(self.experts[(layer, expert)], rows)[0]

    def backward_expert(self, session: int, layer: int, expert: int, grad_rows: Tensor) -> Tensor:
        raise ProtocolOrderError("evaluation service does not support backward passes")
