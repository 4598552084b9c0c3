"""Finite-difference checks for every layer type and for the whole model.

Analytic gradients always come from the float64 code path. Numeric
differences are evaluated with all parameters promoted to ``np.longdouble``
so rounding noise in the loss does not swamp gradients near 1e-8.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import (
    BackboneBlock,
    ExpertHost,
    GatingLayer,
    ModelConfig,
    PartyModel,
    ShardMap,
    backward_experts,
    backward_local,
    batch_loss,
    expert_backward,
    expert_forward,
    init_expert,
    local_forward,
    process_experts,
    shard_experts,
)
from .numerics import Tensor, cross_entropy, gelu, gelu_backward, grad_check, matmul, matmul_tn

FD_DTYPE = np.longdouble


def _param_grads(model: PartyModel) -> dict[str, Tensor]:
    grads = {}
    for prefix, group in model.local_groups():
        for name, _ in group.named():
            grads[f"{prefix}.{name}"] = group.grads[name].copy()
    for (layer, e), ex in sorted(model.experts.items()):
        for name, _ in ex.named():
            grads[f"expert{layer}.{e}.{name}"] = ex.grads[name].copy()
    return grads


def model_loss_and_grads(model: PartyModel, tokens: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, Tensor]]:
    host = ExpertHost(model.experts, lr=None)
    model.zero_grad()
    logits, cache = local_forward(model, tokens, lambda owner: host, session=0)
    loss, grad_logits = batch_loss(logits, labels)
    backward_local(model, cache, grad_logits, lambda owner: host)
    return loss, _param_grads(model)


def full_model_grad_check(
    config: ModelConfig,
    seed: int,
    batch: int = 2,
    n_coords: int | None = 64,
    eps: float = 1e-5,
) -> float:
    """Max relative error over parameter coordinates of a single-party model.

    ``n_coords`` coordinates are drawn uniformly (seeded) from all parameters;
    ``None`` checks every coordinate.
    """
    _, parties = shard_experts(config, 1, seed)
    model = parties[0]
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, config.vocab, (batch, config.seq_len))
    labels = rng.integers(0, config.n_classes, batch)
    base = {k: v.copy() for k, v in model.named_params().items()}
    _, grads = model_loss_and_grads(model, tokens, labels)
    names = list(base)
    sizes = np.array([base[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = np.arange(total) if n_coords is None else np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    where = [(names[j], int(p - offsets[j])) for p in picks for j in [int(np.searchsorted(offsets, p, side="right") - 1)]]
    analytic = np.array([grads[name].reshape(-1)[i] for name, i in where])
    promoted = {k: v.astype(FD_DTYPE) for k, v in base.items()}

    def f(x: Tensor) -> tuple[float, Tensor]:
        params = {k: v.copy() for k, v in promoted.items()}
        for (name, i), value in zip(where, x):
            params[name].reshape(-1)[i] = value
        model.load_params(params)
        host = ExpertHost(model.experts, lr=None)
        logits, _ = local_forward(model, tokens, lambda owner: host, session=0)
        loss, _ = batch_loss(logits, labels)
        return loss, analytic

    x0 = np.array([promoted[name].reshape(-1)[i] for name, i in where], dtype=FD_DTYPE)
    try:
        return grad_check(f, x0, eps)
    finally:
        model.load_params(base)


def _rng_tensor(rng: np.random.Generator, *shape: int) -> Tensor:
    return rng.standard_normal(shape)


def _projected(forward: Callable[[Tensor], Tensor], backward: Callable[[Tensor, Tensor], Tensor], upstream: Tensor):
    """Scalar ``sum(upstream * forward(x))`` with its gradient."""

    def f(x: Tensor) -> tuple[float, Tensor]:
        out = forward(x)
        value = np.sum(upstream.astype(out.dtype) * out)
        return value, backward(x.astype(np.float64), upstream)

    return f


def layer_grad_checks(seed: int, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per layer type: linear, gelu, backbone block, expert,
    gated expert layer (input and gate weights) and softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    d, f, m, k, t = 4, 6, 4, 2, 3
    out: dict[str, float] = {}

    w = _rng_tensor(rng, d, f)
    up = _rng_tensor(rng, t, f)
    x = _rng_tensor(rng, t, d)
    out["linear"] = grad_check(_projected(lambda z: matmul(z, w.astype(z.dtype)), lambda z, u: matmul(u, w.T), up), x.astype(FD_DTYPE), eps)

    up = _rng_tensor(rng, t, d)
    out["gelu"] = grad_check(_projected(gelu, gelu_backward, up), x.astype(FD_DTYPE), eps)

    block = BackboneBlock(w=_rng_tensor(rng, d, d) / 2, b=_rng_tensor(rng, d) / 2)

    def block_fwd(z: Tensor) -> Tensor:
        return z + gelu(matmul(z, block.w.astype(z.dtype)) + block.b)

    def block_bwd(z: Tensor, u: Tensor) -> Tensor:
        return u + matmul(gelu_backward(matmul(z, block.w) + block.b, u), block.w.T)

    out["backbone_block"] = grad_check(_projected(block_fwd, block_bwd, up), x.astype(FD_DTYPE), eps)

    def block_w_fwd(wv: Tensor) -> Tensor:
        return x + gelu(matmul(x.astype(wv.dtype), wv) + block.b)

    def block_w_bwd(wv: Tensor, u: Tensor) -> Tensor:
        return matmul_tn(x, gelu_backward(matmul(x, wv) + block.b, u))

    out["backbone_block_weights"] = grad_check(_projected(block_w_fwd, block_w_bwd, up), block.w.astype(FD_DTYPE), eps)

    cfg = ModelConfig(d_model=d, d_ff=f, m=m, k=k)
    ex = init_expert(cfg, seed, 0, 0, 0)
    ex.b1 = _rng_tensor(rng, f) / 4
    ex.b2 = _rng_tensor(rng, d) / 4

    def expert_x(z: Tensor) -> Tensor:
        saved = (ex.w1, ex.b1, ex.w2, ex.b2)
        ex.w1, ex.b1, ex.w2, ex.b2 = (a.astype(z.dtype) for a in saved)
        try:
            return expert_forward(ex, z)[0]
        finally:
            ex.w1, ex.b1, ex.w2, ex.b2 = saved

    def expert_x_bwd(z: Tensor, u: Tensor) -> Tensor:
        _, cache = expert_forward(ex, z)
        return expert_backward(ex, cache, u)[0]

    out["expert_input"] = grad_check(_projected(expert_x, expert_x_bwd, up), x.astype(FD_DTYPE), eps)

    def expert_w1(wv: Tensor) -> Tensor:
        saved = (ex.w1, ex.b1, ex.w2, ex.b2)
        ex.w1, ex.b1, ex.w2, ex.b2 = wv, saved[1].astype(wv.dtype), saved[2].astype(wv.dtype), saved[3].astype(wv.dtype)
        try:
            return expert_forward(ex, x.astype(wv.dtype))[0]
        finally:
            ex.w1, ex.b1, ex.w2, ex.b2 = saved

    def expert_w1_bwd(wv: Tensor, u: Tensor) -> Tensor:
        saved = ex.w1
        ex.w1 = wv
        try:
            _, cache = expert_forward(ex, x)
            return expert_backward(ex, cache, u)[1]["w1"]
        finally:
            ex.w1 = saved

    out["expert_weights"] = grad_check(_projected(expert_w1, expert_w1_bwd, up), ex.w1.astype(FD_DTYPE), eps)

    # gated expert layer: all m experts local, gradient wrt input and wrt gate
    experts = {(0, e): init_expert(cfg, seed, 0, e, 0) for e in range(m)}
    gate = GatingLayer(w_gate=_rng_tensor(rng, d, m))
    shard = ShardMap(n=1, m=m, shared=(True,))

    def layer_fwd(z: Tensor, wg: Tensor) -> Tensor:
        promoted = {key: init_expert(cfg, seed, 0, key[1], 0) for key in experts}
        for key, e in promoted.items():
            for name, value in experts[key].named():
                setattr(e, name, value.astype(z.dtype))
        host = ExpertHost(promoted, lr=None)
        g = GatingLayer(w_gate=wg.astype(z.dtype))
        return process_experts(z, 0, g, shard, 0, k, lambda o: host, 0)[0]

    def layer_bwd(z: Tensor, wg: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
        host = ExpertHost(experts, lr=None)
        g = GatingLayer(w_gate=wg)
        _, route = process_experts(z, 0, g, shard, 0, k, lambda o: host, 0)
        dz = backward_experts(u, route, g, lambda o: host, 0)
        return dz, g.grads["w_gate"]

    out["expert_layer_input"] = grad_check(
        lambda z: (np.sum(up.astype(z.dtype) * layer_fwd(z, gate.w_gate)), layer_bwd(z.astype(np.float64), gate.w_gate, up)[0]),
        x.astype(FD_DTYPE),
        eps,
    )
    out["gate_weights"] = grad_check(
        lambda wg: (np.sum(up.astype(wg.dtype) * layer_fwd(x.astype(wg.dtype), wg)), layer_bwd(x, wg.astype(np.float64), up)[1]),
        gate.w_gate.astype(FD_DTYPE),
        eps,
    )

    logits = _rng_tensor(rng, 5)
    label = int(rng.integers(0, 5))
    out["cross_entropy"] = grad_check(lambda z: cross_entropy(z, label), logits.astype(FD_DTYPE), eps)

    w_lin = _rng_tensor(rng, d, 5)
    v = _rng_tensor(rng, d)

    def ce_after_linear(wv: Tensor) -> tuple[float, Tensor]:
        z = matmul(v[None, :].astype(wv.dtype), wv)[0]
        loss, g = cross_entropy(z, label)
        gw = matmul_tn(v[None, :], g.astype(np.float64)[None, :])
        return loss, gw

    out["ce_after_linear"] = grad_check(ce_after_linear, w_lin.astype(FD_DTYPE), eps)
    return out
