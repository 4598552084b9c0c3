import numpy as np
import pytest

from pcmoe.checks import full_model_grad_check, layer_grad_checks
from pcmoe.model import (
    ConfigError,
    Expert,
    ExpertHost,
    GatingLayer,
    ModelConfig,
    ProtocolOrderError,
    backward_experts,
    backward_local,
    batch_loss,
    expert_forward,
    gate_topk,
    local_forward,
    make_shard_map,
    process_experts,
    sgd_step,
    shard_experts,
    uniform_topk,
)


def _gate_with_logits(logits):
    # h = e_0 picks row 0 of w_gate as the logit vector
    w = np.zeros((2, len(logits)))
    w[0] = logits
    return GatingLayer(w_gate=w), np.array([1.0, 0.0])


class CountingHost(ExpertHost):
    def __init__(self, experts, lr=None):
        super().__init__(experts, lr)
        self.forward_calls = 0
        self.backward_inputs = []

    def forward_expert(self, session, layer, expert, rows):
        self.forward_calls += 1
        return super().forward_expert(session, layer, expert, rows)

    def backward_expert(self, session, layer, expert, grad_rows):
        self.backward_inputs.append(grad_rows.copy())
        return super().backward_expert(session, layer, expert, grad_rows)


def test_round_robin_ownership():
    smap, models = shard_experts(ModelConfig(m=8), 4, 0)
    assert [smap.owned(0, p) for p in range(4)] == [[0, 4], [1, 5], [2, 6], [3, 7]]
    assert all(sorted(k[1] for k in m.experts if k[0] == 0) == smap.owned(0, m.party) for m in models)
    smap8, _ = shard_experts(ModelConfig(m=8, k=2), 8, 0)
    assert all(len(smap8.owned(layer, p)) == 1 for layer in range(2) for p in range(8))


def test_indivisible_party_count_rejected():
    with pytest.raises(ConfigError):
        shard_experts(ModelConfig(m=8), 3, 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(k=0), dict(k=9), dict(d_model=0), dict(skip_first_ns=2, skip_last_ns=1), dict(router="hash"), dict(n_expert_layers=3)],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs).validate()


def test_skipped_layers_are_private():
    smap = make_shard_map(ModelConfig(skip_first_ns=1), 4)
    assert smap.shared == (False, True)
    assert smap.owner(0, 5, 2) == 2 and smap.owned(0, 3) == list(range(8))
    assert smap.owner(1, 5, 2) == 1


def test_expert_init_independent_of_owner():
    _, by4 = shard_experts(ModelConfig(), 4, 9)
    _, by1 = shard_experts(ModelConfig(), 1, 9)
    for m in by4:
        for key, ex in m.experts.items():
            assert ex.w1.tobytes() == by1[0].experts[key].w1.tobytes()


def test_gate_topk_examples():
    gate, h = _gate_with_logits([2.0, 1.0, 0.0])
    idx, w, _ = gate_topk(gate, h, 2)
    assert list(idx) == [0, 1]
    np.testing.assert_allclose(w, [0.66524096, 0.24472847], atol=1e-8)
    gate, h = _gate_with_logits([0.0, 0.0, 0.0])
    idx, w, _ = gate_topk(gate, h, 2)
    assert list(idx) == [0, 1]
    np.testing.assert_allclose(w, [1 / 3, 1 / 3], atol=1e-15)
    gate, h = _gate_with_logits([0.3, -1.0, 2.0, 0.1])
    idx, w, _ = gate_topk(gate, h, 4)
    assert sorted(idx) == [0, 1, 2, 3] and abs(w.sum() - 1.0) < 1e-12


def test_expert_zero_weights_gives_bias():
    ex = Expert(np.zeros((3, 5)), np.zeros(5), np.zeros((5, 3)), np.array([1.0, 2.0, 3.0]), 0, 0, 0)
    out, _ = expert_forward(ex, np.ones((2, 3)))
    np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]] * 2)


def _single_layer(k, n=1, seed=0, tokens=5):
    cfg = ModelConfig(k=k)
    smap, models = shard_experts(cfg, n, seed)
    host = {m.party: CountingHost(m.experts) for m in models}
    h = np.random.default_rng(seed).normal(size=(tokens, cfg.d_model))
    return cfg, smap, models, host, h


def test_process_experts_k1_is_weighted_single_output():
    cfg, smap, models, host, h = _single_layer(k=1)
    gate = models[0].gates[0]
    out, route = process_experts(h, 0, gate, smap, 0, 1, host.__getitem__, 0)
    for t in range(h.shape[0]):
        e = route.indices[t, 0]
        ref, _ = expert_forward(models[0].experts[(0, e)], h[t : t + 1])
        np.testing.assert_allclose(out[t], route.weights[t, 0] * ref[0], rtol=1e-12)


def test_one_call_per_selected_expert():
    cfg, smap, models, host, h = _single_layer(k=2)
    _, route = process_experts(h, 0, models[0].gates[0], smap, 0, 2, host.__getitem__, 0)
    assert host[0].forward_calls == len(set(route.indices.reshape(-1)))


def test_backward_k1_unit_weight_passes_grad_unchanged():
    cfg, smap, models, host, h = _single_layer(k=1)
    gate = models[0].gates[0]
    _, route = process_experts(h, 0, gate, smap, 0, 1, host.__getitem__, 0)
    route.weights[:] = 1.0
    g = np.random.default_rng(2).normal(size=h.shape)
    backward_experts(g, route, gate, host.__getitem__, 0)
    got = np.concatenate(host[0].backward_inputs)
    want = np.concatenate([g[route.calls[e][0]] for e in sorted(route.calls)])
    np.testing.assert_array_equal(got, want)


def test_backward_without_forward_is_order_error():
    _, models = shard_experts(ModelConfig(), 1, 0)
    with pytest.raises(ProtocolOrderError):
        backward_local(models[0], None, np.zeros((1, 4)), lambda o: None)
    host = ExpertHost(models[0].experts, None)
    with pytest.raises(ProtocolOrderError):
        host.backward_expert(0, 0, 0, np.zeros((1, 8)))


def test_uniform_routing_remote_fraction():
    # n=8 parties, m=8 experts: a selected expert is remote with probability 7/8
    n, m, k, calls = 8, 8, 2, 10000
    remote = 0
    for c in range(calls):
        idx, w, _ = uniform_topk(1, m, k, seed=c)
        assert len(set(idx[0])) == k and np.all(w == 1 / m)
        remote += sum(int(e % n != 0) for e in idx[0])
    p = 7 / 8
    total = calls * k
    assert abs(remote / total - p) < 3 * np.sqrt(p * (1 - p) / total)


def test_no_expert_layers_sends_nothing():
    cfg = ModelConfig(n_expert_layers=0)
    _, models = shard_experts(cfg, 1, 0)

    def forbidden(owner):
        raise AssertionError("expert service used")

    logits, cache = local_forward(models[0], np.zeros((2, cfg.seq_len), dtype=int), forbidden)
    assert logits.shape == (2, cfg.n_classes)


def test_all_local_experts_use_only_own_host():
    cfg = ModelConfig()
    _, models = shard_experts(cfg, 1, 0)
    seen = []
    host = ExpertHost(models[0].experts, None)

    def services(owner):
        seen.append(owner)
        return host

    local_forward(models[0], np.ones((2, cfg.seq_len), dtype=int), services)
    assert set(seen) == {0}


def test_zero_upstream_gives_zero_gradients():
    cfg = ModelConfig()
    _, models = shard_experts(cfg, 1, 0)
    model = models[0]
    host = ExpertHost(model.experts, None)
    tokens = np.arange(2 * cfg.seq_len).reshape(2, cfg.seq_len) % cfg.vocab
    _, cache = local_forward(model, tokens, lambda o: host)
    backward_local(model, cache, np.zeros((2, cfg.n_classes)), lambda o: host)
    for _, group in model.local_groups():
        assert all(not np.any(g) for g in group.grads.values())
    for ex in model.experts.values():
        assert all(not np.any(g) for g in ex.grads.values())


def _train(seed, steps, lr):
    cfg = ModelConfig()
    _, models = shard_experts(cfg, 1, seed)
    model = models[0]
    host = ExpertHost(model.experts, lr)
    g = np.random.default_rng(seed)
    for s in range(steps):
        tokens = g.integers(0, cfg.vocab, (3, cfg.seq_len))
        labels = g.integers(0, cfg.n_classes, 3)
        logits, cache = local_forward(model, tokens, lambda o: host, s)
        _, grad = batch_loss(logits, labels)
        backward_local(model, cache, grad, lambda o: host)
        sgd_step(model, lr)
    return model.named_params()


def test_lr_zero_leaves_parameters_unchanged():
    _, models = shard_experts(ModelConfig(), 1, 4)
    before = models[0].named_params()
    after = _train(4, 3, 0.0)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_training_is_deterministic():
    a, b = _train(5, 10, 0.1), _train(5, 10, 0.1)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != _train(6, 0, 0.1)[k].tobytes() for k in a)


def test_layer_gradients():
    errs = layer_grad_checks(0)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize(
    "kwargs", [{}, {"expert_residual": False}, {"router": "uniform"}, {"skip_first_ns": 1}, {"k": 1}, {"k": 8}]
)
def test_full_model_gradient(kwargs):
    assert full_model_grad_check(ModelConfig(**kwargs), seed=1) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_full_model_gradient_every_coordinate(seed):
    small = ModelConfig(d_model=4, d_ff=6, m=4, k=2, vocab=8, seq_len=3, n_classes=3)
    assert full_model_grad_check(small, seed=seed, n_coords=None) < 1e-4
