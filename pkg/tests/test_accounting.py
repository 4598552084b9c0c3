import numpy as np
import pytest

from pcmoe.accounting import (
    LEDGER_FIELDS,
    DomainError,
    build_ledger,
    count_params,
    dense_expert_flops_forward,
    flops_round,
    nonexpert_params,
    relative_total_ram,
    resident_touched_fraction,
    step_param_touches,
    total_expert_params,
    touched_fraction,
    write_ledger,
)
from pcmoe.data import DatasetSpec, synth_dataset
from pcmoe.model import ModelConfig, make_shard_map
from pcmoe.protocol import TrainConfig, run_training


def _run(n=8, epochs=2, mode="pcmoe", batch=4, **model_kwargs):
    cfg = TrainConfig(model=ModelConfig(**model_kwargs), n=n, epochs=epochs, batch_size=batch, lr=0.05, seed=1)
    data, _ = synth_dataset(DatasetSpec(examples_per_party=8), n, 1)
    return run_training(cfg, data, mode)


def test_param_counts():
    cfg = ModelConfig()
    smap = make_shard_map(cfg, 8)
    per_party = [count_params(cfg, smap, p) for p in range(8)]
    assert all(c.expert_owned * 8 == total_expert_params(cfg) for c in per_party)
    assert count_params(cfg, make_shard_map(cfg, 1), 0).expert_owned == total_expert_params(cfg)
    assert per_party[0].nonexpert == nonexpert_params(cfg)
    d = cfg.d_model
    assert cfg.expert_param_count() == d * cfg.d_ff * 2 + cfg.d_ff + d


def test_full_activation_matches_dense_flops():
    run = _run(n=1, epochs=1, k=8)
    cfg = run.models[0].config
    for s in run.session_owner:
        f = flops_round(cfg, run.trace, run.session_owner, 4, sessions=[s])[0]
        assert f.expert_forward == dense_expert_flops_forward(cfg, 4)
        assert f.expert_backward == 2 * f.expert_forward


def test_flops_charge_executors():
    run = _run()
    cfg = run.models[0].config
    flops = flops_round(cfg, run.trace, run.session_owner, 4)
    served = {ev.executor for ev in run.trace}
    assert served <= set(flops) and len(flops) == 8
    total_rows = sum(ev.tokens for ev in run.trace)
    per_row = 4 * cfg.d_model * cfg.d_ff
    assert sum(f.expert_forward for f in flops.values()) == per_row * total_rows
    touches = step_param_touches(run.trace, 0, cfg)
    assert sum(touches.values()) == cfg.k * 4 * cfg.seq_len * cfg.n_expert_layers * cfg.expert_param_count()


def test_relative_total_ram():
    assert relative_total_ram(5.0, 5.0, 3.0) == 100.0
    assert abs(relative_total_ram(2864.24, 25691.11, 2194.93) - 18.14) < 0.01
    assert relative_total_ram(0.0, 10.0, 0.0) == 0.0
    with pytest.raises(DomainError):
        relative_total_ram(0.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        relative_total_ram(-1.0, 1.0, 1.0)


def test_touched_fraction_full_activation():
    run = _run(n=1, epochs=2, k=8)
    cfg = run.models[0].config
    assert touched_fraction(run.trace, 0, cfg, 1, run.session_round) == pytest.approx(1.0)


def test_touched_fraction_isolated():
    # every held expert is used once enough tokens are routed uniformly
    run = _run(n=4, epochs=2, mode="isolated", batch=16, router="uniform")
    cfg = run.models[0].config
    for p in range(4):
        assert resident_touched_fraction(run.trace, p, cfg, 4, run.session_round) == 1.0


def test_ledger(tmp_path):
    run = _run(n=4, epochs=2)
    cfg = run.models[0].config
    ledger = build_ledger(cfg, run.models[0].shard_map, run.trace, run.session_owner, run.session_round, 4, range(4))
    assert len(ledger) == 4 * 2
    assert all(e.optimizer_state == 0 and e.flops_backward == 2 * e.flops_forward for e in ledger)
    assert all(e.expert_params_touched <= e.expert_params_resident for e in ledger)
    path = tmp_path / "ledger.csv"
    write_ledger(ledger, path)
    assert path.read_text().splitlines()[0].split(",") == LEDGER_FIELDS
