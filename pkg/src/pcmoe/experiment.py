"""Experiment configuration, runs, ablation sweeps and output files."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .accounting import build_ledger, write_ledger
from .audit import AuditContext, AuditReport, audit_transcript, forbidden_hashes
from .data import DatasetSpec, synth_dataset
from .model import ConfigError, ModelConfig, make_shard_map, shard_experts
from .privacy import PrivacyParams, RiskReport, risk_report
from .protocol import MODES, MetricsRecord, RunResult, TrainConfig, Transcript, isolated_config, run_training

SCHEMA = "pcmoe-config/1"
AXES = ("n_s_first", "n_s_last", "n_s_both", "n_parties")
METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]
CONVERGENCE_POINTS = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run. Field order is the file order."""

    mode: str = "pcmoe"
    n: int = 8
    seed: int = 0
    epochs: int = 25
    batches_per_turn: int = 2
    batch_size: int = 32
    lr: float = 0.0
    expert_lr: float | None = 0.5
    carrier: str = "loopback"
    # model
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
    # data
    examples_per_party: int = 64
    skew: float = 0.8
    signal: float = 0.5
    test_size: int = 128
    # privacy report
    gamma: float = 0.5
    q: float = 0.1
    q_total: float = 1.0
    out_dir: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_expert_layers=self.n_expert_layers,
            m=self.m,
            k=self.k,
            d_ff=self.d_ff,
            n_classes=self.n_classes,
            seq_len=self.seq_len,
            vocab=self.vocab,
            skip_first_ns=self.skip_first_ns,
            skip_last_ns=self.skip_last_ns,
            router=self.router,
            expert_residual=self.expert_residual,
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            examples_per_party=self.examples_per_party,
            n_classes=self.n_classes,
            vocab=self.vocab,
            seq_len=self.seq_len,
            skew=self.skew,
            signal=self.signal,
            test_size=self.test_size,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self.model_config(),
            n=self.n,
            batches_per_turn=self.batches_per_turn,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            expert_lr=self.expert_lr,
            seed=self.seed,
        )

    def privacy_params(self) -> PrivacyParams:
        return PrivacyParams(n=self.n, m=self.m, k=self.k, gamma=self.gamma, q=self.q, q_total=self.q_total)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        self.model_config().validate(self.n)
        if self.epochs < 1 or self.batches_per_turn < 1 or self.batch_size < 1:
            raise ConfigError("epochs, batches_per_turn and batch_size must be >= 1")


# --- config file ------------------------------------------------------------


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind: str, key: str):
    if text == "none":
        if "None" in kind:
            return None
        raise ConfigError(f"{key} may not be none")
    try:
        if kind.startswith("bool"):
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["# pcmoe experiment configuration", f"schema = {SCHEMA}"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    kinds = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    values = {}
    schema = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "schema":
            schema = value
            continue
        if key not in kinds:
            raise ConfigError(f"line {number}: unknown key {key!r}")
        values[key] = _parse(value, kinds[key], key)
    if schema != SCHEMA:
        raise ConfigError(f"unsupported or missing schema {schema!r}; expected {SCHEMA}")
    return ExperimentConfig(**values)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --- running ----------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    run: RunResult
    risk: RiskReport
    audit: AuditReport | None

    @property
    def metrics(self) -> list[MetricsRecord]:
        return self.run.metrics


def round_accuracy(metrics: list[MetricsRecord]) -> list[float]:
    """Mean test accuracy over parties, per round."""
    rounds = sorted({r.round for r in metrics})
    return [float(np.mean([r.test_accuracy for r in metrics if r.round == k])) for k in rounds]


def rounds_to_best(accs: list[float]) -> int:
    """First round (1-based) within 0.5 points of the run's best accuracy."""
    best = max(accs)
    for i, a in enumerate(accs):
        if a >= best - CONVERGENCE_POINTS / 100.0:
            return i + 1
    return len(accs)


def audit_context(cfg: ExperimentConfig, datasets, param_sets) -> AuditContext:
    mcfg = cfg.model_config()
    return AuditContext(
        d_model=cfg.d_model,
        n=cfg.n,
        m=cfg.m,
        k=cfg.k,
        shared_layers=make_shard_map(mcfg, cfg.n).shared,
        tokens_per_step=cfg.batch_size * cfg.seq_len,
        forbidden=forbidden_hashes(datasets, cfg.n_classes, param_sets),
    )


def initial_params(cfg: ExperimentConfig) -> list[dict[str, np.ndarray]]:
    mcfg = cfg.model_config()
    if cfg.mode == "isolated":
        mcfg = isolated_config(mcfg)
    n = 1 if cfg.mode == "centralized" else cfg.n
    _, models = shard_experts(mcfg, n, cfg.seed)
    return [m.named_params() for m in models]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run one configuration; with ``out_dir`` set, write every artifact there."""
    cfg.validate()
    datasets, test = synth_dataset(cfg.dataset_spec(), cfg.n, cfg.seed)
    run = run_training(cfg.train_config(), datasets, cfg.mode, carrier=cfg.carrier, test=test)
    report = None
    if cfg.mode == "pcmoe":
        ctx = audit_context(cfg, datasets, initial_params(cfg) + run.final_params())
        report = audit_transcript(run.transcript, ctx)
    result = ExperimentResult(cfg, run, risk_report(cfg.privacy_params()), report)
    if write and cfg.out_dir:
        write_artifacts(result, cfg.out_dir)
    return result


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([_format(getattr(r, f)) for f in METRIC_FIELDS])


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(
            mode=r["mode"],
            party=r["party"],
            round=int(r["round"]),
            train_loss=float(r["train_loss"]),
            test_accuracy=float(r["test_accuracy"]),
            messages_sent=int(r["messages_sent"]),
            bytes_sent=int(r["bytes_sent"]),
        )
        for r in rows
    ]


def write_artifacts(result: ExperimentResult, out_dir) -> None:
    cfg = result.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    write_metrics_csv(result.metrics, out / "metrics.csv")
    result.run.transcript.write(out / "transcript.ndjson")
    checkpoint.save(out / "checkpoint.bin", result.run.final_params())
    mcfg = result.run.models[0].config
    ledger = build_ledger(
        mcfg,
        result.run.models[0].shard_map,
        result.run.trace,
        result.run.session_owner,
        result.run.session_round,
        cfg.batch_size,
        [m.party for m in result.run.models],
    )
    write_ledger(ledger, out / "ledger.csv")
    (out / "risk.json").write_text(json.dumps(result.risk.to_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if result.audit is not None:
        (out / "audit.json").write_text(json.dumps(audit_record(result.audit), indent=2) + "\n", encoding="utf-8")


def audit_record(report: AuditReport) -> dict:
    return {
        "records": report.records,
        "violations": [{"record": i, "problems": p} for i, p in report.violations],
        "hits": [dict(dataclasses.asdict(h), z=h.z) for h in report.hits],
    }


def audit_run_dir(path) -> AuditReport:
    """Re-audit a run directory written by :func:`run_experiment`."""
    out = Path(path)
    cfg = load_config(out / "config.txt")
    datasets, _ = synth_dataset(cfg.dataset_spec(), cfg.n, cfg.seed)
    params = initial_params(cfg) + checkpoint.load(out / "checkpoint.bin")
    return audit_transcript(Transcript.read(out / "transcript.ndjson"), audit_context(cfg, datasets, params))


# --- sweeps -----------------------------------------------------------------


@dataclass
class SweepRow:
    axis: str
    value: int
    mode: str
    seeds: int
    best_accuracy: float
    best_accuracy_std: float
    final_accuracy: float
    final_accuracy_std: float
    rounds_to_best: float


def sweep_config(base: ExperimentConfig, axis: str, value: int) -> ExperimentConfig:
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}")
    if axis == "n_parties":
        if value < 1 or base.m % value:
            raise ConfigError(f"party count {value} must divide m={base.m}")
        return dataclasses.replace(base, n=value)
    if not 0 <= value <= base.n_expert_layers:
        raise ConfigError(f"n_s={value} outside [0, {base.n_expert_layers}]")
    if axis == "n_s_first":
        return dataclasses.replace(base, skip_first_ns=value, skip_last_ns=0)
    if axis == "n_s_last":
        return dataclasses.replace(base, skip_first_ns=0, skip_last_ns=value)
    if value % 2:
        raise ConfigError(f"n_s_both needs an even split, got {value}")
    return dataclasses.replace(base, skip_first_ns=value // 2, skip_last_ns=value // 2)


def ablation_sweep(
    base: ExperimentConfig,
    axis: str,
    values: list[int],
    seeds: list[int],
    modes: tuple[str, ...] | None = None,
) -> tuple[list[SweepRow], dict[tuple[int, str, int], ExperimentResult]]:
    """Run every (value, mode, seed) and summarize per (value, mode).

    Skip-count axes default to the collaborative mode only; the party-count
    axis runs all three modes.
    """
    if modes is None:
        modes = MODES if axis == "n_parties" else ("pcmoe",)
    configs = [sweep_config(base, axis, v) for v in values]  # validate before running
    rows, runs = [], {}
    for value, cfg in zip(values, configs):
        for mode in modes:
            curves = []
            for seed in seeds:
                res = run_experiment(dataclasses.replace(cfg, mode=mode, seed=seed, out_dir=None), write=False)
                runs[(value, mode, seed)] = res
                curves.append(round_accuracy(res.metrics))
            best = [max(c) for c in curves]
            final = [c[-1] for c in curves]
            rows.append(
                SweepRow(
                    axis=axis,
                    value=value,
                    mode=mode,
                    seeds=len(seeds),
                    best_accuracy=float(np.mean(best)),
                    best_accuracy_std=float(np.std(best)),
                    final_accuracy=float(np.mean(final)),
                    final_accuracy_std=float(np.std(final)),
                    rounds_to_best=float(np.mean([rounds_to_best(c) for c in curves])),
                )
            )
    return rows, runs


def write_sweep_table(rows: list[SweepRow], path) -> None:
    names = [f.name for f in fields(SweepRow)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_format(getattr(r, f)) for f in names])


# --- outputs ----------------------------------------------------------------


def plot_accuracy(series: dict[str, list[list[float]]], title: str):
    """Mean accuracy per round for each mode, with a one-std band across seeds."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, curves in series.items():
        arr = np.array(curves, dtype=float)
        x = np.arange(1, arr.shape[1] + 1)
        mean, std = arr.mean(axis=0), arr.std(axis=0)
        ax.plot(x, mean, label=mode)
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    return fig


def emit_outputs(runs: dict[tuple[str, int], list[MetricsRecord]], out_dir, task: str = "synthetic") -> list[Path]:
    """Write one CSV per (mode, seed) run plus one accuracy plot for the task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    paths = []
    series: dict[str, list[list[float]]] = {}
    for (mode, seed), records in sorted(runs.items()):
        path = out / f"metrics_{task}_{mode}_seed{seed}.csv"
        write_metrics_csv(records, path)
        paths.append(path)
        series.setdefault(mode, []).append(round_accuracy(records))
    fig = plot_accuracy(series, task)
    plot_path = out / f"accuracy_{task}.png"
    fig.savefig(plot_path, dpi=100)
    import matplotlib.pyplot as plt

    plt.close(fig)
    paths.append(plot_path)
    return paths


def mean_final_accuracy(metrics: list[MetricsRecord]) -> float:
    accs = round_accuracy(metrics)
    return accs[-1] if accs else math.nan
