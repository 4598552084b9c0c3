"""Command-line entry point: ``pcmoe {train,sweep,risk,audit,config}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .experiment import (
    AXES,
    ExperimentConfig,
    ablation_sweep,
    audit_record,
    audit_run_dir,
    dump_config,
    emit_outputs,
    load_config,
    round_accuracy,
    run_experiment,
    write_sweep_table,
)
from .model import ConfigError
from .privacy import DomainError, PrivacyParams, risk_report
from .protocol import CARRIERS, MODES


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("mode", "n", "epochs", "carrier") if getattr(args, k, None) is not None}
    return dataclasses.replace(cfg, **overrides)


def cmd_train(args) -> int:
    cfg = dataclasses.replace(_base_config(args), seed=args.seed, out_dir=args.out)
    result = run_experiment(cfg)
    accs = round_accuracy(result.metrics)
    print(f"mode={cfg.mode} n={cfg.n} seed={cfg.seed} rounds={len(accs)} final_accuracy={accs[-1]:.4f}")
    if result.audit is not None:
        print(f"audit: {'ok' if result.audit.ok else f'{len(result.audit.violations)} violations'}")
    if cfg.out_dir:
        print(f"artifacts written to {cfg.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    modes = tuple(args.modes.split(",")) if args.modes else None
    rows, runs = ablation_sweep(base, args.axis, args.values, args.seeds, modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_table(rows, out / f"sweep_{args.axis}.csv")
    for value in args.values:
        per_run = {(mode, seed): res.metrics for (v, mode, seed), res in runs.items() if v == value}
        emit_outputs(per_run, out, task=f"{args.axis}{value}")
    print(f"{'value':>6} {'mode':>12} {'best':>8} {'final':>8} {'rounds':>7}")
    for r in rows:
        print(f"{r.value:>6} {r.mode:>12} {r.best_accuracy:>8.4f} {r.final_accuracy:>8.4f} {r.rounds_to_best:>7.2f}")
    return 0


def cmd_risk(args) -> int:
    params = PrivacyParams(n=args.n, m=args.m if args.m else args.n, k=args.k, gamma=args.gamma, q=args.q, q_total=args.q_total)
    report = risk_report(params)
    print(report.format_table())
    print(json.dumps(report.to_record(), sort_keys=True))
    return 0


def cmd_audit(args) -> int:
    report = audit_run_dir(args.run_dir)
    record = audit_record(report)
    print(json.dumps(record, indent=2) if args.json else f"records={report.records} violations={len(report.violations)}")
    for idx, problems in report.violations:
        print(f"record {idx}: {'; '.join(problems)}", file=sys.stderr)
    return 0 if report.ok else 1


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(ExperimentConfig()))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--n", type=int, help="number of parties")
    p.add_argument("--epochs", type=int)
    p.add_argument("--carrier", choices=CARRIERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcmoe", description="Collaborative sparse-MoE training simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one configuration")
    _add_common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="output directory for artifacts")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="ablation sweep over one axis")
    _add_common(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", type=_ints, required=True)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.add_argument("--modes", help="comma-separated modes (default depends on axis)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("risk", help="analytic collusion-risk report")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, default=0, help="experts per layer (default n)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--q-total", dest="q_total", type=float, default=1.0)
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("audit", help="re-audit a run directory")
    p.add_argument("run_dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("config", help="print the default config file")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
