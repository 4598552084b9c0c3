"""FLOP and parameter-memory ledgers per party and round.

Memory is counted in parameters, not bytes of process memory. A linear map
``in -> out`` costs ``2*in*out`` FLOPs per row forward and twice that backward.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable

from .model import ModelConfig, ShardMap
from .protocol import TraceEvent


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ParamCount:
    expert_owned: int
    nonexpert: int


def nonexpert_params(config: ModelConfig) -> int:
    d = config.d_model
    gates = config.n_expert_layers * d * config.m
    blocks = config.n_layers * (d * d + d)
    return config.vocab * d + blocks + gates + d * config.n_classes + config.n_classes


def count_params(config: ModelConfig, shard_map: ShardMap, party: int) -> ParamCount:
    """Parameters held by ``party``: its expert shard and everything else."""
    owned = sum(len(shard_map.owned(layer, party)) for layer in range(config.n_expert_layers))
    return ParamCount(owned * config.expert_param_count(), nonexpert_params(config))


def total_expert_params(config: ModelConfig) -> int:
    return config.n_expert_layers * config.m * config.expert_param_count()


def expert_flops_per_row(config: ModelConfig) -> int:
    return 2 * config.d_model * config.d_ff + 2 * config.d_ff * config.d_model


def backbone_flops_forward(config: ModelConfig, batch: int) -> int:
    """Forward FLOPs of the data owner's local layers for one batch."""
    d, rows = config.d_model, batch * config.seq_len
    flops = config.n_layers * 2 * d * d * rows
    if config.router == "learned":
        flops += config.n_expert_layers * 2 * d * config.m * rows
    return flops + 2 * d * config.n_classes * batch


def dense_expert_flops_forward(config: ModelConfig, batch: int) -> int:
    """Forward FLOPs if every expert ran on every token."""
    return config.n_expert_layers * config.m * batch * config.seq_len * expert_flops_per_row(config)


@dataclass
class Flops:
    forward: int = 0
    backward: int = 0
    expert_forward: int = 0
    expert_backward: int = 0


def flops_round(
    config: ModelConfig,
    trace: Iterable[TraceEvent],
    session_owner: dict[int, int],
    batch: int,
    sessions: Iterable[int] | None = None,
) -> dict[int, Flops]:
    """FLOPs per party for the given sessions (default: every session in ``session_owner``).

    The data owner pays for its backbone, gates and head; each expert
    execution is charged to the party that ran it.
    """
    chosen = set(session_owner if sessions is None else sessions)
    out: dict[int, Flops] = defaultdict(Flops)
    local = backbone_flops_forward(config, batch)
    for s in sorted(chosen):
        f = out[session_owner[s]]
        f.forward += local
        f.backward += 2 * local
    per_row = expert_flops_per_row(config)
    for ev in trace:
        if ev.session in chosen:
            f = out[ev.executor]
            f.expert_forward += per_row * ev.tokens
            f.expert_backward += 2 * per_row * ev.tokens
            f.forward += per_row * ev.tokens
            f.backward += 2 * per_row * ev.tokens
    return dict(out)


def relative_total_ram(ours_expert: float, isolated_expert: float, nonexpert: float) -> float:
    """``(ours + nonexpert) / (isolated + nonexpert) * 100``."""
    if min(ours_expert, isolated_expert, nonexpert) < 0:
        raise DomainError("memory figures must be nonnegative")
    denom = isolated_expert + nonexpert
    if denom == 0:
        raise DomainError("isolated + nonexpert must be positive")
    return (ours_expert + nonexpert) / denom * 100.0


def touched_fraction_by_round(
    trace: Iterable[TraceEvent],
    party: int,
    config: ModelConfig,
    n: int,
    session_round: dict[int, int],
) -> dict[int, float]:
    """Per round, the share of a party's expert memory touched per routed token.

    For every token reaching a shared expert layer (any party's data), the
    party runs ``J`` of its experts; the fraction is ``J * P_e`` over the
    ``(m/n) * P_e`` parameters a party holds per layer. Under uniform routing
    ``E[J] = k/n`` and the fraction averages ``k/m``, i.e. ``k/n`` when each
    party hosts one expert per layer. Private (skipped) layers hold all m
    experts, so the divisor there is ``m``.
    """
    shared = [config.is_shared(layer) for layer in range(config.n_expert_layers)]
    executed: dict[int, float] = defaultdict(float)
    routed: dict[int, float] = defaultdict(float)
    for ev in trace:
        if not (shared[ev.layer] or ev.executor == party):
            continue  # another party's private layer
        rnd = session_round[ev.session]
        hosted = config.m // n if shared[ev.layer] else config.m
        if ev.executor == party:
            executed[rnd] += ev.tokens / hosted
        # every routed token runs k experts
        routed[rnd] += ev.tokens / config.k
    return {r: executed[r] / routed[r] for r in sorted(routed)}


def touched_fraction(
    trace: Iterable[TraceEvent],
    party: int,
    config: ModelConfig,
    n: int,
    session_round: dict[int, int],
) -> float:
    """Mean over rounds of :func:`touched_fraction_by_round`; NaN without routed tokens."""
    per_round = touched_fraction_by_round(trace, party, config, n, session_round)
    return sum(per_round.values()) / len(per_round) if per_round else float("nan")


def resident_touched_fraction(
    trace: Iterable[TraceEvent],
    party: int,
    config: ModelConfig,
    n: int,
    session_round: dict[int, int],
) -> float:
    """Mean over rounds of (distinct experts the party ran) / (experts it holds)."""
    held = sum(config.m // n if config.is_shared(l) else config.m for l in range(config.n_expert_layers))
    used: dict[int, set] = defaultdict(set)
    for ev in trace:
        if ev.executor == party:
            used[session_round[ev.session]].add((ev.layer, ev.expert))
    rounds = sorted(set(session_round.values()))
    return sum(len(used[r]) for r in rounds) / (held * len(rounds)) if rounds and held else float("nan")


def step_param_touches(trace: Iterable[TraceEvent], session: int, config: ModelConfig) -> dict[int, int]:
    """Token-weighted expert parameters touched per serving party in one step."""
    out: dict[int, int] = defaultdict(int)
    pe = config.expert_param_count()
    for ev in trace:
        if ev.session == session:
            out[ev.executor] += ev.tokens * pe
    return dict(out)


@dataclass
class LedgerEntry:
    party: int
    round: int
    flops_forward: int
    flops_backward: int
    expert_params_resident: int
    expert_params_touched: int
    nonexpert_params: int
    grad_params: int
    optimizer_state: int


def build_ledger(
    config: ModelConfig,
    shard_map: ShardMap,
    trace: list[TraceEvent],
    session_owner: dict[int, int],
    session_round: dict[int, int],
    batch: int,
    parties: Iterable[int],
) -> list[LedgerEntry]:
    """One entry per (party, round). SGD keeps no optimizer state."""
    pe = config.expert_param_count()
    rounds = sorted(set(session_round.values()))
    by_round: dict[int, list[TraceEvent]] = defaultdict(list)
    for ev in trace:
        by_round[session_round[ev.session]].append(ev)
    entries = []
    for rnd in rounds:
        sessions = [s for s, r in session_round.items() if r == rnd and s in session_owner]
        flops = flops_round(config, by_round[rnd], session_owner, batch, sessions)
        for p in parties:
            counts = count_params(config, shard_map, p)
            touched = {(ev.layer, ev.expert) for ev in by_round[rnd] if ev.executor == p}
            f = flops.get(p, Flops())
            entries.append(
                LedgerEntry(
                    party=p,
                    round=rnd,
                    flops_forward=f.forward,
                    flops_backward=f.backward,
                    expert_params_resident=counts.expert_owned,
                    expert_params_touched=len(touched) * pe,
                    nonexpert_params=counts.nonexpert,
                    grad_params=counts.expert_owned + counts.nonexpert,
                    optimizer_state=0,
                )
            )
    return entries


LEDGER_FIELDS = [f.name for f in fields(LedgerEntry)]


def write_ledger(entries: list[LedgerEntry], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in entries:
            w.writerow(asdict(e))
