"""Structural leakage audit of a training transcript.

Checks that every payload crossing a party boundary is activation-shaped,
that no payload is byte-identical to a raw input, a label encoding or a
parameter block, and summarizes how many experts each party observes.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .protocol import Transcript, TranscriptRecord, payload_hash
from .transport import Variant

_REQUESTS = {Variant.EXPERT_FORWARD_REQUEST.name, Variant.EXPERT_BACKWARD_GRAD.name}
_REPLIES = {Variant.EXPERT_FORWARD_RESPONSE.name, Variant.BACKWARD_ACK.name}


@dataclass
class AuditContext:
    d_model: int
    n: int
    m: int
    k: int
    shared_layers: tuple[bool, ...]
    tokens_per_step: int
    forbidden: dict[str, str] = field(default_factory=dict)  # hash -> description


def _as_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim <= 1 else a.reshape(a.shape[0], -1)


def forbidden_hashes(
    datasets: list[Dataset], n_classes: int, param_sets: list[dict[str, np.ndarray]]
) -> dict[str, str]:
    """Hashes of every raw input row, label encoding and parameter block (and row)."""
    out: dict[str, str] = {}

    def add(arr: np.ndarray, what: str) -> None:
        out.setdefault(payload_hash(_as_rows(arr)), what)

    for i, d in enumerate(datasets):
        add(d.tokens, f"party {i} inputs")
        add(d.labels, f"party {i} labels")
        onehot = np.eye(n_classes)[d.labels]
        add(onehot, f"party {i} one-hot labels")
        for r in range(len(d)):
            add(d.tokens[r], f"party {i} input row {r}")
            add(onehot[r], f"party {i} one-hot label {r}")
    for j, params in enumerate(param_sets):
        for name, value in params.items():
            add(value, f"parameter set {j} {name}")
            if value.ndim == 2:
                for r in range(value.shape[0]):
                    add(value[r], f"parameter set {j} {name} row {r}")
    return out


@dataclass
class LayerHits:
    layer: int
    observations: int
    mean: float
    expected: float
    sigma: float

    @property
    def z(self) -> float:
        return (self.mean - self.expected) / self.sigma if self.sigma > 0 else 0.0


@dataclass
class AuditReport:
    records: int
    violations: list[tuple[int, list[str]]]
    hits: list[LayerHits]

    @property
    def ok(self) -> bool:
        return not self.violations


def _record_problems(i: int, rec: TranscriptRecord, ctx: AuditContext) -> list[str]:
    problems = []
    if rec.variant not in Variant.__members__:
        return [f"unknown variant {rec.variant}"]
    if rec.sender == rec.receiver:
        problems.append("message to self")
    if not Variant[rec.variant].has_payload:
        if rec.tokens or rec.dim or rec.payload_bytes:
            problems.append("control message carries a payload")
        return problems
    if rec.dim != ctx.d_model:
        problems.append(f"payload width {rec.dim} is not activation-sized ({ctx.d_model})")
    if rec.tokens < 1 or rec.tokens > ctx.tokens_per_step:
        problems.append(f"token count {rec.tokens} outside [1, {ctx.tokens_per_step}]")
    if rec.payload_bytes != 8 * rec.tokens * rec.dim:
        problems.append("payload byte length disagrees with its shape")
    if not 0 <= rec.layer < len(ctx.shared_layers) or not ctx.shared_layers[rec.layer]:
        problems.append(f"layer {rec.layer} is not a shared expert layer")
    if not 0 <= rec.expert < ctx.m:
        problems.append(f"expert {rec.expert} out of range")
    else:
        host = rec.receiver if rec.variant in _REQUESTS else rec.sender
        if rec.expert % ctx.n != host:
            problems.append(f"expert {rec.expert} is not hosted by party {host}")
    if rec.payload_hash in ctx.forbidden:
        problems.append(f"payload equals {ctx.forbidden[rec.payload_hash]}")
    return problems


def audit_transcript(t: Transcript, ctx: AuditContext) -> AuditReport:
    """Check every record; violations are reported, never raised."""
    violations = []
    # (step, layer, observer) -> tokens received in forward requests
    observed: dict[tuple[int, int, int], int] = defaultdict(int)
    requesters: dict[int, int] = {}
    for i, rec in enumerate(t.records):
        problems = _record_problems(i, rec, ctx)
        if problems:
            violations.append((i, problems))
            continue
        if rec.variant == Variant.EXPERT_FORWARD_REQUEST.name:
            observed[(rec.step, rec.layer, rec.receiver)] += rec.tokens
            requesters[rec.step] = rec.sender
    for (step, layer, obs), tokens in observed.items():
        if tokens > ctx.k * ctx.tokens_per_step:
            violations.append((-1, [f"party {obs} saw {tokens} rows in step {step} layer {layer}, above k per token"]))
    hits = []
    p = 1.0 / ctx.n
    for layer, shared in enumerate(ctx.shared_layers):
        if not shared:
            continue
        per_token = []
        for step, owner in sorted(requesters.items()):
            for obs in range(ctx.n):
                if obs != owner:
                    per_token.append(observed.get((step, layer, obs), 0))
        count = len(per_token) * ctx.tokens_per_step
        if count == 0:
            continue
        mean = sum(per_token) / count
        sigma = math.sqrt(ctx.k * p * (1.0 - p) / count)
        hits.append(LayerHits(layer, count, mean, ctx.k * p, sigma))
    return AuditReport(len(t.records), violations, hits)
