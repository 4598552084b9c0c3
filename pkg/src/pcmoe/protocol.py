"""Multi-party training engine.

Parties are actors that exchange only :class:`~pcmoe.transport.Message`
frames. Party 0 doubles as sequencer: it walks the turn schedule and hands
each turn to its holder with ``TurnGrant``; the holder trains ``B`` batches,
calling remote experts as needed, and answers ``TurnDone``.

Two runtimes drive the same actors:

* :class:`SerialRuntime` runs everything on the calling thread. Sending a
  request immediately lets the addressee process its inbox.
* :class:`ThreadedRuntime` gives every party its own thread, as it would
  have over real sockets.

Only one request is ever in flight, so both produce the same transcript.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .data import BatchStream, Dataset, pooled
from .model import (
    DEFAULT_LR,
    ConfigError,
    EvalService,
    ExpertHost,
    ModelConfig,
    PartyModel,
    ShardMap,
    backward_local,
    batch_loss,
    local_forward,
    predict,
    sgd_step,
    shard_experts,
)
from .numerics import Prng, derive_seed
from .transport import (
    Message,
    RecvTimeout,
    TransportError,
    Variant,
    decode_frame,
    encode_frame,
    loopback_bus,
    socket_carrier,
)

MODES = ("isolated", "centralized", "pcmoe")
CARRIERS = ("loopback", "socket")
_TAG_SCHEDULE = 21
_POLL = 0.02


class RoutingError(LookupError):
    """A party was asked to run an expert it does not own."""


class ProtocolError(RuntimeError):
    """A reply did not match its request, or a message arrived out of turn."""


class ScheduleExhausted(RuntimeError):
    pass


# --- schedule ---------------------------------------------------------------


class Schedule:
    """Turn order: ``epochs`` cycles, each a fresh uniform permutation of the parties."""

    def __init__(self, n: int, batches_per_turn: int = 1, epochs: int = 3, seed: int = 0) -> None:
        if n < 1 or batches_per_turn < 1 or epochs < 0:
            raise ConfigError("schedule needs n >= 1, B >= 1, epochs >= 0")
        self.n = n
        self.batches_per_turn = batches_per_turn
        self.epochs = epochs
        self.seed = seed
        self._rng = Prng(derive_seed(seed, _TAG_SCHEDULE))
        self._perm: list[int] = []
        self.cycle = -1
        self.turns = 0

    @property
    def exhausted(self) -> bool:
        return not self._perm and self.cycle + 1 >= self.epochs

    def next_turn(self) -> int:
        if not self._perm:
            if self.cycle + 1 >= self.epochs:
                raise ScheduleExhausted("no turns left")
            self.cycle += 1
            self._perm = self._rng.permutation(self.n)
        self.turns += 1
        return self._perm.pop(0)

    def __iter__(self):
        while not self.exhausted:
            yield self.cycle_of_next(), self.next_turn()

    def cycle_of_next(self) -> int:
        return self.cycle if self._perm else self.cycle + 1


def next_turn(sched: Schedule) -> int:
    return sched.next_turn()


# --- transcript -------------------------------------------------------------


def payload_hash(payload: np.ndarray | None) -> str:
    data = b"" if payload is None else np.ascontiguousarray(payload, dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class TranscriptRecord:
    step: int
    sender: int
    receiver: int
    variant: str
    layer: int
    expert: int
    tokens: int
    dim: int
    payload_bytes: int
    payload_hash: str

    @property
    def data_plane(self) -> bool:
        return Variant[self.variant].has_payload


class Transcript:
    """Append-only log of every cross-party message."""

    def __init__(self, records: Iterable[TranscriptRecord] = ()) -> None:
        self.records: list[TranscriptRecord] = list(records)
        self._lock = threading.Lock()
        self.frame_bytes: list[int] = []

    def record(self, sender: int, receiver: int, msg: Message, frame_len: int = 0) -> None:
        rec = TranscriptRecord(
            step=msg.session,
            sender=sender,
            receiver=receiver,
            variant=Variant(msg.variant).name,
            layer=msg.layer,
            expert=msg.expert,
            tokens=msg.tokens,
            dim=msg.dim,
            payload_bytes=8 * msg.tokens * msg.dim,
            payload_hash=payload_hash(msg.payload),
        )
        with self._lock:
            self.records.append(rec)
            self.frame_bytes.append(frame_len)

    def __len__(self) -> int:
        return len(self.records)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ndjson())

    @classmethod
    def from_ndjson(cls, text: str) -> "Transcript":
        return cls(TranscriptRecord(**json.loads(line)) for line in text.splitlines() if line.strip())

    @classmethod
    def read(cls, path) -> "Transcript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ndjson(fh.read())


# --- party actors -----------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    """One expert execution: ``executor`` ran ``expert`` on ``tokens`` rows for ``session``."""

    session: int
    executor: int
    layer: int
    expert: int
    tokens: int


class RemoteExpert:
    """ExpertService proxy that forwards calls to the owning party."""

    def __init__(self, actor: "PartyActor", owner: int) -> None:
        self.actor = actor
        self.owner = owner

    def _call(self, variant: Variant, expect: Variant, session: int, layer: int, expert: int, rows: np.ndarray) -> np.ndarray:
        reply = self.actor.rpc(self.owner, Message(variant, session, layer, expert, rows))
        if (reply.variant, reply.session, reply.layer, reply.expert) != (expect, session, layer, expert):
            raise ProtocolError(f"expected {expect.name} for ({session},{layer},{expert}), got {reply!r}")
        if reply.payload is None or reply.payload.shape != rows.shape:
            raise ProtocolError(f"reply payload shape mismatch for {reply!r}")
        return reply.payload

    def forward_expert(self, session: int, layer: int, expert: int, rows: np.ndarray) -> np.ndarray:
        return self._call(Variant.EXPERT_FORWARD_REQUEST, Variant.EXPERT_FORWARD_RESPONSE, session, layer, expert, rows)

    def backward_expert(self, session: int, layer: int, expert: int, grad_rows: np.ndarray) -> np.ndarray:
        return self._call(Variant.EXPERT_BACKWARD_GRAD, Variant.BACKWARD_ACK, session, layer, expert, grad_rows)


class PartyActor:
    """One party: its model, its data stream and its carrier endpoint."""

    def __init__(
        self, model: PartyModel, stream: BatchStream, endpoint, runtime: "Runtime", lr: float, expert_lr: float
    ) -> None:
        self.id = model.party
        self.model = model
        self.stream = stream
        self.endpoint = endpoint
        self.runtime = runtime
        self.lr = lr
        self.host = ExpertHost(model.experts, expert_lr)
        self.host.on_execute = self._on_execute
        self._remote = {j: RemoteExpert(self, j) for j in range(model.shard_map.n) if j != self.id}
        self.losses: list[tuple[int, float]] = []

    def _on_execute(self, session: int, layer: int, expert: int, tokens: int) -> None:
        self.runtime.trace.append(TraceEvent(session, self.id, layer, expert, tokens))

    def services(self, owner: int):
        return self.host if owner == self.id else self._remote[owner]

    # messaging

    def send(self, dest: int, msg: Message) -> None:
        frame = encode_frame(msg, self.model.config.d_model if Variant(msg.variant).has_payload else None)
        self.runtime.transcript.record(self.id, dest, msg, len(frame))
        self.endpoint.send(dest, frame)

    def receive(self) -> tuple[int, Message]:
        src, frame = self.endpoint.recv()
        return src, decode_frame(frame)

    def rpc(self, dest: int, msg: Message) -> Message:
        self.send(dest, msg)
        self.runtime.pump(dest)
        src, reply = self.receive()
        if src != dest:
            raise ProtocolError(f"party {self.id}: reply from {src}, expected {dest}")
        return reply

    def handle_message(self, msg: Message) -> Message:
        """Serve an expert request addressed to this party and build the reply."""
        variant = Variant(msg.variant)
        if variant not in (Variant.EXPERT_FORWARD_REQUEST, Variant.EXPERT_BACKWARD_GRAD):
            raise ProtocolError(f"party {self.id} cannot serve {variant.name}")
        smap = self.model.shard_map
        if not (
            0 <= msg.layer < len(smap.shared)
            and smap.shared[msg.layer]
            and 0 <= msg.expert < smap.m
            and smap.owner(msg.layer, msg.expert, self.id) == self.id
            and (msg.layer, msg.expert) in self.host.experts
        ):
            raise RoutingError(f"party {self.id} does not own expert {msg.expert} of layer {msg.layer}")
        if msg.dim != self.model.config.d_model:
            raise ProtocolError(f"payload width {msg.dim} != d_model")
        if variant is Variant.EXPERT_FORWARD_REQUEST:
            out = self.host.forward_expert(msg.session, msg.layer, msg.expert, msg.payload)
            return Message(Variant.EXPERT_FORWARD_RESPONSE, msg.session, msg.layer, msg.expert, out)
        dx = self.host.backward_expert(msg.session, msg.layer, msg.expert, msg.payload)
        return Message(Variant.BACKWARD_ACK, msg.session, msg.layer, msg.expert, dx)

    def dispatch(self, src: int, msg: Message) -> None:
        """React to one incoming message (expert request or turn grant)."""
        if Variant(msg.variant) is Variant.TURN_GRANT:
            self.run_turn(msg.session)
            self.send(src, Message(Variant.TURN_DONE, msg.session))
        else:
            self.send(src, self.handle_message(msg))

    # training

    def train_step(self, session: int) -> float:
        tokens, labels = self.stream.next_batch()
        logits, cache = local_forward(self.model, tokens, self.services, session)
        loss, grad = batch_loss(logits, labels)
        backward_local(self.model, cache, grad, self.services)
        sgd_step(self.model, self.lr)
        loss = float(loss)
        self.losses.append((session, loss))
        return loss

    def run_turn(self, first_session: int) -> None:
        for b in range(self.runtime.batches_per_turn):
            session = first_session + b
            self.runtime.session_owner[session] = self.id
            self.runtime.atomic_step(self, session)


# --- runtimes ---------------------------------------------------------------


class Runtime:
    def __init__(self, batches_per_turn: int) -> None:
        self.batches_per_turn = batches_per_turn
        self.actors: list[PartyActor] = []
        self.transcript = Transcript()
        self.trace: list[TraceEvent] = []
        self.session_owner: dict[int, int] = {}

    def pump(self, dest: int) -> None:
        """Give ``dest`` a chance to process its inbox (serial runtime only)."""

    def snapshot(self) -> list:
        state = []
        for a in self.actors:
            params = {k: v.copy() for k, v in a.model.named_params().items()}
            stream = (a.stream.rng.state, list(a.stream._order))
            state.append((params, stream, len(a.losses)))
        return state

    def restore(self, state: list) -> None:
        for a, (params, (rng_state, order), n_losses) in zip(self.actors, state):
            a.model.load_params(params)
            a.model.zero_grad()
            a.host.cache.clear()
            a.stream.rng.state = rng_state
            a.stream._order = order
            del a.losses[n_losses:]

    def atomic_step(self, actor: PartyActor, session: int) -> None:
        """Run one training step; on any failure every party's parameters are restored."""
        saved = self.snapshot()
        try:
            actor.train_step(session)
        except BaseException:
            self.restore(saved)
            raise

    def run(self, schedule: Schedule, on_round: Callable[[int], None] | None) -> None:
        raise NotImplementedError


class SerialRuntime(Runtime):
    """All actors on the calling thread; deterministic by construction."""

    def pump(self, dest: int) -> None:
        actor = self.actors[dest]
        src, msg = actor.receive()
        actor.dispatch(src, msg)

    def run(self, schedule: Schedule, on_round: Callable[[int], None] | None) -> None:
        seq = self.actors[0]
        session = 0
        current = 0
        for cycle, party in schedule:
            if cycle != current:
                if on_round:
                    on_round(current)
                current = cycle
            if party == 0:
                seq.run_turn(session)
            else:
                seq.send(party, Message(Variant.TURN_GRANT, session))
                self.pump(party)
                src, done = seq.receive()
                if src != party or Variant(done.variant) is not Variant.TURN_DONE or done.session != session:
                    raise ProtocolError(f"expected TurnDone({session}) from {party}, got {done!r} from {src}")
            session += self.batches_per_turn
        if on_round and schedule.epochs:
            on_round(current)


class ThreadedRuntime(Runtime):
    """One thread per party; party 0's thread also runs the sequencer."""

    def __init__(self, batches_per_turn: int) -> None:
        super().__init__(batches_per_turn)
        self._stop = threading.Event()
        self._errors: list[BaseException] = []

    def _serve(self, actor: PartyActor) -> None:
        try:
            while not self._stop.is_set():
                try:
                    src, frame = actor.endpoint.recv(timeout=_POLL)
                except RecvTimeout:
                    continue
                actor.dispatch(src, decode_frame(frame))
        except BaseException as exc:
            if not self._stop.is_set():
                self._errors.append(exc)
                self._stop.set()

    def _sequence(self, schedule: Schedule, on_round) -> None:
        seq = self.actors[0]
        try:
            session = 0
            current = 0
            for cycle, party in schedule:
                if cycle != current:
                    if on_round:
                        on_round(current)
                    current = cycle
                if party == 0:
                    seq.run_turn(session)
                else:
                    seq.send(party, Message(Variant.TURN_GRANT, session))
                    while True:
                        if self._stop.is_set():
                            return
                        try:
                            src, frame = seq.endpoint.recv(timeout=_POLL)
                        except RecvTimeout:
                            continue
                        msg = decode_frame(frame)
                        if Variant(msg.variant) is Variant.TURN_DONE:
                            if src != party or msg.session != session:
                                raise ProtocolError(f"unexpected TurnDone({msg.session}) from {src}")
                            break
                        seq.dispatch(src, msg)
                session += self.batches_per_turn
            if on_round and schedule.epochs:
                on_round(current)
        except BaseException as exc:
            self._errors.insert(0, exc)
        finally:
            self._stop.set()

    def run(self, schedule: Schedule, on_round: Callable[[int], None] | None) -> None:
        threads = [threading.Thread(target=self._sequence, args=(schedule, on_round), name="party-0")]
        threads += [threading.Thread(target=self._serve, args=(a,), name=f"party-{a.id}") for a in self.actors[1:]]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._errors:
            raise self._errors[0]


# --- run_training -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    n: int = 8
    batches_per_turn: int = 1
    epochs: int = 3
    batch_size: int = 8
    lr: float = DEFAULT_LR
    expert_lr: float | None = None
    seed: int = 0
    timeout: float = 10.0

    @property
    def lr_experts(self) -> float:
        return self.lr if self.expert_lr is None else self.expert_lr


@dataclass
class MetricsRecord:
    mode: str
    party: str
    round: int
    train_loss: float
    test_accuracy: float
    messages_sent: int
    bytes_sent: int


@dataclass
class RunResult:
    mode: str
    config: TrainConfig
    models: list[PartyModel]
    transcript: Transcript
    metrics: list[MetricsRecord]
    trace: list[TraceEvent]
    session_owner: dict[int, int]
    session_round: dict[int, int]

    def final_params(self) -> list[dict[str, np.ndarray]]:
        return [m.named_params() for m in self.models]


def isolated_config(config: ModelConfig) -> ModelConfig:
    """The same model with every expert layer private."""
    return replace(config, skip_first_ns=config.n_expert_layers, skip_last_ns=0)


def eval_services(models: list[PartyModel]) -> Callable[[int], Callable[[int], EvalService]]:
    """Per-party expert lookup for evaluation; reads experts directly, sends nothing."""
    by_owner = {m.party: EvalService(m.experts) for m in models}

    def for_party(party: int) -> Callable[[int], EvalService]:
        return lambda owner: by_owner[owner]

    return for_party


def accuracy(model: PartyModel, services, test: Dataset) -> float:
    preds = predict(model, test.tokens, services)
    return float(np.mean(preds == test.labels))


def _make_endpoints(carrier: str, n: int, timeout: float):
    if carrier == "loopback":
        return loopback_bus(n, timeout)
    if carrier == "socket":
        return socket_carrier([("127.0.0.1", 0)] * n, timeout)
    raise ConfigError(f"unknown carrier {carrier!r}")


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def run_training(
    cfg: TrainConfig,
    datasets: list[Dataset],
    mode: str = "pcmoe",
    carrier: str = "loopback",
    threaded: bool | None = None,
    test: Dataset | None = None,
    endpoints=None,
) -> RunResult:
    """Train in one of three modes and record per-round metrics.

    ``isolated`` trains one private model per party, ``centralized`` one model
    on the pooled data (``n * B`` batches per round) and ``pcmoe`` runs the
    multi-party protocol over ``carrier``. Test accuracy is NaN when no test
    set is given. ``endpoints`` overrides the carrier (used for fault injection).
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if len(datasets) != cfg.n:
        raise ConfigError(f"expected {cfg.n} datasets, got {len(datasets)}")
    cfg.model.validate(cfg.n)
    if mode == "pcmoe":
        return _run_pcmoe(cfg, datasets, carrier, threaded, test, endpoints)
    return _run_local(cfg, datasets, mode, test)


def _run_local(cfg: TrainConfig, datasets: list[Dataset], mode: str, test: Dataset | None) -> RunResult:
    if mode == "isolated":
        mcfg = isolated_config(cfg.model)
        _, models = shard_experts(mcfg, cfg.n, cfg.seed)
        streams = [BatchStream(d, cfg.batch_size, cfg.seed, i) for i, d in enumerate(datasets)]
        steps_per_round = cfg.batches_per_turn
    else:
        _, models = shard_experts(cfg.model, 1, cfg.seed)
        streams = [BatchStream(pooled(datasets), cfg.batch_size, cfg.seed, 0)]
        steps_per_round = cfg.n * cfg.batches_per_turn
    runtime = Runtime(cfg.batches_per_turn)
    actors = [PartyActor(m, s, None, runtime, cfg.lr, cfg.lr_experts) for m, s in zip(models, streams)]
    runtime.actors = actors
    metrics: list[MetricsRecord] = []
    session_round: dict[int, int] = {}
    session = 0
    for rnd in range(cfg.epochs):
        for a in actors:
            for _ in range(steps_per_round):
                runtime.session_owner[session] = a.id
                session_round[session] = rnd
                runtime.atomic_step(a, session)
                session += 1
        for a in actors:
            acc = accuracy(a.model, lambda owner, a=a: a.host, test) if test is not None else float("nan")
            losses = [l for s, l in a.losses if session_round[s] == rnd]
            party = "ALL" if mode == "centralized" else str(a.id)
            metrics.append(MetricsRecord(mode, party, rnd, _mean(losses), acc, 0, 0))
    return RunResult(mode, cfg, models, runtime.transcript, metrics, runtime.trace, runtime.session_owner, session_round)


def _run_pcmoe(cfg, datasets, carrier, threaded, test, endpoints) -> RunResult:
    if carrier not in CARRIERS:
        raise ConfigError(f"carrier must be one of {CARRIERS}, got {carrier!r}")
    if threaded is None:
        threaded = carrier == "socket"
    _, models = shard_experts(cfg.model, cfg.n, cfg.seed)
    own_endpoints = endpoints is None
    if own_endpoints:
        endpoints = _make_endpoints(carrier, cfg.n, cfg.timeout)
    runtime = (ThreadedRuntime if threaded else SerialRuntime)(cfg.batches_per_turn)
    runtime.actors = [
        PartyActor(m, BatchStream(d, cfg.batch_size, cfg.seed, i), endpoints[i], runtime, cfg.lr, cfg.lr_experts)
        for i, (m, d) in enumerate(zip(models, datasets))
    ]
    schedule = Schedule(cfg.n, cfg.batches_per_turn, cfg.epochs, cfg.seed)
    turns_per_round = cfg.n * cfg.batches_per_turn
    session_round = {s: s // turns_per_round for s in range(cfg.epochs * turns_per_round)}
    metrics: list[MetricsRecord] = []
    lookup = eval_services(models)

    def on_round(rnd: int) -> None:
        # runs on the sequencer between turns while every other party is idle
        for a in runtime.actors:
            acc = accuracy(a.model, lookup(a.id), test) if test is not None else float("nan")
            losses = [l for s, l in a.losses if session_round[s] == rnd]
            metrics.append(MetricsRecord("pcmoe", str(a.id), rnd, _mean(losses), acc, 0, 0))

    try:
        runtime.run(schedule, on_round)
    finally:
        if own_endpoints:
            for ep in endpoints:
                ep.close()
    sent: dict[tuple[int, int], list[int]] = {}
    for rec, nbytes in zip(runtime.transcript.records, runtime.transcript.frame_bytes):
        if rec.data_plane:
            slot = sent.setdefault((rec.sender, session_round[rec.step]), [0, 0])
            slot[0] += 1
            slot[1] += nbytes
    for rec in metrics:
        rec.messages_sent, rec.bytes_sent = sent.get((int(rec.party), rec.round), [0, 0])
    return RunResult("pcmoe", cfg, models, runtime.transcript, metrics, runtime.trace, runtime.session_owner, session_round)
