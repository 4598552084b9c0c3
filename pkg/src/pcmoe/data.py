"""Synthetic non-IID token-sequence classification data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError
from .numerics import Prng, derive_seed

_TAG_PARTY_DATA, _TAG_TEST, _TAG_STREAM, _TAG_CLASSES = 11, 12, 13, 14


@dataclass(frozen=True)
class DatasetSpec:
    examples_per_party: int = 64
    n_classes: int = 4
    vocab: int = 32
    seq_len: int = 8
    skew: float = 0.8
    signal: float = 0.5
    test_size: int = 256


@dataclass
class Dataset:
    tokens: np.ndarray  # [N, seq_len] int64
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def home_classes(party: int, n: int, n_classes: int) -> list[int]:
    """Classes a party over-samples: ``c mod n == party`` (or ``party mod C`` when n > C)."""
    if n <= n_classes:
        return [c for c in range(n_classes) if c % n == party]
    return [party % n_classes]


def class_mixture(party: int, n: int, spec: DatasetSpec) -> list[float]:
    homes = home_classes(party, n, spec.n_classes)
    base = (1.0 - spec.skew) / spec.n_classes
    return [base + (spec.skew / len(homes) if c in homes else 0.0) for c in range(spec.n_classes)]


def _class_tokens(spec: DatasetSpec, seed: int) -> list[list[int]]:
    """Disjoint signature-token sets, one per class, from a seeded vocabulary shuffle."""
    perm = Prng(derive_seed(seed, _TAG_CLASSES)).permutation(spec.vocab)
    per = spec.vocab // spec.n_classes
    return [perm[c * per : (c + 1) * per] for c in range(spec.n_classes)]


def _draw(rng: Prng, weights: list[float]) -> int:
    u = rng.uniform()
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1


def _sample(rng: Prng, count: int, mixture: list[float], signatures: list[list[int]], spec: DatasetSpec) -> Dataset:
    tokens = np.zeros((count, spec.seq_len), dtype=np.int64)
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        c = _draw(rng, mixture)
        labels[i] = c
        sig = signatures[c]
        for s in range(spec.seq_len):
            if rng.uniform() < spec.signal:
                tokens[i, s] = sig[rng.below(len(sig))]
            else:
                tokens[i, s] = rng.below(spec.vocab)
    return Dataset(tokens, labels)


def synth_dataset(spec: DatasetSpec, n: int, seed: int) -> tuple[list[Dataset], Dataset]:
    """Per-party training sets and a shared test set drawn from the global mixture.

    Each example's class comes from the party's mixture: ``skew=0`` is IID,
    ``skew=1`` restricts a party to its home classes. Tokens are drawn from
    the class's signature set with probability ``signal``, else uniformly.
    """
    if spec.n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if spec.vocab < spec.n_classes:
        raise ConfigError("vocab must be at least n_classes")
    if not 0.0 <= spec.skew <= 1.0 or not 0.0 <= spec.signal <= 1.0:
        raise ConfigError("skew and signal must lie in [0, 1]")
    if n < 1 or spec.examples_per_party < 1 or spec.seq_len < 1:
        raise ConfigError("degenerate dataset spec")
    signatures = _class_tokens(spec, seed)
    parties = [
        _sample(Prng(derive_seed(seed, _TAG_PARTY_DATA, i)), spec.examples_per_party, class_mixture(i, n, spec), signatures, spec)
        for i in range(n)
    ]
    mixtures = [class_mixture(i, n, spec) for i in range(n)]
    global_mix = [sum(mx[c] for mx in mixtures) / n for c in range(spec.n_classes)]
    test = _sample(Prng(derive_seed(seed, _TAG_TEST)), spec.test_size, global_mix, signatures, spec)
    return parties, test


def pooled(datasets: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([d.tokens for d in datasets]), np.concatenate([d.labels for d in datasets]))


class BatchStream:
    """Endless minibatches; reshuffles (seeded) at every pass over the data."""

    def __init__(self, data: Dataset, batch_size: int, seed: int, stream: int) -> None:
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.data = data
        self.batch_size = batch_size
        self.rng = Prng(derive_seed(seed, _TAG_STREAM, stream))
        self._order: list[int] = []

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        idx = []
        while len(idx) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.data))
            idx.append(self._order.pop(0))
        sel = np.array(idx)
        return self.data.tokens[sel], self.data.labels[sel]
