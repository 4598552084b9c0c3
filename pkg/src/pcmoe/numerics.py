"""Deterministic float64 kernels with explicit forward and backward passes.

A ``Tensor`` here is simply a C-contiguous ``numpy.ndarray`` of dtype float64.
Every reduction accumulates in a fixed left-to-right order so that two
processes running the same sequence of operations on the same inputs produce
bit-identical results, regardless of how rows are batched.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

Tensor = np.ndarray

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


def tensor(data, shape: tuple[int, ...] | None = None) -> Tensor:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Prng:
    """SplitMix64 generator, algorithm id ``splitmix64-v1``.

    Update equations (all arithmetic mod 2**64)::

        state <- state + 0x9E3779B97F4A7C15
        z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
        z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
        out <- z ^ (z >> 31)

    Only integer arithmetic is involved, so streams are identical on every
    platform. Floats are derived from the top 53 bits.
    """

    ALGORITHM = "splitmix64-v1"

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        return _mix64(self.state)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError(f"below() needs n > 0, got {n}")
        threshold = ((1 << 64) - n) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def uniform_array(self, shape: tuple[int, ...], low: float, high: float) -> Tensor:
        size = int(np.prod(shape)) if shape else 1
        vals = [low + (high - low) * self.uniform() for _ in range(size)]
        return tensor(vals, shape)

    def fork(self, *keys: int) -> "Prng":
        return Prng(derive_seed(self.state, *keys))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed to get an independent stream seed."""
    s = _mix64((seed + _GOLDEN) & MASK64)
    for key in keys:
        s = _mix64(((s ^ (key & MASK64)) + _GOLDEN) & MASK64)
    return s


def _floating(x) -> Tensor:
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def _check_2d(x: Tensor, name: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product accumulated left-to-right over the inner dimension.

    Row ``i`` of the result depends only on row ``i`` of ``a``, so computing
    rows in different batches yields identical bits.
    """
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for j in range(a.shape[1]):
        out += a[:, j : j + 1] * b[j : j + 1, :]
    return out


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """``a.T @ b`` accumulated over rows of ``a`` and ``b`` in order."""
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul_tn shape mismatch: {a.shape}^T x {b.shape}")
    out = np.zeros((a.shape[1], b.shape[1]), dtype=np.result_type(a, b))
    for t in range(a.shape[0]):
        out += a[t][:, None] * b[t][None, :]
    return out


def sum_rows(x: Tensor) -> Tensor:
    _check_2d(x, "x")
    out = np.zeros(x.shape[1], dtype=x.dtype)
    for t in range(x.shape[0]):
        out += x[t]
    return out


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products, accumulated left-to-right along columns."""
    if a.shape != b.shape:
        raise DimensionError(f"row_dot shape mismatch: {a.shape} vs {b.shape}")
    prod = a * b
    out = prod[..., 0].copy()
    for j in range(1, prod.shape[-1]):
        out += prod[..., j]
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = _floating(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    total = e[..., 0].copy()
    for j in range(1, e.shape[-1]):
        total += e[..., j]
    return e / total[..., None]


def softmax_backward(p: Tensor, upstream: Tensor) -> Tensor:
    """Gradient wrt logits given softmax output ``p`` and dL/dp."""
    return p * (upstream - row_dot(p, upstream)[..., None])


def gelu(x: Tensor) -> Tensor:
    x = _floating(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_backward(x: Tensor, upstream: Tensor) -> Tensor:
    x = _floating(x)
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return upstream * local


def cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Return ``(-log softmax(logits)[label], softmax(logits) - onehot(label))``."""
    logits = _floating(logits)
    if logits.ndim != 1 or logits.size == 0:
        raise DimensionError(f"cross_entropy expects a non-empty vector, got {logits.shape}")
    if not 0 <= label < logits.size:
        raise IndexError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    total = e[0]
    for v in e[1:]:
        total += v
    loss = np.log(total) - shifted[label]
    grad = e / total
    grad[label] -= 1.0
    return loss, grad


def grad_check(
    f: Callable[[Tensor], tuple[float, Tensor]], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps a tensor to ``(value, gradient)``. The relative error of each
    coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    The differences are taken in ``x``'s dtype; passing an ``np.longdouble``
    array (to an ``f`` that preserves dtype) shrinks rounding noise in the
    numeric side so tiny gradients can be checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(_floating(x))
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise NumericError("f(x) is not finite")
    analytic = np.asarray(analytic).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp, _ = f(x.copy())
        flat[i] = orig - eps
        fm, _ = f(x.copy())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
