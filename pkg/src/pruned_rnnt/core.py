"""Shared types and log-space primitives.

Arrays are plain ``numpy.ndarray`` objects in row-major (C) order.  Every
lattice recursion runs in float64; inputs stored as float32 are promoted on
entry by :func:`as_f64`.  Negative infinity is the IEEE value, never a large
negative constant, so that it is absorbed exactly by :func:`log_add`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BLANK = 0
NEG_INF = float("-inf")


class TransducerError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TransducerError, ValueError):
    pass


class DomainError(TransducerError, ValueError):
    pass


class ConfigError(TransducerError, ValueError):
    pass


def as_f64(x, name: str = "array") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy if it already is)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if np.isnan(arr).any():
        raise DomainError(f"{name} contains NaN")
    return arr


def log_add(x: float, y: float) -> float:
    """``log(exp(x) + exp(y))`` without overflow.

    ``log_add(-inf, y) == y`` exactly; NaN inputs propagate.
    """
    if x < y:
        x, y = y, x
    if y == NEG_INF:
        return x
    # x == +inf with y == +inf would give inf - inf; never arises for log-probs
    return x + math.log1p(math.exp(y - x))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-sum-exp along ``axis``; all-``-inf`` slices give ``-inf``."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


@dataclass(frozen=True)
class TargetSequence:
    """Token ids ``y_1..y_U`` over a vocabulary of size ``vocab_size``.

    Blank is id 0 and never appears in ``tokens``.  Lattice row ``u = 0`` is
    the beginning-of-sentence state; row ``u`` has emitted ``tokens[:u]``.
    """

    tokens: tuple[int, ...]
    vocab_size: int

    def __init__(self, tokens: Sequence[int], vocab_size: int):
        tokens = tuple(int(tok) for tok in tokens)
        if vocab_size < 2:
            raise DomainError(f"vocab_size must be >= 2, got {vocab_size}")
        for i, tok in enumerate(tokens):
            if not 1 <= tok < vocab_size:
                raise DomainError(
                    f"token {i} = {tok} is outside [1, {vocab_size})"
                )
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "vocab_size", int(vocab_size))

    @property
    def U(self) -> int:
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


@dataclass(frozen=True)
class BatchItem:
    frames: int
    target: TargetSequence

    def __post_init__(self):
        if self.frames < 1:
            raise DomainError(f"an utterance needs at least one frame, got {self.frames}")


@dataclass(frozen=True)
class LatticeLogProbs:
    """Transition log-probs on the ``T x (U+1)`` lattice.

    ``y[t, u]`` is the vertical (emit ``y_{u+1}``) transition leaving node
    ``(t, u)`` and ``blank[t, u]`` the horizontal one.  ``y[:, U]`` is ``-inf``.
    """

    y: np.ndarray
    blank: np.ndarray

    def __post_init__(self):
        if self.y.ndim != 2 or self.y.shape != self.blank.shape:
            raise ShapeError(
                f"y and blank must be equal-shaped 2-D grids, got {self.y.shape} and {self.blank.shape}"
            )
        if self.y.shape[0] < 1:
            raise DomainError("lattice needs T >= 1 frames")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def U(self) -> int:
        return self.y.shape[1] - 1


@dataclass
class LossOutput:
    """Total log-probability of a target and ``d total_log_prob / d input``.

    ``grad`` has the shape of whatever input the producing function
    differentiates with respect to (raw logits or a log-prob grid).
    """

    total_log_prob: float
    grad: np.ndarray

    @property
    def loss(self) -> float:
        return -self.total_log_prob
