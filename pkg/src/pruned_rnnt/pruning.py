"""Per-frame pruning bounds from occupation counts.

Frame ``t`` keeps lattice rows ``p_t <= u < p_t + S``.  The raw ``p_t``
maximizes a lower bound on retained path mass (blank occupancy inside the
window minus the vertical occupancy entering it from below); the raw
sequence is then projected onto bounds that admit a complete path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DomainError
from .lattice import OccupationGrads


def max_start(U: int, S: int) -> int:
    return max(0, U - S + 1)


@dataclass(frozen=True)
class PruningBounds:
    p: tuple[int, ...]
    S: int
    U: int

    @property
    def T(self) -> int:
        return len(self.p)

    def violations(self) -> list[str]:
        """Human-readable list of broken invariants (empty when valid)."""
        errs = []
        if self.S < 1:
            errs.append(f"S = {self.S} < 1")
            return errs
        if self.T < 1:
            errs.append("no frames")
            return errs
        top = max_start(self.U, self.S)
        p = self.p
        for t, pt in enumerate(p):
            if not 0 <= pt <= top:
                errs.append(f"p[{t}] = {pt} outside [0, {top}]")
        for t in range(self.T - 1):
            if p[t] > p[t + 1]:
                errs.append(f"p[{t}] = {p[t]} > p[{t + 1}] = {p[t + 1]}")
            if p[t + 1] - p[t] > self.S - 1:
                errs.append(f"p[{t + 1}] - p[{t}] = {p[t + 1] - p[t]} >= S = {self.S}")
        if p[0] != 0:
            errs.append(f"p[0] = {p[0]} != 0")
        if p[-1] != top:
            errs.append(f"p[{self.T - 1}] = {p[-1]} != {top}")
        return errs

    def validate(self) -> "PruningBounds":
        errs = self.violations()
        if errs:
            raise DomainError("invalid pruning bounds: " + "; ".join(errs))
        return self

    def as_array(self) -> np.ndarray:
        return np.asarray(self.p, dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(list(self.p))


def retained_mass(grads: OccupationGrads, t: int, p: int, S: int) -> float:
    """Lower bound on path mass kept at frame ``t`` by the window starting at ``p``."""
    T, U1 = grads.blank_grad.shape
    U = U1 - 1
    if S < 1:
        raise DomainError(f"S must be >= 1, got {S}")
    if not 0 <= t < T:
        raise DomainError(f"frame {t} outside [0, {T})")
    if not 0 <= p <= max_start(U, S):
        raise DomainError(f"start {p} outside [0, {max_start(U, S)}]")
    acc = 0.0
    for u in range(p, min(p + S, U1)):
        acc += float(grads.blank_grad[t, u])
    if p > 0:
        acc -= float(grads.y_grad[t, p - 1])
    return acc


def locally_optimal_bounds(grads: OccupationGrads, S: int) -> np.ndarray:
    """Argmax of :func:`retained_mass` per frame; ties go to the smallest start."""
    if S < 1:
        raise DomainError(f"S must be >= 1, got {S}")
    blank_grad, y_grad = grads.blank_grad, grads.y_grad
    T, U1 = blank_grad.shape
    n = max_start(U1 - 1, S) + 1
    # same summation order as retained_mass so ties resolve identically
    score = np.zeros((T, n))
    for k in range(min(S, U1)):
        score += blank_grad[:, k : k + n]
    score[:, 1:] -= y_grad[:, : n - 1]
    return np.argmax(score, axis=1)


def adjust_bounds(raw: Sequence[int], S: int, U: int) -> PruningBounds:
    """Project raw starts onto bounds admitting a complete path.

    First clamp each ``p_t`` into the envelope reachable from ``p_0 = 0``
    and able to reach ``p_{T-1} = U - S + 1``, then sweep forward enforcing
    ``p_{t-1} <= p_t <= p_{t-1} + S - 1``.  The sweep never leaves the
    envelope, so both endpoints are met by construction.
    """
    raw = [int(v) for v in raw]
    T = len(raw)
    if T < 1:
        raise DomainError("bounds need at least one frame")
    if S < 1:
        raise DomainError(f"S must be >= 1, got {S}")
    if U > 0 and U > T * (S - 1):
        raise DomainError(f"band width S too small for (T, U): S={S}, T={T}, U={U}")
    top = max_start(U, S)
    step = S - 1
    q = []
    for t, v in enumerate(raw):
        lo = max(0, top - (T - 1 - t) * step)
        hi = min(top, t * step)
        q.append(min(max(v, lo), hi))
    for t in range(1, T):
        q[t] = min(max(q[t], q[t - 1]), q[t - 1] + step)
    return PruningBounds(p=tuple(q), S=S, U=U)
