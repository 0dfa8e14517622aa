"""Slow references for testing the fast paths.

Nothing here is used by the loss pipeline itself except
:func:`dense_unpruned_loss_from_logits`, which doubles as the dense
baseline for benchmarking.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp as sp_logsumexp

from . import memory
from .core import BLANK, NEG_INF, DomainError, LatticeLogProbs, LossOutput, TargetSequence, as_f64
from .lattice import forward_backward
from .pruning import PruningBounds

ENUMERATION_BUDGET = 24


class GradCheckError(DomainError):
    pass


def check_dense_grid(grid: np.ndarray, target: TargetSequence, tol: float = 1e-10) -> np.ndarray:
    """Validate a ``(T, U+1, V)`` grid of normalized log-probs."""
    grid = as_f64(grid, "grid")
    if grid.ndim != 3 or grid.shape[1] != target.U + 1:
        raise DomainError(f"grid {grid.shape} does not match target U={target.U}")
    mass = np.exp(sp_logsumexp(grid, axis=2))
    if np.abs(mass - 1.0).max() > tol:
        raise DomainError(f"grid rows are not normalized (max deviation {np.abs(mass - 1).max():.3g})")
    return grid


def _paths(T: int, U: int):
    """Every monotone lattice path, as the sequence of moves ('v' emit / 'h' blank).

    A path is fixed by which of its ``T - 1 + U`` moves are vertical.
    """
    n = T - 1 + U
    for vert in itertools.combinations(range(n), U):
        moves = ["h"] * n
        for i in vert:
            moves[i] = "v"
        yield moves


def _path_log_probs(score: Callable[[int, int, int], float], T: int, U: int, tokens, keep=None):
    out = []
    for moves in _paths(T, U):
        t = u = 0
        lp = 0.0
        ok = keep is None or keep(0, 0)
        for mv in moves:
            if not ok:
                break
            if mv == "v":
                lp += score(t, u, tokens[u])
                u += 1
            else:
                lp += score(t, u, BLANK)
                t += 1
            ok = keep is None or keep(t, u)
        if ok:
            out.append(lp + score(T - 1, U, BLANK))
    return out


def brute_force_loss(grid: np.ndarray, target: TargetSequence) -> float:
    """Total log-prob by summing every one of the ``C(T-1+U, U)`` paths.

    Returns the log-likelihood (negate it for the loss).
    """
    grid = np.asarray(grid, dtype=np.float64)
    T, U = grid.shape[0], target.U
    if grid.shape[1] != U + 1:
        raise DomainError(f"grid {grid.shape} does not match target U={U}")
    if T + U > ENUMERATION_BUDGET:
        raise DomainError(f"refusing to enumerate paths for T + U = {T + U} > {ENUMERATION_BUDGET}")
    lps = _path_log_probs(lambda t, u, v: grid[t, u, v], T, U, target.tokens)
    return float(sp_logsumexp(lps))


def brute_force_pruned_loss(logits: np.ndarray, bounds: PruningBounds, target: TargetSequence) -> float:
    """Total log-prob over paths that never leave the band, from raw banded logits."""
    T, S, _ = logits.shape
    U = target.U
    if T + U > ENUMERATION_BUDGET:
        raise DomainError(f"refusing to enumerate paths for T + U = {T + U} > {ENUMERATION_BUDGET}")
    p = bounds.p

    def score(t, u, v):
        row = logits[t, u - p[t]]
        return float(row[v] - sp_logsumexp(row))

    lps = _path_log_probs(score, T, U, target.tokens, keep=lambda t, u: p[t] <= u < p[t] + S)
    return float(sp_logsumexp(lps)) if lps else NEG_INF


def dense_lattice(grid: np.ndarray, target: TargetSequence) -> LatticeLogProbs:
    T, U = grid.shape[0], target.U
    tok = target.as_array()
    y = memory.full((T, U + 1), NEG_INF)
    y[:, :U] = grid[:, np.arange(U), tok]
    blank = memory.track(np.ascontiguousarray(grid[:, :, BLANK]))
    return LatticeLogProbs(y=y, blank=blank)


def dense_unpruned_loss(grid: np.ndarray, target: TargetSequence) -> LossOutput:
    """Standard unpruned transducer log-likelihood on a dense log-prob grid.

    ``grad`` is ``d total / d grid`` (shape ``(T, U+1, V)``): the occupation
    count of each transition at the entry it reads, zero elsewhere.
    """
    grid = as_f64(grid, "grid")
    if grid.ndim != 3 or grid.shape[1] != target.U + 1:
        raise DomainError(f"grid {grid.shape} does not match target U={target.U}")
    T, U = grid.shape[0], target.U
    total, occ = forward_backward(dense_lattice(grid, target))
    grad = memory.zeros(grid.shape)
    grad[:, np.arange(U), target.as_array()] = occ.y_grad[:, :U]
    grad[:, :, BLANK] = occ.blank_grad
    return LossOutput(total_log_prob=total, grad=grad)


def dense_unpruned_loss_from_logits(logits: np.ndarray, target: TargetSequence) -> LossOutput:
    """Log-softmax raw ``(T, U+1, V)`` logits, then the dense loss; ``grad`` is w.r.t. the raw logits."""
    logits = as_f64(logits, "logits")
    m = logits.max(axis=2, keepdims=True)
    logp = memory.empty(logits.shape)
    np.subtract(logits, m, out=logp)
    lse = memory.track(np.log(np.exp(logp).sum(axis=2, keepdims=True)))
    logp -= lse
    out = dense_unpruned_loss(logp, target)
    # chain through log-softmax: g - softmax * sum_v g
    weight = out.grad.sum(axis=2, keepdims=True)
    np.exp(logp, out=logp)
    logp *= weight
    out.grad -= logp
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple | None
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return (
            f"finite-difference check {status}: max rel error {self.max_rel_error:.3g} "
            f"at {self.worst_index} (tol {self.tolerance:g})"
        )


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``f`` at ``x``.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    Coordinates where ``x`` is ``-inf`` (structurally absent transitions) are
    skipped; their analytic gradient must be zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    numeric = np.zeros_like(x)
    worst, worst_idx = 0.0, None
    for idx in np.ndindex(x.shape):
        if not np.isfinite(x[idx]):
            err = 0.0 if analytic[idx] == 0.0 else math.inf
        else:
            orig = x[idx]
            x[idx] = orig + step
            fp = f(x)
            x[idx] = orig - step
            fm = f(x)
            x[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"f is not finite near coordinate {idx}: {fp}, {fm}")
            numeric[idx] = (fp - fm) / (2 * step)
            a = analytic[idx]
            err = abs(a - numeric[idx]) / max(1e-8, abs(a) + abs(numeric[idx]))
        if err > worst or worst_idx is None:
            worst, worst_idx = err, idx
    return GradCheckReport(max_rel_error=worst, worst_index=worst_idx, numeric=numeric, tolerance=tolerance)
