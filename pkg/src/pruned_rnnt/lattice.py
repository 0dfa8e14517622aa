"""Exact forward-backward over the ``T x (U+1)`` transducer lattice.

Both recursions are evaluated one anti-diagonal (``t + u = const``) at a
time.  The grids are padded with a ``-inf`` border and flattened, which turns
each anti-diagonal into a strided slice with step ``U + 1`` and its two
predecessors into the same slice shifted by ``U + 2`` (one frame) or ``1``
(one token).  Each diagonal is then three vectorized ufunc calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import memory
from .core import NEG_INF, DomainError, LatticeLogProbs


@dataclass(frozen=True)
class OccupationGrads:
    """``d L_tot / d y`` and ``d L_tot / d blank``; posterior transition counts."""

    y_grad: np.ndarray
    blank_grad: np.ndarray

    def node_occupancy(self) -> np.ndarray:
        return self.y_grad + self.blank_grad


def _padded(grid: np.ndarray, row_offset: int, col_offset: int) -> np.ndarray:
    T, U1 = grid.shape
    out = memory.full((T + 1, U1 + 1), NEG_INF)
    out[row_offset : row_offset + T, col_offset : col_offset + U1] = grid
    return out


def _check(lp: LatticeLogProbs) -> None:
    if lp.T < 1:
        raise DomainError("lattice needs T >= 1 frames")


def forward_alpha(lp: LatticeLogProbs) -> tuple[np.ndarray, float]:
    """Forward log-probs ``alpha (T, U+1)`` and ``L_tot = alpha[T-1, U] + blank[T-1, U]``."""
    _check(lp)
    T, U = lp.T, lp.U
    W = U + 2
    # padded[t+1, u+1] holds node (t, u); row 0 and column 0 are the -inf border
    a = memory.full((T + 1, W), NEG_INF)
    a[1, 1] = 0.0
    b = _padded(lp.blank, 1, 1).ravel()
    y = _padded(lp.y, 1, 1).ravel()
    af = a.ravel()
    for d in range(1, T + U):
        t_lo, t_hi = max(0, d - U), min(T - 1, d)
        start = t_lo * (W - 1) + W + d + 1
        stop = t_hi * (W - 1) + W + d + 2
        cur = slice(start, stop, W - 1)
        left = slice(start - W, stop - W, W - 1)
        down = slice(start - 1, stop - 1, W - 1)
        np.logaddexp(af[left] + b[left], af[down] + y[down], out=af[cur])
    alpha = a[1:, 1:]
    total = float(alpha[T - 1, U] + lp.blank[T - 1, U])
    return alpha, total


def backward_beta(lp: LatticeLogProbs) -> tuple[np.ndarray, float]:
    """Backward log-probs; ``beta[t, u]`` includes the terminal blank.  Returns ``(beta, beta[0, 0])``."""
    _check(lp)
    T, U = lp.T, lp.U
    W = U + 2
    # padded[t, u] holds node (t, u); last row and column are the -inf border
    bt = memory.full((T + 1, W), NEG_INF)
    bt[T - 1, U] = lp.blank[T - 1, U]
    b = _padded(lp.blank, 0, 0).ravel()
    y = _padded(lp.y, 0, 0).ravel()
    bf = bt.ravel()
    for d in range(T + U - 2, -1, -1):
        t_lo, t_hi = max(0, d - U), min(T - 1, d)
        start = t_lo * (W - 1) + d
        stop = t_hi * (W - 1) + d + 1
        cur = slice(start, stop, W - 1)
        right = slice(start + W, stop + W, W - 1)
        up = slice(start + 1, stop + 1, W - 1)
        np.logaddexp(bf[right] + b[cur], bf[up] + y[cur], out=bf[cur])
    beta = bt[:T, : U + 1]
    return beta, float(beta[0, 0])


def occupation_grads(
    lp: LatticeLogProbs, alpha: np.ndarray, beta: np.ndarray
) -> OccupationGrads:
    T, U = lp.T, lp.U
    if alpha.shape != (T, U + 1) or beta.shape != (T, U + 1):
        raise DomainError(
            f"alpha {alpha.shape} / beta {beta.shape} do not match lattice {(T, U + 1)}"
        )
    total = alpha[T - 1, U] + lp.blank[T - 1, U]
    if total == NEG_INF:
        raise DomainError("no path has nonzero probability")

    y_grad = memory.zeros((T, U + 1))
    y_grad[:, :U] = alpha[:, :U] + lp.y[:, :U] + beta[:, 1:] - total
    np.exp(y_grad[:, :U], out=y_grad[:, :U])

    blank_grad = memory.zeros((T, U + 1))
    blank_grad[:-1] = alpha[:-1] + lp.blank[:-1] + beta[1:] - total
    np.exp(blank_grad[:-1], out=blank_grad[:-1])
    blank_grad[T - 1, U] = np.exp(alpha[T - 1, U] + lp.blank[T - 1, U] - total)

    np.clip(y_grad, 0.0, 1.0, out=y_grad)
    np.clip(blank_grad, 0.0, 1.0, out=blank_grad)
    return OccupationGrads(y_grad=y_grad, blank_grad=blank_grad)


def forward_backward(lp: LatticeLogProbs) -> tuple[float, OccupationGrads]:
    """Total log-prob and occupation counts in one call."""
    alpha, total = forward_alpha(lp)
    beta, _ = backward_beta(lp)
    return total, occupation_grads(lp, alpha, beta)
