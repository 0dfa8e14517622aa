"""Banded full-joiner evaluation and the pruned transducer loss.

Slot ``(t, s)`` of a ``(T, S, V)`` banded tensor is lattice node
``(t, p_t + s)``.  Slots past the last row (``p_t + s > U``) are masked: they
carry ``-inf`` transitions and receive zero gradient.  Between frames, slot
``s`` at ``t`` moves horizontally to slot ``s + p_t - p_{t+1}`` at ``t + 1``;
a target outside ``[0, S)`` means the move leaves the band and is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import memory
from .core import (
    BLANK,
    NEG_INF,
    ConfigError,
    DomainError,
    LossOutput,
    ShapeError,
    TargetSequence,
    as_f64,
    log_add,
)
from .lattice import OccupationGrads, forward_backward
from .memory import PhaseStats
from .pruning import PruningBounds, adjust_bounds, locally_optimal_bounds
from .trivial_joiner import (
    JoinerLogits,
    SmoothingConfig,
    smoothed_lattice_logprobs,
    trivial_joiner_grads,
)


@dataclass(frozen=True)
class JoinerParams:
    """One-hidden-layer joiner: ``w_out @ tanh(w_enc @ x_t + w_dec @ y_u + bias) + b_out``."""

    w_enc: np.ndarray  # (H, E)
    w_dec: np.ndarray  # (H, D)
    bias: np.ndarray  # (H,)
    w_out: np.ndarray  # (V, H)
    b_out: np.ndarray  # (V,)

    @classmethod
    def random(cls, E: int, D: int, H: int, V: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(
            w_enc=rng.normal(0, scale / np.sqrt(E), (H, E)),
            w_dec=rng.normal(0, scale / np.sqrt(D), (H, D)),
            bias=rng.normal(0, 0.1, H),
            w_out=rng.normal(0, scale / np.sqrt(H), (V, H)),
            b_out=rng.normal(0, 0.1, V),
        )

    @classmethod
    def zeros(cls, E: int, D: int, H: int, V: int):
        return cls(np.zeros((H, E)), np.zeros((H, D)), np.zeros(H), np.zeros((V, H)), np.zeros(V))

    @property
    def V(self) -> int:
        return self.w_out.shape[0]


def _joiner_halves(encoder_embed, decoder_embed, params: JoinerParams):
    enc = as_f64(encoder_embed, "encoder_embed")
    dec = as_f64(decoder_embed, "decoder_embed")
    H = params.bias.shape[0]
    if params.w_enc.shape != (H, enc.shape[1]):
        raise ShapeError(f"w_enc {params.w_enc.shape} does not map E={enc.shape[1]} to H={H}")
    if params.w_dec.shape != (H, dec.shape[1]):
        raise ShapeError(f"w_dec {params.w_dec.shape} does not map D={dec.shape[1]} to H={H}")
    if params.w_out.shape[1] != H or params.b_out.shape != (params.w_out.shape[0],):
        raise ShapeError(f"w_out {params.w_out.shape} / b_out {params.b_out.shape} do not match H={H}")
    enc_h = memory.track(enc @ params.w_enc.T)
    dec_h = memory.track(dec @ params.w_dec.T + params.bias)
    return enc_h, dec_h


def _output_layer(hidden: np.ndarray, params: JoinerParams) -> np.ndarray:
    np.tanh(hidden, out=hidden)
    out = memory.empty(hidden.shape[:-1] + (params.V,))
    np.matmul(hidden, params.w_out.T, out=out)
    out += params.b_out
    return out


@dataclass(frozen=True)
class PrunedLogits:
    logits: np.ndarray  # (T, S, V), un-normalized
    bounds: PruningBounds
    target: TargetSequence

    def validate(self) -> "PrunedLogits":
        self.bounds.validate()
        T, S = self.bounds.T, self.bounds.S
        if self.logits.ndim != 3 or self.logits.shape[:2] != (T, S):
            raise ShapeError(f"logits {self.logits.shape} do not match bounds (T={T}, S={S})")
        if self.bounds.U != self.target.U:
            raise DomainError(f"bounds built for U={self.bounds.U}, target has U={self.target.U}")
        V = self.logits.shape[2]
        if self.target.U and max(self.target.tokens) >= V:
            raise DomainError(f"target token {max(self.target.tokens)} is outside [1, {V})")
        if not np.isfinite(self.logits).all():
            raise DomainError("pruned logits must be finite")
        return self

    def rows(self) -> np.ndarray:
        """Lattice row ``u`` of every slot, shape ``(T, S)``."""
        return self.bounds.as_array()[:, None] + np.arange(self.bounds.S)[None, :]


def toy_joiner_eval(
    encoder_embed, decoder_embed, params: JoinerParams, bounds: PruningBounds, target: TargetSequence
) -> PrunedLogits:
    """Evaluate the full joiner only on the ``T * S`` in-band (frame, row) pairs."""
    enc_h, dec_h = _joiner_halves(encoder_embed, decoder_embed, params)
    if enc_h.shape[0] != bounds.T:
        raise ShapeError(f"encoder has T={enc_h.shape[0]} frames, bounds have T={bounds.T}")
    if dec_h.shape[0] != target.U + 1:
        raise ShapeError(f"decoder has {dec_h.shape[0]} rows, target needs U+1={target.U + 1}")
    # masked slots read the last row; their values are never used
    rows = np.minimum(bounds.as_array()[:, None] + np.arange(bounds.S)[None, :], target.U)
    hidden = memory.empty((bounds.T, bounds.S, enc_h.shape[1]))
    np.add(enc_h[:, None, :], dec_h[rows], out=hidden)
    return PrunedLogits(_output_layer(hidden, params), bounds, target)


def toy_joiner_dense(encoder_embed, decoder_embed, params: JoinerParams) -> np.ndarray:
    """Full joiner on every (frame, row) pair: a ``(T, U+1, V)`` tensor."""
    enc_h, dec_h = _joiner_halves(encoder_embed, decoder_embed, params)
    hidden = memory.empty((enc_h.shape[0], dec_h.shape[0], enc_h.shape[1]))
    np.add(enc_h[:, None, :], dec_h[None, :, :], out=hidden)
    return _output_layer(hidden, params)


@dataclass(frozen=True)
class BandedLattice:
    y: np.ndarray  # (T, S)
    blank: np.ndarray  # (T, S)
    bounds: PruningBounds

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Scatter onto the conceptual ``(T, U+1)`` grid, ``-inf`` off-band.  For tests."""
        T, S, U = self.bounds.T, self.bounds.S, self.bounds.U
        y = np.full((T, U + 1), NEG_INF)
        blank = np.full((T, U + 1), NEG_INF)
        for t, p in enumerate(self.bounds.p):
            n = min(S, U + 1 - p)
            y[t, p : p + n] = self.y[t, :n]
            blank[t, p : p + n] = self.blank[t, :n]
        return y, blank


def _slot_exp(logits: np.ndarray):
    """Per-slot log normalizer ``(T, S)`` and un-normalized ``exp(logit - max)`` buffer."""
    m = logits.max(axis=2)
    buf = memory.empty(logits.shape)
    np.subtract(logits, m[:, :, None], out=buf)
    np.exp(buf, out=buf)
    z = buf.sum(axis=2)
    return np.log(z) + m, buf, z


def _banded_from_normalizer(pl: PrunedLogits, lse: np.ndarray) -> BandedLattice:
    T, S, U = pl.bounds.T, pl.bounds.S, pl.target.U
    rows = pl.rows()
    tok = np.append(pl.target.as_array(), BLANK)  # row U reads a dummy, masked below
    emit = np.take_along_axis(pl.logits, tok[np.minimum(rows, U)][:, :, None], axis=2)[:, :, 0]
    y = memory.track(np.where(rows < U, emit - lse, NEG_INF))
    blank = memory.track(np.where(rows <= U, pl.logits[:, :, BLANK] - lse, NEG_INF))
    return BandedLattice(y=y, blank=blank, bounds=pl.bounds)


def pruned_lattice_logprobs(pl: PrunedLogits) -> BandedLattice:
    pl.validate()
    lse, _, _ = _slot_exp(pl.logits)
    return _banded_from_normalizer(pl, lse)


def _banded_alpha(lat: BandedLattice) -> np.ndarray:
    p, S, T = lat.bounds.p, lat.bounds.S, lat.bounds.T
    y, blank = lat.y.tolist(), lat.blank.tolist()
    alpha = []
    for t in range(T):
        if t == 0:
            col = [0.0] + [NEG_INF] * (S - 1)
        else:
            prev, prev_b = alpha[t - 1], blank[t - 1]
            shift = p[t] - p[t - 1]
            col = [
                prev[s + shift] + prev_b[s + shift] if s + shift < S else NEG_INF
                for s in range(S)
            ]
        yt = y[t]
        for s in range(1, S):
            col[s] = log_add(col[s], col[s - 1] + yt[s - 1])
        alpha.append(col)
    return memory.track(np.array(alpha))


def _banded_beta(lat: BandedLattice) -> np.ndarray:
    p, S, T, U = lat.bounds.p, lat.bounds.S, lat.bounds.T, lat.bounds.U
    y, blank = lat.y.tolist(), lat.blank.tolist()
    beta = [None] * T
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            col = [NEG_INF] * S
            col[U - p[t]] = blank[t][U - p[t]]
        else:
            nxt, bt = beta[t + 1], blank[t]
            shift = p[t + 1] - p[t]
            col = [
                nxt[s - shift] + bt[s] if 0 <= s - shift < S else NEG_INF for s in range(S)
            ]
        yt = y[t]
        for s in range(S - 2, -1, -1):
            col[s] = log_add(col[s], col[s + 1] + yt[s])
        beta[t] = col
    return memory.track(np.array(beta))


def _banded_occupation(lat: BandedLattice, alpha, beta, total: float) -> OccupationGrads:
    p = lat.bounds.as_array()
    T, S, U = lat.bounds.T, lat.bounds.S, lat.bounds.U
    occ_y = memory.zeros((T, S))
    occ_y[:, :-1] = np.exp(alpha[:, :-1] + lat.y[:, :-1] + beta[:, 1:] - total)
    occ_b = memory.zeros((T, S))
    if T > 1:
        dest = np.arange(S)[None, :] - np.diff(p)[:, None]  # (T-1, S)
        inside = (dest >= 0) & (dest < S)
        nxt = np.take_along_axis(beta[1:], np.clip(dest, 0, S - 1), axis=1)
        nxt = np.where(inside, nxt, NEG_INF)
        occ_b[:-1] = np.exp(alpha[:-1] + lat.blank[:-1] + nxt - total)
    last = U - p[-1]
    occ_b[T - 1, last] = np.exp(alpha[T - 1, last] + lat.blank[T - 1, last] - total)
    np.clip(occ_y, 0.0, 1.0, out=occ_y)
    np.clip(occ_b, 0.0, 1.0, out=occ_b)
    return OccupationGrads(y_grad=occ_y, blank_grad=occ_b)


def pruned_forward_backward(pl: PrunedLogits) -> LossOutput:
    """Pruned total log-prob and its gradient w.r.t. the raw ``(T, S, V)`` logits.

    The softmax backward is fused: the exp buffer used for the normalizer is
    turned in place into the gradient, so besides the ``(T, S)`` recursion
    grids the only large allocation is the gradient itself.
    """
    pl.validate()
    lse, buf, z = _slot_exp(pl.logits)
    lat = _banded_from_normalizer(pl, lse)
    alpha = _banded_alpha(lat)
    beta = _banded_beta(lat)
    last = pl.target.U - pl.bounds.p[-1]
    total = float(alpha[-1, last] + lat.blank[-1, last])
    if total == NEG_INF:
        raise DomainError("no path has nonzero probability inside the pruning band")
    occ = _banded_occupation(lat, alpha, beta, total)

    # d/dlogit(v) = sum_k occ_k * (1[v = v_k] - softmax(v))
    weight = occ.y_grad + occ.blank_grad
    buf *= (-weight / z)[:, :, None]
    rows = pl.rows()
    ts, ss = np.nonzero(rows < pl.target.U)
    buf[ts, ss, pl.target.as_array()[rows[ts, ss]]] += occ.y_grad[ts, ss]
    buf[:, :, BLANK] += occ.blank_grad
    return LossOutput(total_log_prob=total, grad=buf)


@dataclass(frozen=True)
class CombinedLossConfig:
    trivial_scale: float = 0.5
    pruned_scale: float = 1.0
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.trivial_scale < 0 or self.pruned_scale < 0:
            raise ConfigError("loss scales must be non-negative")


@dataclass
class CombinedLoss:
    """Training loss and its gradients (of ``loss``, not of the log-probs)."""

    loss: float
    trivial_log_prob: float
    pruned_log_prob: float
    grad_l_enc: np.ndarray
    grad_l_dec: np.ndarray
    grad_pruned_logits: np.ndarray


def combined_loss(
    logits: JoinerLogits,
    pl: PrunedLogits,
    cfg: CombinedLossConfig | None = None,
    trivial: tuple[float, OccupationGrads] | None = None,
) -> CombinedLoss:
    """``loss = -(trivial_scale * L_trivial + pruned_scale * L_pruned)``.

    Args:
      logits: trivial-joiner logits for the same utterance as ``pl``.
      pl: banded full-joiner logits.
      cfg: scales and trivial-joiner smoothing.
      trivial: optional ``(L_trivial, occupation counts)`` already computed
        on the (smoothed) trivial lattice, e.g. while choosing the bounds.
    """
    cfg = cfg or CombinedLossConfig()
    target = pl.target
    if logits.l_dec.shape[0] != target.U + 1 or logits.T != pl.bounds.T:
        raise DomainError(
            f"trivial logits (T={logits.T}, U+1={logits.l_dec.shape[0]}) and pruned logits "
            f"(T={pl.bounds.T}, U={target.U}) describe different utterances"
        )
    if logits.V != pl.logits.shape[2]:
        raise DomainError(f"vocab mismatch: trivial V={logits.V}, pruned V={pl.logits.shape[2]}")
    if trivial is None:
        trivial = forward_backward(smoothed_lattice_logprobs(logits, target, cfg.smoothing))
    triv_total, occ = trivial
    g_enc, g_dec = trivial_joiner_grads(logits, target, occ.y_grad, occ.blank_grad, cfg.smoothing)
    pruned = pruned_forward_backward(pl)
    return _combine(cfg, triv_total, g_enc, g_dec, pruned)


def _combine(cfg, triv_total, g_enc, g_dec, pruned: LossOutput) -> CombinedLoss:
    loss = -cfg.trivial_scale * triv_total
    if cfg.pruned_scale != 0.0:
        loss -= cfg.pruned_scale * pruned.total_log_prob
    g_enc *= -cfg.trivial_scale
    g_dec *= -cfg.trivial_scale
    pruned.grad *= -cfg.pruned_scale
    return CombinedLoss(
        loss=float(loss),
        trivial_log_prob=triv_total,
        pruned_log_prob=pruned.total_log_prob,
        grad_l_enc=g_enc,
        grad_l_dec=g_dec,
        grad_pruned_logits=pruned.grad,
    )


@dataclass
class PipelineResult:
    result: CombinedLoss
    raw_bounds: np.ndarray
    bounds: PruningBounds
    phases: dict[str, PhaseStats]


def pruned_rnnt_loss(
    logits: JoinerLogits,
    encoder_embed,
    decoder_embed,
    params: JoinerParams,
    target: TargetSequence,
    s_range: int,
    cfg: CombinedLossConfig | None = None,
    bounds_from_smoothed: bool = True,
) -> PipelineResult:
    """End to end: trivial lattice, bounds, banded full joiner, combined loss.

    Tracked memory is recorded per phase (``trivial``, ``bounds``,
    ``joiner``, ``recursion``, ``trivial_backward``).  With
    ``bounds_from_smoothed=False`` the bounds come from the plain trivial
    lattice even when the loss uses smoothing.
    """
    cfg = cfg or CombinedLossConfig()
    tracker = memory.TRACKER
    phases = {}
    with tracker.phase("trivial") as ph:
        lattice = smoothed_lattice_logprobs(logits, target, cfg.smoothing)
        trivial = forward_backward(lattice)
        del lattice
    phases[ph.name] = ph
    with tracker.phase("bounds") as ph:
        occ = trivial[1]
        if not bounds_from_smoothed and not cfg.smoothing.is_plain:
            occ = forward_backward(smoothed_lattice_logprobs(logits, target, SmoothingConfig()))[1]
        raw = locally_optimal_bounds(occ, s_range)
        bounds = adjust_bounds(raw, s_range, target.U)
    phases[ph.name] = ph
    with tracker.phase("joiner") as ph:
        pl = toy_joiner_eval(encoder_embed, decoder_embed, params, bounds, target)
    phases[ph.name] = ph
    with tracker.phase("recursion") as ph:
        pruned = pruned_forward_backward(pl)
    phases[ph.name] = ph
    with tracker.phase("trivial_backward") as ph:
        triv_total, triv_occ = trivial
        g_enc, g_dec = trivial_joiner_grads(
            logits, target, triv_occ.y_grad, triv_occ.blank_grad, cfg.smoothing
        )
    phases[ph.name] = ph
    result = _combine(cfg, triv_total, g_enc, g_dec, pruned)
    return PipelineResult(result=result, raw_bounds=raw, bounds=bounds, phases=phases)
