"""The linear ("trivial") joiner and its smoothed variants.

The trivial joiner adds an encoder term and a decoder term and normalizes::

    L(t, u, v) = l_enc[t, v] + l_dec[u, v] - N[t, u]
    N[t, u]    = log sum_v exp(l_enc[t, v] + l_dec[u, v])

``N`` is a log-space matrix product, so it is computed as an ordinary
``(T, V) @ (V, U+1)`` product of row-max-shifted exponentials.  Nothing in
this module allocates a ``(T, U+1, V)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import memory
from .core import (
    BLANK,
    NEG_INF,
    ConfigError,
    DomainError,
    LatticeLogProbs,
    ShapeError,
    TargetSequence,
    as_f64,
    logsumexp,
    log_softmax,
)

# matrix-product sums below this are recomputed directly to avoid subnormal loss
_UNDERFLOW_GUARD = 1e-280


@dataclass(frozen=True)
class EmbeddingInputs:
    encoder_embed: np.ndarray  # (T, E)
    decoder_embed: np.ndarray  # (U+1, D)
    encoder_proj: np.ndarray  # (E, V)
    decoder_proj: np.ndarray  # (D, V)


@dataclass(frozen=True)
class JoinerLogits:
    """Un-normalized trivial-joiner log-probs ``l_enc (T, V)`` and ``l_dec (U+1, V)``."""

    l_enc: np.ndarray
    l_dec: np.ndarray

    def __post_init__(self):
        l_enc = as_f64(self.l_enc, "l_enc")
        l_dec = as_f64(self.l_dec, "l_dec")
        if l_enc.ndim != 2 or l_dec.ndim != 2:
            raise ShapeError(f"l_enc and l_dec must be 2-D, got {l_enc.shape} and {l_dec.shape}")
        if l_enc.shape[1] != l_dec.shape[1]:
            raise ShapeError(
                f"vocab axis mismatch: l_enc has V={l_enc.shape[1]}, l_dec has V={l_dec.shape[1]}"
            )
        if not (np.isfinite(l_enc).all() and np.isfinite(l_dec).all()):
            raise DomainError("joiner logits must be finite")
        object.__setattr__(self, "l_enc", l_enc)
        object.__setattr__(self, "l_dec", l_dec)

    @property
    def T(self) -> int:
        return self.l_enc.shape[0]

    @property
    def V(self) -> int:
        return self.l_enc.shape[1]


@dataclass(frozen=True)
class SmoothingConfig:
    alpha_lm: float = 0.0
    alpha_acoustic: float = 0.0

    def __post_init__(self):
        for name in ("alpha_lm", "alpha_acoustic"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {val}")
        if self.alpha_lm + self.alpha_acoustic > 1.0 + 1e-12:
            raise ConfigError(
                f"alpha_lm + alpha_acoustic = {self.alpha_lm + self.alpha_acoustic} exceeds 1"
            )

    @property
    def alpha_trivial(self) -> float:
        return 1.0 - self.alpha_lm - self.alpha_acoustic

    @property
    def is_plain(self) -> bool:
        return self.alpha_lm == 0.0 and self.alpha_acoustic == 0.0


def project_embeddings(inputs: EmbeddingInputs) -> JoinerLogits:
    enc = as_f64(inputs.encoder_embed, "encoder_embed")
    dec = as_f64(inputs.decoder_embed, "decoder_embed")
    enc_proj = as_f64(inputs.encoder_proj, "encoder_proj")
    dec_proj = as_f64(inputs.decoder_proj, "decoder_proj")
    if enc.ndim != 2 or dec.ndim != 2 or enc_proj.ndim != 2 or dec_proj.ndim != 2:
        raise ShapeError("embeddings and projections must all be 2-D")
    if enc.shape[1] != enc_proj.shape[0]:
        raise ShapeError(
            f"encoder axis E mismatch: encoder_embed has E={enc.shape[1]}, "
            f"encoder_proj has E={enc_proj.shape[0]}"
        )
    if dec.shape[1] != dec_proj.shape[0]:
        raise ShapeError(
            f"decoder axis D mismatch: decoder_embed has D={dec.shape[1]}, "
            f"decoder_proj has D={dec_proj.shape[0]}"
        )
    if enc_proj.shape[1] != dec_proj.shape[1]:
        raise ShapeError(
            f"vocab axis V mismatch: encoder_proj has V={enc_proj.shape[1]}, "
            f"decoder_proj has V={dec_proj.shape[1]}"
        )
    return JoinerLogits(
        l_enc=memory.track(enc @ enc_proj), l_dec=memory.track(dec @ dec_proj)
    )


def _shifted_exps(logits: JoinerLogits):
    """Row maxima and ``exp(row - max)`` factors; every factor entry is <= 1."""
    m_enc = logits.l_enc.max(axis=1)
    m_dec = logits.l_dec.max(axis=1)
    e = memory.empty(logits.l_enc.shape)
    np.subtract(logits.l_enc, m_enc[:, None], out=e)
    np.exp(e, out=e)
    d = memory.empty(logits.l_dec.shape)
    np.subtract(logits.l_dec, m_dec[:, None], out=d)
    np.exp(d, out=d)
    return m_enc, m_dec, e, d


def compute_normalizers(logits: JoinerLogits) -> np.ndarray:
    """``N[t, u] = log sum_v exp(l_enc[t, v] + l_dec[u, v])`` as a ``(T, U+1)`` grid."""
    m_enc, m_dec, e, d = _shifted_exps(logits)
    norm = memory.track(e @ d.T)
    small = norm < _UNDERFLOW_GUARD
    np.log(norm, out=norm, where=~small)
    norm += m_enc[:, None]
    norm += m_dec[None, :]
    if small.any():
        for t, u in zip(*np.nonzero(small)):
            norm[t, u] = logsumexp(logits.l_enc[t] + logits.l_dec[u])
    return norm


def _check_target(logits: JoinerLogits, target: TargetSequence) -> None:
    if logits.l_dec.shape[0] != target.U + 1:
        raise ShapeError(
            f"decoder axis U+1 mismatch: l_dec has {logits.l_dec.shape[0]} rows, "
            f"target has U={target.U}"
        )
    if target.U and max(target.tokens) >= logits.V:
        raise DomainError(f"target token {max(target.tokens)} is outside [1, {logits.V})")


def trivial_lattice_logprobs(
    logits: JoinerLogits, target: TargetSequence, normalizers: np.ndarray | None = None
) -> LatticeLogProbs:
    _check_target(logits, target)
    norm = compute_normalizers(logits) if normalizers is None else normalizers
    T, U = logits.T, target.U
    tok = target.as_array()
    y = memory.full((T, U + 1), NEG_INF)
    y[:, :U] = logits.l_enc[:, tok] + logits.l_dec[np.arange(U), tok][None, :] - norm[:, :U]
    blank = memory.empty((T, U + 1))
    np.add(logits.l_enc[:, BLANK, None], logits.l_dec[None, :, BLANK], out=blank)
    blank -= norm
    return LatticeLogProbs(y=y, blank=blank)


def decoder_prior(l_dec: np.ndarray) -> np.ndarray:
    """Unigram prior: log of the decoder softmax averaged over all ``U+1`` rows."""
    l_dec = as_f64(l_dec, "l_dec")
    return logsumexp(log_softmax(l_dec, axis=1), axis=0) - np.log(l_dec.shape[0])


def _smoothing_terms(logits: JoinerLogits):
    lm = log_softmax(logits.l_dec, axis=1)  # (U+1, V)
    prior = decoder_prior(logits.l_dec)  # (V,)
    acoustic = log_softmax(logits.l_enc + prior[None, :], axis=1)  # (T, V)
    return lm, prior, acoustic


def smoothed_lattice_logprobs(
    logits: JoinerLogits, target: TargetSequence, cfg: SmoothingConfig
) -> LatticeLogProbs:
    """Lattice of the interpolated joiner.

    The transition scores are the convex combination of three log-prob
    fields (trivial, decoder-only, encoder + unigram prior), read at the two
    tokens each node needs.  The result is not renormalized.  Terms with zero
    weight are skipped, so ``(0, 0)`` reproduces the trivial lattice bit for bit.
    """
    if not isinstance(cfg, SmoothingConfig):
        raise ConfigError("cfg must be a SmoothingConfig")
    lat = trivial_lattice_logprobs(logits, target)
    if cfg.is_plain:
        return lat
    T, U = logits.T, target.U
    tok = target.as_array()
    lm, _, acoustic = _smoothing_terms(logits)

    y = memory.zeros((T, U + 1))
    blank = memory.zeros((T, U + 1))
    a0 = cfg.alpha_trivial
    if a0 != 0.0:
        y[:, :U] += a0 * lat.y[:, :U]
        blank += a0 * lat.blank
    if cfg.alpha_lm != 0.0:
        y[:, :U] += cfg.alpha_lm * lm[np.arange(U), tok][None, :]
        blank += cfg.alpha_lm * lm[None, :, BLANK]
    if cfg.alpha_acoustic != 0.0:
        y[:, :U] += cfg.alpha_acoustic * acoustic[:, tok]
        blank += cfg.alpha_acoustic * acoustic[:, BLANK, None]
    y[:, U] = NEG_INF
    return LatticeLogProbs(y=y, blank=blank)


def _occupation_scatter(occ_y: np.ndarray, occ_b: np.ndarray, tok: np.ndarray, V: int):
    """Sum occupation counts onto the token they read, per frame and per row."""
    T, U1 = occ_b.shape
    U = U1 - 1
    by_frame = memory.zeros((T, V))
    np.add.at(by_frame, (slice(None), tok), occ_y[:, :U])
    by_frame[:, BLANK] += occ_b.sum(axis=1)
    by_row = memory.zeros((U1, V))
    by_row[np.arange(U), tok] += occ_y[:, :U].sum(axis=0)
    by_row[:, BLANK] += occ_b.sum(axis=0)
    return by_frame, by_row


def trivial_joiner_grads(
    logits: JoinerLogits,
    target: TargetSequence,
    occ_y: np.ndarray,
    occ_b: np.ndarray,
    cfg: SmoothingConfig | None = None,
    normalizers: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate lattice occupation counts to ``(d l_enc, d l_dec)``.

    ``occ_y`` and ``occ_b`` are ``d L_tot / d y`` and ``d L_tot / d blank``
    for the lattice built from ``logits`` with smoothing ``cfg``.  The
    softmax part of the trivial term is contracted with two matrix products
    over the shifted exponentials, never forming ``(T, U+1, V)``.
    """
    _check_target(logits, target)
    cfg = cfg or SmoothingConfig()
    tok = target.as_array()
    V = logits.V
    w = occ_y + occ_b
    by_frame, by_row = _occupation_scatter(occ_y, occ_b, tok, V)
    g_enc = memory.zeros(logits.l_enc.shape)
    g_dec = memory.zeros(logits.l_dec.shape)

    a0 = cfg.alpha_trivial
    if a0 != 0.0:
        norm = compute_normalizers(logits) if normalizers is None else normalizers
        m_enc, m_dec, e, d = _shifted_exps(logits)
        # w * exp(m_enc + m_dec - N) folds the per-node softmax denominator in
        scaled = memory.track(np.exp(m_enc[:, None] + m_dec[None, :] - norm))
        scaled *= w
        g_enc += a0 * (by_frame - e * (scaled @ d))
        g_dec += a0 * (by_row - d * (scaled.T @ e))

    if not cfg.is_plain:
        lm, prior, acoustic = _smoothing_terms(logits)
        if cfg.alpha_lm != 0.0:
            g_dec += cfg.alpha_lm * (by_row - w.sum(axis=0)[:, None] * np.exp(lm))
        if cfg.alpha_acoustic != 0.0:
            g_ac = by_frame - w.sum(axis=1)[:, None] * np.exp(acoustic)
            g_enc += cfg.alpha_acoustic * g_ac
            # prior(v) = log mean_u softmax(l_dec[u])[v]
            r = g_ac.sum(axis=0) * np.exp(-prior)
            sm = np.exp(lm)
            g_dec += cfg.alpha_acoustic * sm * (r[None, :] - (sm @ r)[:, None]) / sm.shape[0]
    return g_enc, g_dec
