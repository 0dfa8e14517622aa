import math

import numpy as np
import pytest

from pruned_rnnt.core import ConfigError, DomainError, TargetSequence, log_softmax
from pruned_rnnt.lattice import forward_backward
from pruned_rnnt.oracle import (
    brute_force_pruned_loss,
    dense_lattice,
    dense_unpruned_loss_from_logits,
    finite_diff_check,
)
from pruned_rnnt.pruned_loss import (
    CombinedLossConfig,
    JoinerParams,
    PrunedLogits,
    combined_loss,
    pruned_forward_backward,
    pruned_lattice_logprobs,
    pruned_rnnt_loss,
    toy_joiner_dense,
    toy_joiner_eval,
)
from pruned_rnnt.pruning import PruningBounds, adjust_bounds, locally_optimal_bounds
from pruned_rnnt.trivial_joiner import JoinerLogits, SmoothingConfig, smoothed_lattice_logprobs

from conftest import random_instance, random_target


def gather_band(dense, bounds):
    """Banded copy of a ``(T, U+1, V)`` tensor; masked slots repeat the last row."""
    rows = np.minimum(bounds.as_array()[:, None] + np.arange(bounds.S)[None, :], bounds.U)
    return dense[np.arange(bounds.T)[:, None], rows]


def full_band(T, U):
    return PruningBounds((0,) * T, U + 1, U)


def random_pruned(rng, T, U, V, S):
    tgt = random_target(rng, U, V)
    bounds = adjust_bounds(rng.integers(0, U + 1, T), S, U)
    return PrunedLogits(rng.normal(size=(T, S, V)), bounds, tgt)


class TestToyJoiner:
    def test_zero_params(self, rng):
        params = JoinerParams.zeros(3, 4, 5, 6)
        b = full_band(3, 2)
        pl = toy_joiner_eval(rng.normal(size=(3, 3)), rng.normal(size=(3, 4)), params, b, random_target(rng, 2, 6))
        assert not pl.logits.any()

    def test_full_band_equals_dense(self, rng):
        params = JoinerParams.random(3, 4, 5, 6, rng)
        enc, dec = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))
        pl = toy_joiner_eval(enc, dec, params, full_band(4, 2), random_target(rng, 2, 6))
        assert np.allclose(pl.logits, toy_joiner_dense(enc, dec, params), atol=1e-14, rtol=0)

    def test_matches_scalar_evaluation(self, rng):
        T, U, S, E, D, H, V = 3, 2, 2, 3, 4, 5, 6
        params = JoinerParams.random(E, D, H, V, rng)
        enc, dec = rng.normal(size=(T, E)), rng.normal(size=(U + 1, D))
        bounds = PruningBounds((0, 1, 1), S, U)
        pl = toy_joiner_eval(enc, dec, params, bounds, random_target(rng, U, V))
        for t in range(T):
            for s in range(S):
                u = bounds.p[t] + s
                for v in range(V):
                    acc = params.b_out[v]
                    for h in range(H):
                        pre = params.bias[h]
                        pre += sum(params.w_enc[h, e] * enc[t, e] for e in range(E))
                        pre += sum(params.w_dec[h, d] * dec[u, d] for d in range(D))
                        acc += params.w_out[v, h] * math.tanh(pre)
                    assert pl.logits[t, s, v] == pytest.approx(acc, abs=1e-12)


class TestBandedLattice:
    def test_uniform_v2(self):
        bounds = PruningBounds((0, 1, 2), 2, 3)
        pl = PrunedLogits(np.zeros((3, 2, 2)), bounds, TargetSequence([1, 1, 1], 2))
        y, blank = pruned_lattice_logprobs(pl).to_dense()
        band = np.zeros((3, 4), dtype=bool)
        for t, p in enumerate(bounds.p):
            band[t, p : p + 2] = True
        assert np.allclose(blank[band], -math.log(2))
        assert (blank[~band] == -np.inf).all()
        assert np.allclose(y[band & (np.arange(4) < 3)], -math.log(2))
        assert (y[:, 3] == -np.inf).all() and (y[~band] == -np.inf).all()

    def test_full_band_is_dense(self, rng):
        T, U, V = 4, 3, 5
        dense = rng.normal(size=(T, U + 1, V))
        tgt = random_target(rng, U, V)
        lat = pruned_lattice_logprobs(PrunedLogits(dense, full_band(T, U), tgt))
        ref = dense_lattice(log_softmax(dense, axis=2), tgt)
        y, blank = lat.to_dense()
        assert np.allclose(y, ref.y, atol=1e-14) and np.allclose(blank, ref.blank, atol=1e-14)

    def test_in_band_entries_match_dense(self, rng):
        T, U, V, S = 6, 5, 4, 3
        dense = rng.normal(size=(T, U + 1, V))
        tgt = random_target(rng, U, V)
        bounds = adjust_bounds(rng.integers(0, U + 1, T), S, U)
        y, blank = pruned_lattice_logprobs(PrunedLogits(gather_band(dense, bounds), bounds, tgt)).to_dense()
        ref = dense_lattice(log_softmax(dense, axis=2), tgt)
        for t, p in enumerate(bounds.p):
            for u in range(p, min(p + S, U + 1)):
                assert blank[t, u] == pytest.approx(ref.blank[t, u], abs=1e-14)
                assert y[t, u] == ref.y[t, u] or abs(y[t, u] - ref.y[t, u]) <= 1e-14


class TestPrunedForwardBackward:
    def test_full_band_matches_dense(self, rng):
        for _ in range(20):
            T, U, V, tgt = random_instance(rng)
            dense = rng.normal(size=(T, U + 1, V))
            out = pruned_forward_backward(PrunedLogits(dense, full_band(T, U), tgt))
            ref = dense_unpruned_loss_from_logits(dense, tgt)
            assert abs(out.total_log_prob - ref.total_log_prob) <= 1e-10
            assert np.abs(out.grad - ref.grad).max() <= 1e-10

    def test_infeasible_bounds_rejected(self, rng):
        pl = PrunedLogits(rng.normal(size=(2, 1, 3)), PruningBounds((0, 1), 1, 1), TargetSequence([1], 3))
        with pytest.raises(DomainError):
            pruned_forward_backward(pl)

    def test_matches_restricted_enumeration(self, rng):
        for _ in range(40):
            T, U, V, tgt = random_instance(rng)
            if U > T:
                continue
            bounds = adjust_bounds(rng.integers(0, U + 1, T), 2, U)
            logits = rng.normal(size=(T, 2, V))
            out = pruned_forward_backward(PrunedLogits(logits, bounds, tgt))
            assert abs(out.total_log_prob - brute_force_pruned_loss(logits, bounds, tgt)) <= 1e-9

    @pytest.mark.parametrize("shape", [(3, 2, 2, 4), (5, 4, 3, 5), (6, 3, 2, 3)])
    def test_finite_differences(self, rng, shape):
        T, U, S, V = shape
        pl = random_pruned(rng, T, U, V, S)
        out = pruned_forward_backward(pl)
        report = finite_diff_check(
            lambda x: pruned_forward_backward(PrunedLogits(x, pl.bounds, pl.target)).total_log_prob,
            pl.logits,
            out.grad,
        )
        assert report.passed, str(report)

    def test_slot_gradients_sum_to_zero(self, rng):
        pl = random_pruned(rng, 8, 6, 7, 3)
        g = pruned_forward_backward(pl).grad
        assert np.abs(g.sum(axis=2)).max() <= 1e-10

    def test_masked_slots_have_zero_gradient(self, rng):
        # only a band wider than U + 1 rows reaches past the last row
        pl = random_pruned(rng, 6, 1, 4, 4)
        g = pruned_forward_backward(pl).grad
        masked = pl.rows() > pl.target.U
        assert masked.any()
        assert (g[masked] == 0).all()

    def test_pruning_loses_mass(self, rng):
        for _ in range(30):
            T, U = int(rng.integers(2, 9)), int(rng.integers(1, 8))
            S = int(rng.integers(1, U + 2))
            if U > T * (S - 1):
                continue
            V = 5
            dense = rng.normal(size=(T, U + 1, V))
            tgt = random_target(rng, U, V)
            bounds = adjust_bounds(rng.integers(0, U + 1, T), S, U)
            pruned = pruned_forward_backward(PrunedLogits(gather_band(dense, bounds), bounds, tgt))
            assert pruned.total_log_prob <= dense_unpruned_loss_from_logits(dense, tgt).total_log_prob + 1e-10

    def test_nested_bands_are_monotone(self, rng):
        checked = 0
        for _ in range(20):
            T, U, V = 10, 6, 5
            dense = rng.normal(size=(T, U + 1, V))
            tgt = random_target(rng, U, V)
            _, occ = forward_backward(dense_lattice(log_softmax(dense, axis=2), tgt))
            prev = None
            for S in range(2, U + 2):
                b = adjust_bounds(locally_optimal_bounds(occ, S), S, U)
                total = pruned_forward_backward(PrunedLogits(gather_band(dense, b), b, tgt)).total_log_prob
                if prev is not None:
                    pb, ptotal = prev
                    nested = all(q <= p and p + pb.S <= q + S for p, q in zip(pb.p, b.p))
                    if nested:
                        assert total >= ptotal - 1e-10
                        checked += 1
                prev = (b, total)
            assert total == pytest.approx(dense_unpruned_loss_from_logits(dense, tgt).total_log_prob, abs=1e-10)
        assert checked > 0


def make_case(rng, T=6, U=4, V=5, S=3):
    logits = JoinerLogits(rng.normal(size=(T, V)), rng.normal(size=(U + 1, V)))
    tgt = random_target(rng, U, V)
    _, occ = forward_backward(smoothed_lattice_logprobs(logits, tgt, SmoothingConfig()))
    bounds = adjust_bounds(locally_optimal_bounds(occ, S), S, U)
    return logits, PrunedLogits(rng.normal(size=(T, S, V)), bounds, tgt)


class TestCombinedLoss:
    def test_zero_pruned_scale(self, rng):
        logits, pl = make_case(rng)
        out = combined_loss(logits, pl, CombinedLossConfig(pruned_scale=0.0))
        assert out.loss == pytest.approx(-0.5 * out.trivial_log_prob, abs=1e-14)
        assert not out.grad_pruned_logits.any()

    def test_zero_trivial_scale_full_band(self, rng):
        T, U, V = 5, 3, 4
        logits = JoinerLogits(rng.normal(size=(T, V)), rng.normal(size=(U + 1, V)))
        tgt = random_target(rng, U, V)
        dense = rng.normal(size=(T, U + 1, V))
        out = combined_loss(logits, PrunedLogits(dense, full_band(T, U), tgt), CombinedLossConfig(trivial_scale=0.0))
        assert out.loss == pytest.approx(-dense_unpruned_loss_from_logits(dense, tgt).total_log_prob, abs=1e-10)
        assert not out.grad_l_enc.any() and not out.grad_l_dec.any()

    def test_defaults_compose(self, rng):
        logits, pl = make_case(rng)
        out = combined_loss(logits, pl)
        triv, _ = forward_backward(smoothed_lattice_logprobs(logits, pl.target, SmoothingConfig()))
        pruned = pruned_forward_backward(pl)
        assert out.loss == pytest.approx(0.5 * -triv + -pruned.total_log_prob, abs=1e-12)
        assert np.allclose(out.grad_pruned_logits, -pruned.grad, atol=1e-15)

    def test_target_mismatch(self, rng):
        logits, pl = make_case(rng)
        short = JoinerLogits(logits.l_enc, logits.l_dec[:-1])
        with pytest.raises(DomainError, match="different utterances"):
            combined_loss(short, pl)

    def test_negative_scale(self):
        with pytest.raises(ConfigError):
            CombinedLossConfig(trivial_scale=-1.0)

    def test_trivial_gradient_is_loss_gradient(self, rng):
        logits, pl = make_case(rng, T=4, U=3, V=4, S=2)
        cfg = CombinedLossConfig(smoothing=SmoothingConfig(0.2, 0.1))
        out = combined_loss(logits, pl, cfg)
        T, V = logits.l_enc.shape

        def f(x):
            lg = JoinerLogits(x[: T * V].reshape(T, V), x[T * V :].reshape(-1, V))
            return combined_loss(lg, pl, cfg).loss

        x = np.concatenate([logits.l_enc.ravel(), logits.l_dec.ravel()])
        report = finite_diff_check(f, x, np.concatenate([out.grad_l_enc.ravel(), out.grad_l_dec.ravel()]))
        assert report.passed, str(report)


class TestPipeline:
    def build(self, rng, T, U, V, S, E=4, H=6):
        params = JoinerParams.random(E, E, H, V, rng)
        enc, dec = rng.normal(size=(T, E)), rng.normal(size=(U + 1, E))
        logits = JoinerLogits(rng.normal(size=(T, V)), rng.normal(size=(U + 1, V)))
        return logits, enc, dec, params, random_target(rng, U, V)

    def test_phases_and_consistency(self, rng):
        logits, enc, dec, params, tgt = self.build(rng, 12, 6, 7, 3)
        res = pruned_rnnt_loss(logits, enc, dec, params, tgt, 3)
        assert set(res.phases) == {"trivial", "bounds", "joiner", "recursion", "trivial_backward"}
        assert res.bounds.violations() == []
        pl = toy_joiner_eval(enc, dec, params, res.bounds, tgt)
        again = combined_loss(logits, pl)
        assert res.result.loss == pytest.approx(again.loss, abs=1e-12)

    def test_plain_bounds_option(self, rng):
        logits, enc, dec, params, tgt = self.build(rng, 12, 6, 7, 3)
        cfg = CombinedLossConfig(smoothing=SmoothingConfig(0.5, 0.3))
        res = pruned_rnnt_loss(logits, enc, dec, params, tgt, 3, cfg, bounds_from_smoothed=False)
        _, occ = forward_backward(smoothed_lattice_logprobs(logits, tgt, SmoothingConfig()))
        assert res.bounds == adjust_bounds(locally_optimal_bounds(occ, 3), 3, tgt.U)

    def test_recursion_peak_independent_of_u(self, rng):
        peaks = []
        for U in (20, 40):
            res = pruned_rnnt_loss(*self.build(rng, 100, U, 50, 4), 4)
            peaks.append(res.phases["recursion"].peak_delta)
        assert peaks[1] < 1.05 * peaks[0]
