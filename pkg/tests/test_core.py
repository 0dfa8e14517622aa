import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pruned_rnnt.core import (
    NEG_INF,
    BatchItem,
    DomainError,
    LatticeLogProbs,
    ShapeError,
    TargetSequence,
    log_add,
    log_softmax,
    logsumexp,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestLogAdd:
    def test_symmetric(self):
        assert log_add(0.0, 0.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_neg_inf_identity(self):
        assert log_add(NEG_INF, -1.5) == -1.5
        assert log_add(-1.5, NEG_INF) == -1.5
        assert log_add(NEG_INF, NEG_INF) == NEG_INF

    def test_large_arguments(self):
        # 1000 + log(1 + e^-1), evaluated with mpmath at 40 digits
        assert log_add(1000.0, 999.0) == pytest.approx(1000.313261687518222834, abs=1e-12)
        assert math.isfinite(log_add(1e300, 1e300))

    def test_nan_propagates(self):
        assert math.isnan(log_add(float("nan"), 0.0))
        assert math.isnan(log_add(0.0, float("nan")))
        assert math.isnan(log_add(float("nan"), NEG_INF))

    @given(finite, finite)
    def test_commutative(self, x, y):
        assert abs(log_add(x, y) - log_add(y, x)) <= 1e-12

    @given(finite, finite, finite)
    def test_associative(self, x, y, z):
        assert abs(log_add(log_add(x, y), z) - log_add(x, log_add(y, z))) <= 1e-12

    @given(finite)
    def test_neg_inf_is_exact_identity(self, x):
        assert log_add(x, NEG_INF) == x

    @given(finite, finite)
    def test_matches_numpy(self, x, y):
        assert log_add(x, y) == pytest.approx(np.logaddexp(x, y), abs=1e-12)


def test_logsumexp_handles_all_neg_inf_rows():
    x = np.array([[NEG_INF, NEG_INF], [0.0, 0.0]])
    out = logsumexp(x, axis=1)
    assert out[0] == NEG_INF
    assert out[1] == pytest.approx(math.log(2))


def test_log_softmax_rows_normalize(rng):
    x = rng.normal(size=(4, 7)) + 300
    assert np.allclose(np.exp(log_softmax(x)).sum(axis=1), 1.0, atol=1e-14)


class TestTargetSequence:
    def test_basic(self):
        tgt = TargetSequence([1, 2, 3], 4)
        assert tgt.U == 3 and tgt.tokens == (1, 2, 3)

    def test_empty_target(self):
        assert TargetSequence([], 2).U == 0

    @pytest.mark.parametrize("tokens", [[0], [1, 4], [-1]])
    def test_rejects_blank_and_out_of_vocab(self, tokens):
        with pytest.raises(DomainError):
            TargetSequence(tokens, 4)


def test_batch_item_needs_frames():
    with pytest.raises(DomainError):
        BatchItem(0, TargetSequence([], 3))


def test_lattice_shape_checks():
    with pytest.raises(ShapeError):
        LatticeLogProbs(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(DomainError):
        LatticeLogProbs(np.zeros((0, 3)), np.zeros((0, 3)))
