import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rule_kit.dpo import DpoBatchItem, DpoConfig, dpo_loss, margin_loss, preference_probability
from rule_kit.errors import EmptyBatch, NonFinite, ValidationError

finite = st.floats(-1e3, 1e3, allow_nan=False)


def item_with_margin(m):
    return DpoBatchItem(m, 0.0, 0.0, 0.0)


class TestPreferenceProbability:
    def test_equal(self):
        assert preference_probability(1.3, 1.3) == 0.5

    def test_unit_gap(self):
        assert preference_probability(1.0, 0.0) == pytest.approx(float(1 / (1 + mp.e ** -1)), rel=1e-15)
        assert preference_probability(1.0, 0.0) == pytest.approx(0.731059, abs=1e-6)

    def test_saturation(self):
        assert preference_probability(-1000.0, 0.0) == pytest.approx(0.0, abs=1e-300)
        assert preference_probability(1000.0, 0.0) == 1.0
        assert preference_probability(-700.0, 0.0) > 0

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            preference_probability(float("inf"), 0.0)


class TestDpoLoss:
    def test_zero_margin_is_ln2(self):
        batch = [DpoBatchItem(-3.0, -3.0, -7.5, -7.5), DpoBatchItem(-1.0, -1.0, -2.0, -2.0)]
        mean, per = dpo_loss(batch, DpoConfig(0.5))
        assert mean == pytest.approx(math.log(2), abs=1e-12)
        assert per == [math.log(2), math.log(2)]

    def test_margin_two(self):
        mean, _ = dpo_loss([item_with_margin(2.0)], DpoConfig(1.0))
        assert mean == pytest.approx(float(mp.log(1 + mp.e ** -2)), rel=1e-14)
        assert mean == pytest.approx(0.126928, abs=1e-6)

    def test_asymptotics(self):
        assert margin_loss(1000.0, 1.0) == 0.0
        assert margin_loss(-1000.0, 1.0) == pytest.approx(1000.0, rel=1e-15)
        assert margin_loss(-1e6, 1.0) == pytest.approx(1e6)

    def test_margin_definition(self):
        item = DpoBatchItem(-1.0, -2.0, -5.0, -3.0)
        assert item.margin == (1.0) - (-2.0)

    def test_errors(self):
        with pytest.raises(EmptyBatch):
            dpo_loss([], DpoConfig())
        with pytest.raises(NonFinite):
            DpoBatchItem(float("nan"), 0.0, 0.0, 0.0)
        with pytest.raises(ValidationError):
            DpoConfig(0.0)
        with pytest.raises(NonFinite):
            margin_loss(1e308, 1e10)

    @given(finite, finite, finite, finite, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 10))
    def test_shift_invariance(self, pw, rw, pl, rl, cw, cl, beta):
        base = margin_loss(DpoBatchItem(pw, rw, pl, rl).margin, beta)
        shifted = margin_loss(DpoBatchItem(pw + cw, rw + cw, pl + cl, rl + cl).margin, beta)
        assert shifted == pytest.approx(base, abs=1e-9)

    @given(st.floats(-500, 500), st.floats(1e-3, 1e3), st.floats(1e-3, 10))
    def test_strictly_decreasing(self, m, gap, beta):
        m2 = m + gap
        lo, hi = margin_loss(m2, beta), margin_loss(m, beta)
        assert lo <= hi
        if beta * m < 30:
            assert lo < hi

    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
    def test_beta_scaling(self, m, beta):
        assert margin_loss(m, beta) == margin_loss(beta * m, 1.0)

    def test_kbpt_reference_is_same_computation(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(-20, 5, size=(50, 4))
        batch = [DpoBatchItem(*v) for v in vals]
        assert dpo_loss(batch, DpoConfig(0.1)) == dpo_loss(list(batch), DpoConfig(0.1))

    def test_mean_is_order_independent(self):
        rng = np.random.default_rng(1)
        batch = [DpoBatchItem(*v) for v in rng.normal(0, 30, size=(200, 4))]
        a, _ = dpo_loss(batch, DpoConfig(0.3))
        b, _ = dpo_loss(batch[::-1], DpoConfig(0.3))
        assert a == b
