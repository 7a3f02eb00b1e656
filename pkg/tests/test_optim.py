import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncdistill.autodiff import EngineError, Tensor
from uncdistill.optim import LrSchedule, OptimState, poly_lr, sgd_momentum_step


def scalar_param(v):
    return Tensor(np.full((1, 1, 1, 1), v, dtype=np.float64), requires_grad=True)


class TestPolyLr:
    def test_endpoints(self):
        sched = LrSchedule(lr_initial=0.01, total_iterations=100)
        assert poly_lr(sched, 0) == pytest.approx(0.01)
        assert poly_lr(sched, 100) == pytest.approx(0.0)

    def test_midpoint_closed_form(self):
        sched = LrSchedule(lr_initial=0.01, total_iterations=100, power=0.9)
        # 0.01 * 0.5^0.9 evaluated directly
        assert poly_lr(sched, 50) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-9)
        assert poly_lr(sched, 50) == pytest.approx(0.0053589, abs=1e-7)

    def test_past_end_rejected(self):
        sched = LrSchedule(lr_initial=0.01, total_iterations=10)
        with pytest.raises(EngineError):
            poly_lr(sched, 11)

    @given(st.floats(0.01, 3.0), st.integers(2, 500))
    @settings(max_examples=50, deadline=None)
    def test_strictly_decreasing(self, power, total):
        sched = LrSchedule(lr_initial=0.01, total_iterations=total, power=power)
        values = [poly_lr(sched, i) for i in range(total + 1)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSgdMomentum:
    def test_first_step_by_hand(self):
        params = {"w": scalar_param(1.0)}
        state = OptimState(momentum=0.9, weight_decay=0.0)
        grads = {"w": np.full((1, 1, 1, 1), 1.0)}
        params = sgd_momentum_step(params, grads, state, lr=0.1)
        assert state.velocity["w"].item() == pytest.approx(1.0)
        assert params["w"].item() == pytest.approx(0.9)

    def test_second_identical_step(self):
        params = {"w": scalar_param(1.0)}
        state = OptimState(momentum=0.9, weight_decay=0.0)
        grads = {"w": np.full((1, 1, 1, 1), 1.0)}
        params = sgd_momentum_step(params, grads, state, lr=0.1)
        params = sgd_momentum_step(params, grads, state, lr=0.1)
        assert state.velocity["w"].item() == pytest.approx(1.9)
        assert params["w"].item() == pytest.approx(0.71)

    def test_zero_grad_zero_decay_is_identity(self):
        params = {"w": scalar_param(1.23)}
        state = OptimState(momentum=0.9, weight_decay=0.0)
        out = sgd_momentum_step(params, {"w": np.zeros((1, 1, 1, 1))}, state, lr=0.5)
        assert out["w"].item() == pytest.approx(1.23)

    def test_weight_decay_enters_velocity(self):
        params = {"w": scalar_param(2.0)}
        state = OptimState(momentum=0.0, weight_decay=0.1)
        out = sgd_momentum_step(params, {"w": np.zeros((1, 1, 1, 1))}, state, lr=1.0)
        # v = 0 + 0 + 0.1*2 = 0.2, w = 2 - 0.2
        assert out["w"].item() == pytest.approx(1.8)

    def test_decay_mask_exempts_biases(self):
        params = {"w.b": scalar_param(2.0)}
        state = OptimState(momentum=0.0, weight_decay=0.1)
        out = sgd_momentum_step(params, {"w.b": np.zeros((1, 1, 1, 1))}, state,
                                lr=1.0, decay_mask={"w.b": False})
        assert out["w.b"].item() == pytest.approx(2.0)

    def test_shape_mismatch_rejected(self):
        params = {"w": scalar_param(1.0)}
        state = OptimState(momentum=0.9, weight_decay=0.0)
        with pytest.raises(EngineError, match="shape"):
            sgd_momentum_step(params, {"w": np.zeros((1, 1, 1, 2))}, state, lr=0.1)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_lr_zero_changes_nothing(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(1, 2, 3, 3))
        params = {"w": Tensor(w.copy(), requires_grad=True)}
        state = OptimState(momentum=0.9, weight_decay=0.0005)
        out = sgd_momentum_step(params, {"w": rng.normal(size=w.shape)}, state, lr=0.0)
        np.testing.assert_array_equal(out["w"].data, w)

    def test_coefficient_bounds(self):
        with pytest.raises(EngineError):
            OptimState(momentum=1.0, weight_decay=0.0)
        with pytest.raises(EngineError):
            OptimState(momentum=0.5, weight_decay=-0.1)
