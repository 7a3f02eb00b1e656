import numpy as np
import pytest

from uncdistill import autodiff as ad
from uncdistill import verification
from uncdistill.autodiff import Tensor
from uncdistill.gradcheck import grad_check


def test_linear_map_is_exact():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(1, 1, 1, 5))
    x = Tensor(rng.normal(size=(1, 1, 1, 5)))
    err = grad_check(lambda ts: ad.sum_over(ad.mul(ts[0], Tensor(w))), [x])
    assert err < 1e-9  # central differences are exact on linear maps


def test_conv_random_input_below_1e5():
    rng = np.random.default_rng(1)
    inputs = [Tensor(rng.normal(size=(2, 3, 8, 8))),
              Tensor(rng.normal(size=(4, 3, 3, 3))),
              Tensor(rng.normal(size=(1, 4, 1, 1)))]
    err = grad_check(
        lambda ts: ad.mean_over(ad.conv2d(ts[0], ts[1], ts[2], padding=1)),
        inputs, eps=1e-5)
    assert err < 1e-5


def test_eps_window_enforced():
    x = Tensor(np.ones((1, 1, 1, 1)))
    with pytest.raises(ad.EngineError, match="eps"):
        grad_check(lambda ts: ad.sum_over(ts[0]), [x], eps=1e-2)


def test_float32_inputs_rejected():
    x = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(ad.EngineError, match="float64"):
        grad_check(lambda ts: ad.sum_over(ts[0]), [x])


def test_every_op_passes_randomized_shapes():
    for name, err in verification.op_checks(seed=7):
        assert err < 1e-5, f"{name}: {err:.3e}"


def test_loss_graph_4x4_three_classes():
    assert verification.loss_graph_check(seed=0) < 1e-5


def test_network_graph_composed_tolerance():
    assert verification.network_graph_check(seed=0) < 1e-4


def test_single_precision_grads_track_double():
    # f32 tape gradients against the f64 tape as oracle, < 1e-3 relative
    rng = np.random.default_rng(5)
    x64 = rng.normal(size=(2, 3, 8, 8))
    w64 = rng.normal(size=(4, 3, 3, 3))

    def grads(dtype):
        x = Tensor(x64.astype(dtype), requires_grad=True)
        w = Tensor(w64.astype(dtype), requires_grad=True)
        out = ad.mean_over(ad.sigmoid(ad.conv2d(x, w, padding=1)))
        out.backward()
        return x.grad.astype(np.float64), w.grad.astype(np.float64)

    gx32, gw32 = grads(np.float32)
    gx64, gw64 = grads(np.float64)
    for a, b in ((gx32, gx64), (gw32, gw64)):
        rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-8)
        assert rel.max() < 1e-3
