"""Gradient-integrity suite: finite-difference checks for every
differentiable op and for the composed loss graphs, all in float64.

Shared by the `grad-check` CLI subcommand and the test suite, so both run
the identical battery.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import grad_check
from .losses import total_loss
from .model import ModelConfig, build, forward
from .synthdata import VOID


def _t(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def op_checks(seed: int = 0, eps: float = 1e-5) -> list:
    """(name, max relative error) for each differentiable op on random data."""
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 6, 6)
    y = _t(rng, 2, 3, 6, 6)
    pos = _t(rng, 2, 3, 6, 6, low=0.2, high=2.0)

    checks = [
        ("add", lambda ts: ad.mean_over(ad.add(ts[0], ts[1])), [x, y]),
        ("sub", lambda ts: ad.mean_over(ad.sub(ts[0], ts[1])), [x, y]),
        ("mul", lambda ts: ad.mean_over(ad.mul(ts[0], ts[1])), [x, y]),
        ("scale", lambda ts: ad.sum_over(ad.scale(ts[0], -2.5)), [x]),
        ("add_const", lambda ts: ad.sum_over(ad.add_const(ts[0], 1.5)), [x]),
        ("clamp_min", lambda ts: ad.mean_over(ad.clamp_min(ts[0], 0.5)), [pos]),
        ("log", lambda ts: ad.mean_over(ad.log(ts[0])), [pos]),
        ("sqrt", lambda ts: ad.mean_over(ad.sqrt(ts[0])), [pos]),
        ("relu", lambda ts: ad.mean_over(ad.relu(ts[0])), [x]),
        ("sigmoid", lambda ts: ad.mean_over(ad.sigmoid(ts[0])), [x]),
        ("log1p", lambda ts: ad.mean_over(ad.log1p(ts[0])), [pos]),
        ("sum_axes", lambda ts: ad.mean_over(ad.mul(
            ad.sum_over(ts[0], axes=(1,)), ad.sum_over(ts[1], axes=(1,)))), [x, y]),
        ("mean_axes", lambda ts: ad.sum_over(ad.sqrt(ad.add_const(
            ad.mean_over(ad.mul(ts[0], ts[0]), axes=(1, 2, 3)), 0.1))), [x]),
        ("softmax_channels", lambda ts: ad.mean_over(ad.mul(
            ad.softmax_channels(ts[0]), ts[1])), [x, y]),
        ("maxpool2", lambda ts: ad.mean_over(ad.maxpool2(ts[0])),
         [_t(rng, 2, 2, 6, 6)]),
        ("upsample_bilinear2x", lambda ts: ad.mean_over(ad.mul(
            ad.upsample_bilinear2x(ts[0]), ts[1])),
         [_t(rng, 1, 2, 5, 3), _t(rng, 1, 2, 10, 6)]),
        ("conv2d_s1p1", lambda ts: ad.mean_over(
            ad.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1)),
         [_t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3), _t(rng, 1, 4, 1, 1)]),
        ("conv2d_s2p0", lambda ts: ad.mean_over(
            ad.conv2d(ts[0], ts[1], ts[2], stride=2, padding=0)),
         [_t(rng, 2, 2, 8, 8), _t(rng, 3, 2, 2, 2), _t(rng, 1, 3, 1, 1)]),
    ]
    return [(name, grad_check(fn, inputs, eps)) for name, fn, inputs in checks]


def loss_graph_check(seed: int = 0, eps: float = 1e-5,
                     num_classes: int = 3, size: int = 4) -> float:
    """Full loss graph on one image: softmax + masked cross-entropy plus
    sigmoid + log-space RMSE, one void pixel included."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=(1, size, size)).astype(np.int64)
    labels[0, 0, 0] = VOID
    z = Tensor(rng.uniform(0.0, 0.5, size=(1, 1, size, size)))

    def fn(ts):
        probs = ad.softmax_channels(ts[0])
        unc = ad.sigmoid(ts[1])
        loss, _seg, _unc, _n = total_loss(probs, labels, unc, z)
        return loss

    seg_logits = _t(rng, 1, num_classes, size, size, low=-2.0, high=2.0)
    unc_logits = _t(rng, 1, 1, size, size, low=-2.0, high=2.0)
    return grad_check(fn, [seg_logits, unc_logits], eps)


def network_graph_check(seed: int = 0, eps: float = 1e-5) -> float:
    """End-to-end check through a miniature dual-head network: every
    architectural op (conv, pool, upsample, heads) inside one loss graph."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_classes=3, encoder_widths=(2, 3, 4), decoder_width=4,
                      kernel_size=3, input_size=8)
    params = build(cfg, seed=seed, dual_head=True)
    names = list(params.tensors)
    labels = rng.integers(0, 3, size=(1, 8, 8)).astype(np.int64)
    labels[0, :2, :2] = VOID
    z = Tensor(rng.uniform(0.0, 0.5, size=(1, 1, 8, 8)))
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 8, 8)))

    def fn(ts):
        for name, t in zip(names, ts):
            params.tensors[name] = t
        out = forward(params, ts[-1])
        loss, _s, _u, _n = total_loss(out.probs, labels, out.uncertainty, z)
        return loss

    inputs = [Tensor(params.tensors[n].data.astype(np.float64)) for n in names]
    inputs.append(image)
    return grad_check(fn, inputs, eps)


def run_suite(seed: int = 0, eps: float = 1e-5) -> list:
    """(name, max relative error, tolerance) rows.

    Per-op checks and the loss graph must meet 1e-5. The end-to-end network
    check composes relu and maxpool kinks with near-zero gradient paths, so
    it carries the composed-graph tolerance of 1e-4.
    """
    rows = [(name, err, 1e-5) for name, err in op_checks(seed, eps)]
    rows.append(("loss_graph_4x4_c3", loss_graph_check(seed, eps), 1e-5))
    rows.append(("network_graph_8x8", network_graph_check(seed, eps), 1e-4))
    return rows
