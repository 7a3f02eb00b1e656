"""Tiny fully-convolutional encoder-decoder with a dual-head output.

Encoder: three conv/relu/maxpool stages (downsampling factor 8). Decoder:
three upsample/conv/relu stages back to input resolution, ending in a shared
feature map of `decoder_width` channels. On top of that sit a segmentation
head (1x1 conv to C channels + channel softmax) and, when dual_head is on,
an uncertainty head (1x1 conv to 1 channel + sigmoid). The uncertainty head
is the only difference between the baseline and the student: its output
layer adds decoder_width + 1 parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKBONE = "backbone"
DECODER = "decoder"

DOWNSAMPLE_FACTOR = 8


@dataclass
class ModelConfig:
    num_classes: int = 6
    encoder_widths: tuple = (8, 16, 32)
    decoder_width: int = 32
    kernel_size: int = 3
    input_size: int = 96

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.encoder_widths) != 3 or any(w < 1 for w in self.encoder_widths):
            raise ValueError(f"encoder needs 3 positive widths, got {self.encoder_widths}")
        if self.decoder_width < 1:
            raise ValueError(f"decoder width must be >= 1, got {self.decoder_width}")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")


@dataclass
class ModelParams:
    config: ModelConfig
    dual_head: bool
    tensors: dict = field(default_factory=dict)  # name -> Tensor
    groups: dict = field(default_factory=dict)   # name -> BACKBONE | DECODER

    def named(self):
        return self.tensors.items()

    def require_grad(self, flag: bool = True) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


@dataclass
class ModelOutput:
    probs: Tensor                 # (B, C, H, W), channel sums 1
    uncertainty: Tensor | None    # (B, 1, H, W) in (0, 1); None for baseline


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _layer_specs(config: ModelConfig, dual_head: bool):
    k = config.kernel_size
    w1, w2, w3 = config.encoder_widths
    d = config.decoder_width
    specs = [
        ("enc1", BACKBONE, w1, 3, k),
        ("enc2", BACKBONE, w2, w1, k),
        ("enc3", BACKBONE, w3, w2, k),
        ("dec1", DECODER, d, w3, k),
        ("dec2", DECODER, d, d, k),
        ("dec3", DECODER, d, d, k),
        ("seg_head", DECODER, config.num_classes, d, 1),
    ]
    if dual_head:
        specs.append(("unc_head", DECODER, 1, d, 1))
    return specs


def build(config: ModelConfig, seed: int, dual_head: bool) -> ModelParams:
    """He-style fan-in uniform weights, zero biases, deterministic in seed.

    Shared layers are drawn before the uncertainty head, so two builds from
    one seed agree bitwise on everything but the extra head.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(config=config, dual_head=dual_head)
    for name, group, cout, cin, k in _layer_specs(config, dual_head):
        fan_in = cin * k * k
        params.tensors[f"{name}.w"] = Tensor(
            _he_uniform(rng, (cout, cin, k, k), fan_in), requires_grad=True)
        params.tensors[f"{name}.b"] = Tensor(
            np.zeros((1, cout, 1, 1), dtype=np.float32), requires_grad=True)
        params.groups[f"{name}.w"] = group
        params.groups[f"{name}.b"] = group
    return params


def forward(params: ModelParams, images: Tensor) -> ModelOutput:
    """Pure function of (params, images); spatial extents are preserved."""
    _, _, h, w = images.shape
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ad.EngineError(
            f"input extents {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR}")
    pad = params.config.kernel_size // 2
    t = params.tensors

    def conv(x, name, padding):
        return ad.conv2d(x, t[f"{name}.w"], t[f"{name}.b"], stride=1, padding=padding)

    x = images
    for name in ("enc1", "enc2", "enc3"):
        x = ad.maxpool2(ad.relu(conv(x, name, pad)))
    for name in ("dec1", "dec2", "dec3"):
        x = ad.relu(conv(ad.upsample_bilinear2x(x), name, pad))

    probs = ad.softmax_channels(conv(x, "seg_head", 0))
    uncertainty = ad.sigmoid(conv(x, "unc_head", 0)) if params.dual_head else None
    return ModelOutput(probs=probs, uncertainty=uncertainty)


def predict(params: ModelParams, images: np.ndarray) -> ModelOutput:
    """Inference entry point: numpy batch in, no tape built."""
    with ad.no_grad():
        return forward(params, Tensor(images.astype(np.float32)))


def param_count(params: ModelParams):
    """(total, uncertainty-head overhead); overhead is decoder_width + 1."""
    total = sum(t.data.size for t in params.tensors.values())
    overhead = 0
    if params.dual_head:
        overhead = (params.tensors["unc_head.w"].data.size
                    + params.tensors["unc_head.b"].data.size)
    return total, overhead


def images_to_batch(images) -> np.ndarray:
    """Stack (H, W, 3) float images into a (B, 3, H, W) float32 batch."""
    arr = np.stack([np.moveaxis(im, 2, 0) for im in images])
    return np.ascontiguousarray(arr, dtype=np.float32)
