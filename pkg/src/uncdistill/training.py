"""The training loop shared by ensemble members and the student.

Members run with the segmentation loss alone; the student adds the
uncertainty term against cached teacher targets, which are co-transformed
with the exact augmentation parameters applied to the image. Two parameter
groups get different learning rates: the decoder (decoder convs plus both
heads) trains at `decoder_lr_multiplier` times the backbone rate, both
decayed by the polynomial schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import synthdata
from .autodiff import NonFiniteError, Tensor
from .losses import segmentation_loss, total_loss
from .model import BACKBONE, ModelConfig, ModelParams, build, forward, images_to_batch
from .optim import LrSchedule, OptimState, poly_lr, sgd_momentum_step

# seed-stream tags, keep stable: changing them changes every trained model
_TAG_SHUFFLE = 1
_TAG_AUGMENT = 2


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decoder_lr_multiplier: float = 10.0
    schedule_power: float = 0.9
    crop: int = 64
    seed: int = 0
    decay_bias: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.decoder_lr_multiplier < 1:
            raise ValueError("decoder_lr_multiplier must be >= 1")


@dataclass
class LogRow:
    epoch: int
    iteration: int
    lr_backbone: float
    lr_decoder: float
    seg_loss: float
    unc_loss: float
    loss: float

    header = "epoch,iter,lr_backbone,lr_decoder,L_S,L_U,L"

    def csv(self) -> str:
        return (f"{self.epoch},{self.iteration},{self.lr_backbone:.8e},"
                f"{self.lr_decoder:.8e},{self.seg_loss:.8e},{self.unc_loss:.8e},"
                f"{self.loss:.8e}")


def _stream_seed(base: int, tag: int, *rest: int) -> int:
    ss = np.random.SeedSequence((int(base), int(tag)) + tuple(int(r) for r in rest))
    return int(ss.generate_state(1, np.uint64)[0])


def train_model(params: ModelParams, dataset, config: TrainConfig,
                targets: dict | None = None):
    """Run the loop on `params` in place of a fresh build; returns
    (trained params, log rows). `targets` maps sample id to the teacher's
    (uncertainty map, prediction map); None trains segmentation only.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    if targets is None and params.dual_head:
        raise ValueError("dual-head training needs teacher targets")
    if targets is not None:
        for s in dataset:
            if s.id not in targets:
                raise KeyError(f"missing teacher target for sample {s.id!r}")

    n = len(dataset)
    iters_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_iters = max(1, config.epochs * iters_per_epoch)
    schedule = LrSchedule(config.lr, total_iters, config.schedule_power)
    state = OptimState(momentum=config.momentum, weight_decay=config.weight_decay)
    decay_mask = {name: config.decay_bias or not name.endswith(".b")
                  for name in params.tensors}
    shuffle_rng = np.random.default_rng(_stream_seed(config.seed, _TAG_SHUFFLE))

    log = []
    iteration = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            images, labels, teacher_unc = _assemble_batch(
                dataset, batch_idx, config, epoch, targets)

            out = forward(params, Tensor(images))
            if targets is None:
                loss, counted = segmentation_loss(out.probs, labels)
                seg_val, unc_val = loss.item(), 0.0
            else:
                loss, seg, unc, counted = total_loss(
                    out.probs, labels, out.uncertainty, Tensor(teacher_unc))
                seg_val, unc_val = seg.item(), unc.item()
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, iteration {iteration}")
            loss.backward()

            lr_now = poly_lr(schedule, iteration)
            lr_by_name = {
                name: lr_now if params.groups[name] == BACKBONE
                else lr_now * config.decoder_lr_multiplier
                for name in params.tensors}
            grads = {name: t.grad for name, t in params.tensors.items()}
            params.tensors = sgd_momentum_step(
                params.tensors, grads, state, lr_by_name, decay_mask)

            log.append(LogRow(epoch, iteration, lr_now,
                              lr_now * config.decoder_lr_multiplier,
                              seg_val, unc_val, loss_val))
            iteration += 1
    return params, log


def _assemble_batch(dataset, batch_idx, config: TrainConfig, epoch: int,
                    targets: dict | None):
    images, labels, uncs = [], [], []
    for idx in batch_idx:
        s = dataset[int(idx)]
        aug_seed = _stream_seed(config.seed, _TAG_AUGMENT, epoch, int(idx))
        p = synthdata.draw_augment_params(
            aug_seed, s.image.shape[0], s.image.shape[1], config.crop)
        images.append(synthdata.augment_image(s.image, p))
        labels.append(synthdata.augment_labels(s.labels, p))
        if targets is not None:
            unc_map, _pred = targets[s.id]
            uncs.append(synthdata.augment_map(unc_map, p, fill=0.0))
    batch = images_to_batch(images)
    label_arr = np.stack(labels)
    if targets is None:
        return batch, label_arr, None
    unc_arr = np.stack(uncs).astype(np.float32)[:, None, :, :]
    return batch, label_arr, unc_arr


def train_member(model_config: ModelConfig, seed: int, dataset,
                 config: TrainConfig):
    """One baseline ensemble member: fresh init from `seed`, segmentation
    loss only. Deterministic in (seed, dataset, config)."""
    params = build(model_config, seed, dual_head=False)
    cfg = replace(config, seed=seed)
    params, log = train_model(params, dataset, cfg, targets=None)
    return params, log


def train_student(teacher_targets: dict, dataset, config: TrainConfig,
                  model_config: ModelConfig):
    """The dual-head student against ground truth plus teacher uncertainty."""
    params = build(model_config, config.seed, dual_head=True)
    return train_model(params, dataset, config, targets=teacher_targets)


def write_log_csv(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LogRow.header + "\n")
        for row in log:
            fh.write(row.csv() + "\n")


def epoch_means(log) -> list:
    """Per-epoch mean (seg, unc, total) losses from an iteration log."""
    out = []
    epochs = sorted({r.epoch for r in log})
    for e in epochs:
        rows = [r for r in log if r.epoch == e]
        out.append((e,
                    float(np.mean([r.seg_loss for r in rows])),
                    float(np.mean([r.unc_loss for r in rows])),
                    float(np.mean([r.loss for r in rows]))))
    return out
