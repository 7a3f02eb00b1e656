"""Ensemble teacher: independently trained baseline members, their averaged
prediction, and the spread-based uncertainty that gets distilled.

Per pixel the teacher reports the population standard deviation (divide by
M) across members of the softmax probability at the predicted class, where
the predicted class is the argmax of the member-mean probabilities. With one
member the uncertainty is identically zero; probabilities live in [0, 1], so
the uncertainty never exceeds 0.5.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, predict

TARGET_SUFFIX = ".tgt"


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Ensemble:
    members: list
    member_seeds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        cfg = self.members[0].config
        for i, m in enumerate(self.members):
            if m.config != cfg:
                raise ValueError(
                    f"member {i} config {m.config} does not match member 0 {cfg}")
            if m.dual_head:
                raise ValueError(f"member {i} must be a baseline (no uncertainty head)")

    def __len__(self):
        return len(self.members)

    @property
    def config(self):
        return self.members[0].config


@dataclass
class TeacherOutput:
    mean_probs: np.ndarray   # (B, C, H, W) float32
    pred_map: np.ndarray     # (B, H, W) uint16, argmax of mean_probs
    uncertainty: np.ndarray  # (B, 1, H, W) float32 in [0, 0.5]


def member_probs(member: ModelParams, images: np.ndarray) -> np.ndarray:
    return predict(member, images).probs.data


def aggregate_probs(prob_list) -> TeacherOutput:
    """Reduce a list of M member softmax outputs, each (B, C, H, W).

    Accumulation runs in float64 with a fixed member order, so permuting
    members moves results by no more than rounding noise. Only the gathered
    predicted-class column is stacked across members, keeping memory flat.
    """
    acc = np.zeros(prob_list[0].shape, dtype=np.float64)
    for p in prob_list:
        acc += p
    mean = acc / len(prob_list)
    pred = mean.argmax(axis=1)  # ties: lowest class index
    at_pred = np.stack([
        np.take_along_axis(p.astype(np.float64), pred[:, None], axis=1)[:, 0]
        for p in prob_list])
    center = at_pred - at_pred.mean(axis=0, keepdims=True)
    std = np.sqrt(np.square(center).mean(axis=0))[:, None]
    return TeacherOutput(mean_probs=mean.astype(np.float32),
                         pred_map=pred.astype(np.uint16),
                         uncertainty=std.astype(np.float32))


def teacher_predict(ensemble: Ensemble, images: np.ndarray) -> TeacherOutput:
    return aggregate_probs([member_probs(m, images) for m in ensemble.members])


def ensemble_hash(ensemble: Ensemble) -> bytes:
    """Content digest over member parameters, order-sensitive."""
    h = hashlib.sha256()
    h.update(repr(ensemble.config).encode("utf-8"))
    for m in ensemble.members:
        for name, t in m.tensors.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.digest()


def _id_hash(sample_id: str) -> int:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]


def write_target(path, sample_id: str, ens_hash: bytes,
                 uncertainty: np.ndarray, pred: np.ndarray) -> None:
    h, w = uncertainty.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", _id_hash(sample_id)))
        fh.write(ens_hash)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(uncertainty, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pred, dtype="<u2").tobytes())


def read_target(path, sample_id: str, ens_hash: bytes):
    """Returns (uncertainty, pred) or raises StaleCacheError on any mismatch."""
    blob = Path(path).read_bytes()
    head = struct.calcsize("<Q") + 32 + struct.calcsize("<II")
    if len(blob) < head:
        raise StaleCacheError(f"{path}: truncated target header")
    (idh,) = struct.unpack_from("<Q", blob, 0)
    if idh != _id_hash(sample_id):
        raise StaleCacheError(f"{path}: sample id hash mismatch for {sample_id!r}")
    if blob[8:40] != ens_hash:
        raise StaleCacheError(f"{path}: ensemble hash mismatch")
    h, w = struct.unpack_from("<II", blob, 40)
    need = head + 4 * h * w + 2 * h * w
    if len(blob) != need:
        raise StaleCacheError(f"{path}: payload size {len(blob)} != expected {need}")
    unc = np.frombuffer(blob, dtype="<f4", count=h * w, offset=head).reshape(h, w)
    pred = np.frombuffer(blob, dtype="<u2", count=h * w,
                         offset=head + 4 * h * w).reshape(h, w)
    return unc.copy(), pred.copy()


def distill_targets(ensemble: Ensemble, dataset, cache_dir,
                    batch_size: int = 8) -> dict:
    """Teacher maps for every sample, cached on disk keyed by content hash.

    Stale or missing cache entries are recomputed sample by sample; valid
    entries are reused byte for byte. Returns id -> (uncertainty, pred).
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ens_hash = ensemble_hash(ensemble)

    out, missing = {}, []
    for s in dataset:
        path = cache_dir / f"{s.id}{TARGET_SUFFIX}"
        if path.exists():
            try:
                out[s.id] = read_target(path, s.id, ens_hash)
                continue
            except StaleCacheError:
                pass
        missing.append(s)

    from .model import images_to_batch
    for start in range(0, len(missing), batch_size):
        chunk = missing[start:start + batch_size]
        batch = images_to_batch([s.image for s in chunk])
        t = teacher_predict(ensemble, batch)
        for i, s in enumerate(chunk):
            unc = t.uncertainty[i, 0]
            pred = t.pred_map[i]
            write_target(cache_dir / f"{s.id}{TARGET_SUFFIX}", s.id, ens_hash,
                         unc, pred)
            out[s.id] = (unc, pred)
    return out
