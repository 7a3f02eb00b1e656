"""Experiment driver: the full pipeline as idempotent subcommands.

Each stage writes its artifacts, the fully resolved config, and a digest of
its inputs into its own directory under --out. Re-running a stage whose
inputs are unchanged is a no-op unless --force is given; a downstream stage
refuses to consume artifacts whose recorded digests no longer match.

Exit codes: 0 success, 1 internal error, 2 config error, 3 missing
artifact, 4 stage hash mismatch, 5 runtime fault. Errors print one
machine-parsable line: ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, ensemble, metrics, model, synthdata, training, verification
from .config import (ConfigError, ExperimentConfig, apply_assignment,
                     load_config, resolved_text)
from .synthdata import SPLIT_TEST, SPLIT_TRAIN, VOID

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_STALE = 4
EXIT_FAULT = 5

THREADS_ENV = "UNCDISTILL_THREADS"


class MissingArtifact(RuntimeError):
    pass


class StageHashMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# stage plumbing

def _digest_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest_tree(directory: Path) -> str:
    files = sorted(p for p in directory.rglob("*") if p.is_file())
    h = hashlib.sha256()
    for p in files:
        h.update(str(p.relative_to(directory)).encode())
        h.update(_digest_file(p).encode())
    return h.hexdigest()


def _fields_digest(cfg: ExperimentConfig, names) -> str:
    payload = {n: getattr(cfg, n) for n in names}
    return _digest_bytes(repr(sorted(payload.items())).encode())


class Stage:
    """One pipeline stage directory with input-digest bookkeeping."""

    def __init__(self, out_dir: Path, name: str):
        self.dir = out_dir / name
        self.name = name

    @property
    def hash_file(self) -> Path:
        return self.dir / "inputs.hash"

    def recorded_digest(self) -> str | None:
        if self.hash_file.exists():
            return self.hash_file.read_text(encoding="utf-8").strip()
        return None

    def is_current(self, digest: str, outputs) -> bool:
        if self.recorded_digest() != digest:
            return False
        return all((self.dir / o).exists() for o in outputs)

    def require_current(self, digest: str, outputs) -> None:
        if not self.dir.exists():
            raise MissingArtifact(f"stage {self.name!r} has not been run")
        for o in outputs:
            if not (self.dir / o).exists():
                raise MissingArtifact(f"stage {self.name!r} is missing {o}")
        recorded = self.recorded_digest()
        if recorded is None:
            raise MissingArtifact(f"stage {self.name!r} has no inputs.hash")
        if recorded != digest:
            raise StageHashMismatch(
                f"stage {self.name!r} was produced from different inputs "
                f"(recorded {recorded[:12]}, expected {digest[:12]}); re-run it")

    def commit(self, cfg: ExperimentConfig, digest: str) -> None:
        (self.dir / "config.resolved.txt").write_text(resolved_text(cfg),
                                                      encoding="utf-8")
        self.hash_file.write_text(digest + "\n", encoding="utf-8")


_SCENE_FIELDS = ("scene_size", "classes", "noise_amplitude", "void_border",
                 "insert_prob", "min_shapes", "max_shapes", "train_samples",
                 "test_samples", "seed")
_MODEL_FIELDS = ("classes", "enc_widths", "decoder_width", "kernel_size",
                 "scene_size")
_MEMBER_TRAIN_FIELDS = _MODEL_FIELDS + (
    "member_epochs", "batch_size", "crop", "lr", "momentum", "weight_decay",
    "decoder_lr_multiplier", "schedule_power", "decay_bias", "seed")
_STUDENT_TRAIN_FIELDS = _MODEL_FIELDS + (
    "student_epochs", "batch_size", "crop", "lr", "momentum", "weight_decay",
    "decoder_lr_multiplier", "schedule_power", "decay_bias", "seed")


def member_ckpt(teacher_dir: Path, index: int) -> Path:
    return teacher_dir / f"member_{index:02d}.ckpt"


def _data_digest(cfg: ExperimentConfig, data_stage: Stage) -> str:
    return _digest_bytes(_fields_digest(cfg, _SCENE_FIELDS).encode(),
                         _digest_tree(data_stage.dir).encode())


def _load_split(data_stage: Stage, split: str):
    samples = synthdata.read_dataset(data_stage.dir / split)
    if not samples:
        raise MissingArtifact(f"no {split} samples under {data_stage.dir}")
    return samples


def _require_data(cfg: ExperimentConfig, out: Path) -> Stage:
    stage = Stage(out, "data")
    if not (stage.dir / "train" / "manifest.txt").exists():
        raise MissingArtifact("gen-data has not been run (no train manifest)")
    digest = stage.recorded_digest()
    if digest is None:
        raise MissingArtifact("data stage has no inputs.hash")
    expected = _fields_digest(cfg, _SCENE_FIELDS)
    if digest != expected:
        raise StageHashMismatch(
            f"data stage was generated from a different config "
            f"(recorded {digest[:12]}, expected {expected[:12]}); re-run gen-data")
    return stage


def _load_members(cfg: ExperimentConfig, out: Path, count: int):
    teacher = Stage(out, "teacher")
    digest = _teacher_digest(cfg, out)
    teacher.require_current(digest, [member_ckpt(teacher.dir, i).name
                                     for i in range(count)])
    members = [checkpoint.load_checkpoint(member_ckpt(teacher.dir, i))
               for i in range(count)]
    return ensemble.Ensemble(members=members,
                             member_seeds=[cfg.member_seed(i) for i in range(count)])


def _teacher_digest(cfg: ExperimentConfig, out: Path) -> str:
    # member count is deliberately excluded: a larger pool stays valid when
    # downstream stages only consume a prefix of it
    data = _require_data(cfg, out)
    return _digest_bytes(_fields_digest(cfg, _MEMBER_TRAIN_FIELDS).encode(),
                         _digest_tree(data.dir / "train").encode())


# ---------------------------------------------------------------------------
# stages

def stage_gen_data(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "data")
    digest = _fields_digest(cfg, _SCENE_FIELDS)
    if not force and stage.is_current(digest, ["train/manifest.txt",
                                               "test/manifest.txt"]):
        print(f"gen-data: up to date in {stage.dir}")
        return
    scene = cfg.scene_config()
    train = synthdata.build_dataset(scene, cfg.train_samples, cfg.seed,
                                    SPLIT_TRAIN, "train_")
    test = synthdata.build_dataset(scene, cfg.test_samples, cfg.seed,
                                   SPLIT_TEST, "test_")
    synthdata.write_dataset(train, stage.dir / "train")
    synthdata.write_dataset(test, stage.dir / "test")
    stage.commit(cfg, digest)
    print(f"gen-data: wrote {len(train)} train / {len(test)} test samples to {stage.dir}")


def _train_one_member(args) -> str:
    data_dir, cfg_text, index, ckpt_path = args
    cfg = ExperimentConfig()
    from .config import parse_config_text
    parse_config_text(cfg_text, cfg, source="<resolved>")
    dataset = synthdata.read_dataset(data_dir)
    params, log = training.train_member(
        cfg.model_config(), cfg.member_seed(index), dataset,
        cfg.member_train_config())
    checkpoint.save_checkpoint(params, ckpt_path)
    training.write_log_csv(log, Path(ckpt_path).with_suffix(".log.csv"))
    return str(ckpt_path)


def stage_train_teacher(cfg: ExperimentConfig, out: Path, force: bool,
                        count: int | None = None) -> None:
    count = cfg.members if count is None else count
    stage = Stage(out, "teacher")
    digest = _teacher_digest(cfg, out)
    wanted = [member_ckpt(stage.dir, i) for i in range(count)]
    if not force and stage.is_current(digest, [p.name for p in wanted]):
        print(f"train-teacher: {count} members up to date in {stage.dir}")
        return
    stage.dir.mkdir(parents=True, exist_ok=True)
    if force or stage.recorded_digest() != digest:
        for old in stage.dir.glob("member_*"):
            old.unlink()
    todo = [i for i in range(count) if not wanted[i].exists()]
    data_dir = Stage(out, "data").dir / "train"
    jobs = [(data_dir, resolved_text(cfg), i, wanted[i]) for i in todo]
    workers = _thread_count()
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        # one BLAS thread per worker process; the env propagates at spawn
        prev = os.environ.get("OPENBLAS_NUM_THREADS")
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        try:
            with mp.get_context("spawn").Pool(workers) as pool:
                for done in pool.imap_unordered(_train_one_member, jobs):
                    print(f"train-teacher: finished {done}")
        finally:
            if prev is None:
                os.environ.pop("OPENBLAS_NUM_THREADS", None)
            else:
                os.environ["OPENBLAS_NUM_THREADS"] = prev
    else:
        for job in jobs:
            print(f"train-teacher: finished {_train_one_member(job)}")
    stage.commit(cfg, digest)
    print(f"train-teacher: {count} members ready in {stage.dir}")


def stage_distill_targets(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "targets")
    ens = _load_members(cfg, out, cfg.members)
    data = _require_data(cfg, out)
    digest = _digest_bytes(ensemble.ensemble_hash(ens),
                           _digest_tree(data.dir / "train").encode())
    train = _load_split(data, "train")
    expected = [f"{s.id}{ensemble.TARGET_SUFFIX}" for s in train]
    if not force and stage.is_current(digest, expected):
        print(f"distill-targets: up to date in {stage.dir}")
        return
    if force and stage.dir.exists():
        for old in stage.dir.glob(f"*{ensemble.TARGET_SUFFIX}"):
            old.unlink()
    # per-sample staleness is handled inside distill_targets via the
    # ensemble content hash embedded in each file
    ensemble.distill_targets(ens, train, stage.dir, batch_size=cfg.eval_batch)
    stage.commit(cfg, digest)
    print(f"distill-targets: {len(train)} target maps in {stage.dir}")


def _targets_digest(cfg: ExperimentConfig, out: Path) -> str:
    ens = _load_members(cfg, out, cfg.members)
    data = _require_data(cfg, out)
    return _digest_bytes(ensemble.ensemble_hash(ens),
                         _digest_tree(data.dir / "train").encode())


def stage_train_student(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "student")
    targets_stage = Stage(out, "targets")
    data = _require_data(cfg, out)
    targets_digest = _targets_digest(cfg, out)
    train = _load_split(data, "train")
    targets_stage.require_current(
        targets_digest, [f"{s.id}{ensemble.TARGET_SUFFIX}" for s in train])
    digest = _digest_bytes(targets_digest.encode(),
                           _fields_digest(cfg, _STUDENT_TRAIN_FIELDS).encode())
    if not force and stage.is_current(digest, ["student.ckpt", "train_log.csv"]):
        print(f"train-student: up to date in {stage.dir}")
        return
    ens = _load_members(cfg, out, cfg.members)
    targets = ensemble.distill_targets(ens, train, targets_stage.dir,
                                       batch_size=cfg.eval_batch)
    params, log = training.train_student(targets, train,
                                         cfg.student_train_config(),
                                         cfg.model_config())
    stage.dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(params, stage.dir / "student.ckpt")
    training.write_log_csv(log, stage.dir / "train_log.csv")
    stage.commit(cfg, digest)
    means = training.epoch_means(log)
    print(f"train-student: {len(means)} epochs, final L_S {means[-1][1]:.4f} "
          f"L_U {means[-1][2]:.4f}, checkpoint in {stage.dir}")


def _load_student(cfg: ExperimentConfig, out: Path):
    path = Stage(out, "student").dir / "student.ckpt"
    if not path.exists():
        raise MissingArtifact(f"missing checkpoint {path}; run train-student")
    return checkpoint.load_checkpoint(path)


def _forward_maps(params, samples, batch: int):
    """Prediction and uncertainty maps for a model over a sample list."""
    preds, uncs = [], []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images = model.images_to_batch([s.image for s in chunk])
        outp = model.predict(params, images)
        preds.append(outp.probs.data.argmax(axis=1))
        uncs.append(outp.uncertainty.data[:, 0] if outp.uncertainty is not None
                    else np.zeros_like(outp.probs.data[:, 0]))
    return np.concatenate(preds), np.concatenate(uncs)


def _teacher_maps(ens, samples, batch: int):
    preds, uncs = [], []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images = model.images_to_batch([s.image for s in chunk])
        t = ensemble.teacher_predict(ens, images)
        preds.append(t.pred_map.astype(np.int64))
        uncs.append(t.uncertainty[:, 0])
    return np.concatenate(preds), np.concatenate(uncs)


def _eval_digest(cfg: ExperimentConfig, out: Path) -> str:
    data = _require_data(cfg, out)
    student_path = Stage(out, "student").dir / "student.ckpt"
    if not student_path.exists():
        raise MissingArtifact(f"missing checkpoint {student_path}; run train-student")
    member_digests = "".join(
        _digest_file(member_ckpt(Stage(out, "teacher").dir, i))
        for i in range(cfg.members)
        if member_ckpt(Stage(out, "teacher").dir, i).exists())
    return _digest_bytes(_digest_tree(data.dir / "test").encode(),
                         member_digests.encode(),
                         _digest_file(student_path).encode(),
                         _fields_digest(cfg, ("fractions", "members")).encode())


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.12g}"


def stage_eval(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "eval")
    digest = _eval_digest(cfg, out)
    outputs = ["metrics.csv", "teacher_classes.csv", "student_classes.csv",
               "teacher_summary.json", "student_summary.json"]
    if not force and stage.is_current(digest, outputs):
        print(f"eval: up to date in {stage.dir}")
        return
    data = _require_data(cfg, out)
    test = _load_split(data, "test")
    ens = _load_members(cfg, out, cfg.members)
    student = _load_student(cfg, out)
    gts = np.stack([s.labels for s in test])

    t_pred, t_unc = _teacher_maps(ens, test, cfg.eval_batch)
    s_pred, s_unc = _forward_maps(student, test, cfg.eval_batch)
    t_rep = metrics.evaluate_predictions(t_pred, gts, t_unc, cfg.classes,
                                         cfg.fractions)
    s_rep = metrics.evaluate_predictions(s_pred, gts, s_unc, cfg.classes,
                                         cfg.fractions)
    total, overhead = model.param_count(student)
    s_rep.param_total, s_rep.param_overhead = total, overhead
    t_rep.param_total = model.param_count(ens.members[0])[0] * len(ens)

    stage.dir.mkdir(parents=True, exist_ok=True)
    (stage.dir / "teacher_classes.csv").write_text(t_rep.class_rows_csv(),
                                                   encoding="utf-8")
    (stage.dir / "student_classes.csv").write_text(s_rep.class_rows_csv(),
                                                   encoding="utf-8")
    (stage.dir / "teacher_summary.json").write_text(t_rep.to_json() + "\n",
                                                    encoding="utf-8")
    (stage.dir / "student_summary.json").write_text(s_rep.to_json() + "\n",
                                                    encoding="utf-8")
    rows = ["model,metric,value"]
    for name, rep in (("teacher", t_rep), ("student", s_rep)):
        rows.append(f"{name},miou,{_fmt(rep.miou)}")
        rows.append(f"{name},munc,{_fmt(rep.munc)}")
        rows.append(f"{name},auroc_error,{_fmt(rep.auroc_error)}")
        rows.append(f"{name},auroc_ood,{_fmt(rep.auroc_ood)}")
        for c in range(cfg.classes):
            rows.append(f"{name},iou_class_{c},{_fmt(rep.per_class_iou[c])}")
            rows.append(f"{name},unc_class_{c},{_fmt(rep.per_class_unc[c])}")
    (stage.dir / "metrics.csv").write_text("\n".join(rows) + "\n",
                                           encoding="utf-8")
    stage.commit(cfg, digest)
    print(f"eval: teacher mIoU {t_rep.miou:.4f} mUnc {t_rep.munc:.4f} | "
          f"student mIoU {s_rep.miou:.4f} mUnc {s_rep.munc:.4f}")


def stage_sparsify(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "sparsify")
    digest = _eval_digest(cfg, out)
    if not force and stage.is_current(digest, ["sparsification.csv"]):
        print(f"sparsify: up to date in {stage.dir}")
        return
    data = _require_data(cfg, out)
    test = _load_split(data, "test")
    ens = _load_members(cfg, out, cfg.members)
    student = _load_student(cfg, out)
    gts = np.stack([s.labels for s in test])
    t_pred, t_unc = _teacher_maps(ens, test, cfg.eval_batch)
    s_pred, s_unc = _forward_maps(student, test, cfg.eval_batch)
    t_curve = metrics.sparsification_curve(t_pred, gts, t_unc, cfg.fractions,
                                           cfg.classes)
    s_curve = metrics.sparsification_curve(s_pred, gts, s_unc, cfg.fractions,
                                           cfg.classes)
    stage.dir.mkdir(parents=True, exist_ok=True)
    rows = ["fraction,teacher_miou,student_miou"]
    for (f, tm), (_, sm) in zip(t_curve, s_curve):
        rows.append(f"{_fmt(f)},{_fmt(tm)},{_fmt(sm)}")
    (stage.dir / "sparsification.csv").write_text("\n".join(rows) + "\n",
                                                  encoding="utf-8")
    stage.commit(cfg, digest)
    print(f"sparsify: curve over {len(t_curve)} fractions in {stage.dir}")


def stage_ablate(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "ablate")
    pool = max(cfg.ablate_sizes)
    stage_train_teacher(cfg, out, force=False, count=pool)
    ens = _load_members(cfg, out, pool)
    data = _require_data(cfg, out)
    digest = _digest_bytes(
        ensemble.ensemble_hash(ens), _digest_tree(data.dir / "test").encode(),
        _fields_digest(cfg, ("ablate_sizes", "ablate_repeats", "seed")).encode())
    if not force and stage.is_current(digest, ["ablation.csv"]):
        print(f"ablate-members: up to date in {stage.dir}")
        return
    test = _load_split(data, "test")
    gts = np.stack([s.labels for s in test])

    draws = {}
    for r in range(cfg.ablate_repeats):
        rng = np.random.default_rng(cfg.ablate_seed(r))
        for m in cfg.ablate_sizes:
            draws[(m, r)] = sorted(rng.choice(pool, size=m, replace=False).tolist())
    accum = {key: (metrics.ConfusionMatrix(cfg.classes),
                   metrics.ClassUncertainty(cfg.classes))
             for key in draws}
    for start in range(0, len(test), cfg.eval_batch):
        chunk = test[start:start + cfg.eval_batch]
        images = model.images_to_batch([s.image for s in chunk])
        probs = [ensemble.member_probs(m, images) for m in ens.members]
        for key, chosen in draws.items():
            t = ensemble.aggregate_probs([probs[i] for i in chosen])
            cm, cu = accum[key]
            for b in range(len(chunk)):
                gt = gts[start + b]
                cm.update(t.pred_map[b].astype(np.int64), gt)
                cu.update(t.pred_map[b].astype(np.int64), t.uncertainty[b, 0])
    rows = ["members,repeat,miou,munc"]
    means = {}
    for (m, r), (cm, cu) in sorted(accum.items()):
        miou = metrics.iou(cm)[1]
        munc = cu.result()[1]
        rows.append(f"{m},{r},{_fmt(miou)},{_fmt(munc)}")
        means.setdefault(m, []).append((miou, munc))
    rows.append("members,mean,miou,munc")
    for m in sorted(means):
        vals = np.asarray(means[m])
        rows.append(f"{m},mean,{_fmt(vals[:, 0].mean())},{_fmt(vals[:, 1].mean())}")
    stage.dir.mkdir(parents=True, exist_ok=True)
    (stage.dir / "ablation.csv").write_text("\n".join(rows) + "\n",
                                            encoding="utf-8")
    stage.commit(cfg, digest)
    print(f"ablate-members: sizes {list(cfg.ablate_sizes)} x "
          f"{cfg.ablate_repeats} repeats in {stage.dir}")


def stage_bench(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    stage = Stage(out, "bench")
    data = _require_data(cfg, out)
    ens = _load_members(cfg, out, cfg.members)
    student = _load_student(cfg, out)
    test = _load_split(data, "test")
    image = model.images_to_batch([test[0].image])
    rep = metrics.bench_inference(student, ens, image, runs=cfg.bench_runs,
                                  warmup=cfg.bench_warmup)
    total, overhead = model.param_count(student)
    payload = {
        "runs": rep.runs, "warmup_excluded": rep.warmup,
        "baseline_ms": {"median": rep.baseline_ms[0], "std": rep.baseline_ms[1]},
        "teacher_ms": {"median": rep.teacher_ms[0], "std": rep.teacher_ms[1]},
        "student_ms": {"median": rep.student_ms[0], "std": rep.student_ms[1]},
        "teacher_over_student": rep.teacher_over_student,
        "student_over_baseline": rep.student_over_baseline,
        "student_params": total,
        "uncertainty_head_overhead": overhead,
        "members": len(ens),
    }
    stage.dir.mkdir(parents=True, exist_ok=True)
    (stage.dir / "bench.json").write_text(json.dumps(payload, indent=2) + "\n",
                                          encoding="utf-8")
    stage.commit(cfg, _eval_digest(cfg, out))
    print(f"bench: baseline {rep.baseline_ms[0]:.1f} ms, teacher "
          f"{rep.teacher_ms[0]:.1f} ms, student {rep.student_ms[0]:.1f} ms")


def stage_grad_check(cfg: ExperimentConfig, out: Path, force: bool) -> None:
    failures = 0
    for name, err, tol in verification.run_suite(seed=cfg.seed % (2 ** 31)):
        ok = err < tol
        failures += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:24s} {err:.3e} (tol {tol:.0e})")
    if failures:
        raise ValueError(f"{failures} gradient checks failed")


def _palette_image(labels: np.ndarray, palette) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    for c, color in enumerate(palette):
        lut[c] = np.round(np.asarray(color) * 255.0)
    lut[VOID] = (255, 255, 255)
    return lut[labels]


def stage_report(cfg: ExperimentConfig, out: Path, force: bool,
                 panels: int = 4) -> None:
    from . import netpbm
    stage = Stage(out, "report")
    eval_stage = Stage(out, "eval")
    sparsify_stage = Stage(out, "sparsify")
    eval_stage.require_current(_eval_digest(cfg, out), ["metrics.csv"])
    sparsify_stage.require_current(_eval_digest(cfg, out), ["sparsification.csv"])
    stage.dir.mkdir(parents=True, exist_ok=True)

    # Tables-style CSV: teacher vs student with difference rows
    t_rows = (eval_stage.dir / "teacher_classes.csv").read_text().splitlines()
    s_rows = (eval_stage.dir / "student_classes.csv").read_text().splitlines()
    merged = ["class,teacher_iou,student_iou,iou_diff,"
              "teacher_unc,student_unc,unc_diff"]
    for t_line, s_line in zip(t_rows[1:], s_rows[1:]):
        cls, t_iou, t_unc = t_line.split(",")
        _, s_iou, s_unc = s_line.split(",")
        iou_d = (f"{float(s_iou) - float(t_iou):.6f}"
                 if t_iou and s_iou else "")
        unc_d = (f"{float(s_unc) - float(t_unc):.6f}"
                 if t_unc and s_unc else "")
        merged.append(f"{cls},{t_iou},{s_iou},{iou_d},{t_unc},{s_unc},{unc_d}")
    (stage.dir / "comparison.csv").write_text("\n".join(merged) + "\n",
                                              encoding="utf-8")

    # Sparsification curve plot
    curve_text = (sparsify_stage.dir / "sparsification.csv").read_text()
    fracs, t_m, s_m = [], [], []
    for line in curve_text.splitlines()[1:]:
        f, tm, sm = line.split(",")
        fracs.append(float(f)); t_m.append(float(tm)); s_m.append(float(sm))
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([f * 100 for f in fracs], [m * 100 for m in t_m], "o-", label="teacher")
    ax.plot([f * 100 for f in fracs], [m * 100 for m in s_m], "s-", label="student")
    ax.set_xlabel("most-uncertain pixels removed [%]")
    ax.set_ylabel("mIoU [%]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(stage.dir / "sparsification.png", dpi=150)
    plt.close(fig)

    # qualitative panels: image, gt, prediction, accuracy map, uncertainty
    data = _require_data(cfg, out)
    test = _load_split(data, "test")[:panels]
    student = _load_student(cfg, out)
    palette = cfg.scene_config().palette
    panel_dir = stage.dir / "panels"
    panel_dir.mkdir(exist_ok=True)
    for s in test:
        pred, unc = _forward_maps(student, [s], 1)
        pred8 = pred[0].astype(np.uint8)
        netpbm.write_ppm(panel_dir / f"{s.id}_image.ppm",
                         np.clip(np.round(s.image * 255), 0, 255).astype(np.uint8))
        netpbm.write_ppm(panel_dir / f"{s.id}_gt.ppm",
                         _palette_image(s.labels, palette))
        netpbm.write_ppm(panel_dir / f"{s.id}_pred.ppm",
                         _palette_image(pred8, palette))
        netpbm.write_pgm(panel_dir / f"{s.id}_accuracy.pgm",
                         metrics.binary_accuracy_map(pred8, s.labels))
        netpbm.write_pgm(panel_dir / f"{s.id}_uncertainty.pgm",
                         np.clip(np.round(unc[0] * 255), 0, 255).astype(np.uint8))
    stage.commit(cfg, _eval_digest(cfg, out))
    print(f"report: comparison table, curve plot and {len(test)} panels in {stage.dir}")


# ---------------------------------------------------------------------------
# entry point

def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


_STAGES = {
    "gen-data": stage_gen_data,
    "train-teacher": stage_train_teacher,
    "distill-targets": stage_distill_targets,
    "train-student": stage_train_student,
    "eval": stage_eval,
    "sparsify": stage_sparsify,
    "ablate-members": stage_ablate,
    "bench": stage_bench,
    "grad-check": stage_grad_check,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uncdistill",
        description="ensemble uncertainty distillation pipeline")
    parser.add_argument("subcommand", choices=sorted(_STAGES))
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--out", type=Path, default=Path("runs"),
                        help="artifact root directory")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--members", type=int, default=None,
                        help="override ensemble size")
    parser.add_argument("--force", action="store_true",
                        help="re-run the stage even when inputs are unchanged")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config is not None:
        if not args.config.exists():
            raise MissingArtifact(f"config file {args.config} does not exist")
        cfg = load_config(args.config, cfg)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        apply_assignment(cfg, key, raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.members is not None:
        cfg.members = args.members
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        _STAGES[args.subcommand](cfg, args.out, args.force)
        return EXIT_OK
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except MissingArtifact as exc:
        return _fail("missing-artifact", exc, EXIT_MISSING)
    except (StageHashMismatch, ensemble.StaleCacheError) as exc:
        return _fail("hash-mismatch", exc, EXIT_STALE)
    except (ValueError, KeyError, OSError) as exc:
        return _fail("fault", exc, EXIT_FAULT)


def _fail(kind: str, exc: Exception, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
