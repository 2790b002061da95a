"""End-to-end steps (data, teacher, curation, student) and the ablation sweeps.

The CLI subcommands and the ablation cells call the same functions, so a cell
is bit-identical to running ``train-student`` by hand with the same seed and
pseudo manifest. Cells are cached on disk under ``<out>/cells/<key>`` and
reused when their fingerprint (config snapshot + teacher checksum) matches.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cyclet import ssda
from cyclet.augment import AugPolicy
from cyclet.config import RunConfig
from cyclet.cycle import TrainLog, cycle_train, train_teacher_pipeline
from cyclet.data import DatasetManifest, ImageSet, center_batch, generate_synthetic, load_image_set, load_manifest
from cyclet.evaluation import metrics_from_probs
from cyclet.models import Network, build_student, build_teacher, load_checkpoint, predict_probs, save_checkpoint
from cyclet.nncore.optim import checksum

log = logging.getLogger(__name__)

ABLATIONS = ("threshold", "stages", "ssda-aug")


# ---------------------------------------------------------------- data


def ensure_dataset(cfg: RunConfig) -> Path:
    root = cfg.dataset_root
    if not all((root / f"{s}.csv").is_file() for s in ("train", "val", "test")):
        generate_synthetic(cfg.synth_spec(), root)
    return root


def manifests(cfg: RunConfig) -> dict[str, DatasetManifest]:
    root = cfg.dataset_root
    n = cfg.dataset.num_classes
    return {s: load_manifest(root / f"{s}.csv", n, s, check_images=False) for s in ("train", "val", "test")}


def test_set(cfg: RunConfig, resize_side: int) -> ImageSet:
    return load_image_set(manifests(cfg)["test"], resize_side)


def set_metrics(model: Network, images: ImageSet) -> tuple[float, float]:
    probs = predict_probs(model, center_batch(images.images, model.config.input_side))
    m = metrics_from_probs(probs, images.labels)
    return m.top1, m.top3


# ---------------------------------------------------------------- teacher


@dataclass
class TeacherResult:
    model: Network
    log: TrainLog
    report: ssda.CurationReport
    phase_a: dict = field(default_factory=dict)


def train_teacher(cfg: RunConfig, out_dir=None) -> TeacherResult:
    """Phase A, teacher-side curation at ``tau_teacher``, phase B; checkpoints both phases."""
    ms = manifests(cfg)
    plan = cfg.teacher_plan()
    teacher = build_teacher(cfg.teacher_model(), cfg.run.seed)
    evals = load_image_set(ms["test"], plan.resize_side)
    phase_a: dict = {}

    def on_phase(name: str, model: Network) -> None:
        if name == "phase-A":
            phase_a["top1"], phase_a["top3"] = set_metrics(model, evals)
            phase_a["checksum"] = checksum(model.parameters())
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / ("teacher_phaseA.ckpt" if name == "phase-A" else "teacher.ckpt"))

    teacher, trail, report = train_teacher_pipeline(
        teacher, ms["train"], ms["val"], cfg.ssda.tau_teacher, cfg.run.seed, plan, evals, on_phase
    )
    if out_dir is not None:
        out = Path(out_dir)
        if report.accepted == 0:
            save_checkpoint(teacher, out / "teacher.ckpt")
        trail.write_csv(out / "teacher_log.csv")
        top1, top3 = set_metrics(teacher, evals)
        summary = {"phase_a": phase_a, "final": {"top1": top1, "top3": top3},
                   "curation": report.as_dict(), "events": trail.events}
        (out / "teacher_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return TeacherResult(teacher, trail, report, phase_a)


def teacher_probs(cfg: RunConfig, teacher: Network) -> np.ndarray:
    return ssda.score_unlabeled(teacher, manifests(cfg)["val"], cfg.teacher.resize_side)


def pseudo_manifest(cfg: RunConfig, probs: np.ndarray, tau: float) -> tuple[DatasetManifest, ssda.CurationReport]:
    return ssda.curate_predictions(manifests(cfg)["val"], probs, tau, cfg.dataset.num_classes)


def pseudo_accuracy(cfg: RunConfig, pseudo: DatasetManifest) -> float:
    """Fraction of accepted pseudo-labels that match the hidden val labels (NaN if unknown)."""
    truth_path = cfg.dataset_root / "val_truth.csv"
    if not truth_path.is_file() or len(pseudo) == 0:
        return math.nan
    truth = {e.path: e.label for e in load_manifest(truth_path, check_images=False).entries}
    root = cfg.dataset_root.resolve()
    hits = 0
    for e in pseudo.entries:
        rel = (Path(pseudo.root) / e.path).resolve().relative_to(root).as_posix()
        hits += truth.get(rel) == e.label
    return hits / len(pseudo)


# ---------------------------------------------------------------- student


@dataclass
class StudentResult:
    model: Network
    log: TrainLog
    stage_metrics: list[tuple[float, float]]
    checksum: str

    @property
    def top1(self) -> float:
        return self.stage_metrics[-1][0]

    @property
    def top3(self) -> float:
        return self.stage_metrics[-1][1]


def student_policy(cfg: RunConfig, augment: bool | None) -> AugPolicy | None:
    """``None`` follows ``[augment] enabled``; True/False force the policy on or off."""
    if augment is None:
        return cfg.aug_policy()
    if not augment:
        return None
    a = cfg.augment
    return AugPolicy(a.flip_threshold, a.strong_threshold, a.n, a.m)


def train_student(cfg: RunConfig, seed: int, pseudo: DatasetManifest | None, augment: bool | None = None,
                  out_dir=None) -> StudentResult:
    """Cycle-train a fresh student on labeled (+ pseudo) data; test metrics at each stage boundary."""
    ms = manifests(cfg)
    train = ssda.merge(ms["train"], pseudo) if pseudo is not None else ms["train"]
    resize = cfg.student.resize_side
    data = load_image_set(train, resize)
    evals = load_image_set(ms["test"], resize)
    policy = student_policy(cfg, augment)
    student = build_student(cfg.student_model(), seed)
    stage_metrics: list[tuple[float, float]] = []

    def on_stage(i, stage, model):
        stage_metrics.append(set_metrics(model, evals))
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / f"student_stage{i + 1}.ckpt")

    student, trail = cycle_train(student, data, cfg.schedule(), seed, policy, evals, on_stage)
    result = StudentResult(student, trail, stage_metrics, checksum(student.parameters()))
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(student, out / "student.ckpt")
        trail.write_csv(out / "train_log.csv")
        summary = {
            "seed": seed,
            "train_examples": len(train),
            "pseudo_examples": 0 if pseudo is None else len(pseudo),
            "augment": policy is not None,
            "stage_metrics": [{"top1": a, "top3": b} for a, b in stage_metrics],
            "top1": result.top1,
            "top3": result.top3,
            "checksum": result.checksum,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class CellSpec:
    tau: float | None  # None trains on labeled data only
    augment: bool
    seed: int

    @property
    def key(self) -> str:
        data = "nossda" if self.tau is None else f"tau{self.tau:g}"
        return f"{data}_{'aug' if self.augment else 'noaug'}_s{self.seed}"


@dataclass
class CellResult:
    key: str
    tau: float | None
    augment: bool
    seed: int
    stage_metrics: list[tuple[float, float]]
    pseudo_count: int
    pseudo_accuracy: float
    checksum: str
    run_dir: str

    @property
    def top1(self) -> float:
        return self.stage_metrics[-1][0]

    @property
    def top3(self) -> float:
        return self.stage_metrics[-1][1]


@dataclass
class ExperimentReport:
    name: str
    columns: list[str]
    rows: list[dict]
    config_snapshot: str
    cells: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"ablate_{self.name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in self.columns})
        with open(out / f"plot_{self.name}.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "top1", "top1_err", "top3", "top3_err"])
            for r in self.rows:
                w.writerow([r[self.columns[0]], _fmt(r["top1_mean"]), _fmt(r["top1_std"]),
                            _fmt(r["top3_mean"]), _fmt(r["top3_std"])])
        meta = {"name": self.name, "cells": self.cells, "config": self.config_snapshot}
        (out / f"ablate_{self.name}.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        return path

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.columns) + " |", "|" + "---|" * len(self.columns)]
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(r[c]) for c in self.columns) + " |")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def _mean_std(xs: list[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


class Ablation:
    """Runs (and caches) student cells against one fixed teacher."""

    def __init__(self, cfg: RunConfig, teacher: Network, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.probs = teacher_probs(cfg, teacher)
        self.seeds = [cfg.run.seed + i for i in range(cfg.ablate.seeds)]
        self.snapshot = cfg.resolved().to_ini()
        h = hashlib.sha256(checksum(teacher.parameters()).encode())
        for name in ("dataset", "student", "augment", "cycle"):
            h.update(name.encode())
            h.update(json.dumps(getattr(cfg, name).__dict__, sort_keys=True, default=str).encode())
        self.fingerprint = h.hexdigest()

    @property
    def default_tau(self) -> float | None:
        return self.cfg.ssda.tau_student if self.cfg.ssda.enabled else None

    def pseudo(self, tau: float | None) -> DatasetManifest | None:
        return None if tau is None else pseudo_manifest(self.cfg, self.probs, tau)[0]

    def cell_config(self, spec: CellSpec) -> RunConfig:
        """The config a standalone ``pseudo-label`` + ``train-student`` run of this cell would use."""
        cfg = copy.deepcopy(self.cfg)
        cfg.run.seed = spec.seed
        cfg.augment.enabled = spec.augment
        cfg.ssda.enabled = spec.tau is not None
        if spec.tau is not None:
            cfg.ssda.tau_student = spec.tau
        return cfg

    def cell(self, spec: CellSpec) -> CellResult:
        run_dir = self.out / "cells" / spec.key
        record = run_dir / "cell.json"
        if record.is_file():
            d = json.loads(record.read_text(encoding="utf-8"))
            if d.get("fingerprint") == self.fingerprint:
                d.pop("fingerprint")
                d["stage_metrics"] = [tuple(x) for x in d["stage_metrics"]]
                return CellResult(**d)
        pseudo = self.pseudo(spec.tau)
        log.info("training cell %s", spec.key)
        run_dir.mkdir(parents=True, exist_ok=True)
        cell_cfg = self.cell_config(spec)
        cell_cfg.save(run_dir / "config.ini")
        res = train_student(cell_cfg, spec.seed, pseudo, None, run_dir)
        out = CellResult(
            spec.key, spec.tau, spec.augment, spec.seed, res.stage_metrics,
            0 if pseudo is None else len(pseudo),
            math.nan if pseudo is None else pseudo_accuracy(self.cfg, pseudo),
            res.checksum, str(run_dir),
        )
        d = dict(out.__dict__, fingerprint=self.fingerprint)
        record.write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
        return out

    def cells(self, tau: float | None, augment: bool) -> list[CellResult]:
        return [self.cell(CellSpec(tau, augment, s)) for s in self.seeds]

    def _row(self, label_key: str, label, cells: list[CellResult], stage: int = -1, **extra) -> dict:
        t1, s1 = _mean_std([c.stage_metrics[stage][0] for c in cells])
        t3, s3 = _mean_std([c.stage_metrics[stage][1] for c in cells])
        return {label_key: label, **extra, "top1_mean": t1, "top1_std": s1, "top3_mean": t3, "top3_std": s3,
                "n_seeds": len(cells)}

    def threshold(self, taus=None) -> ExperimentReport:
        taus = self.cfg.ablate.taus if taus is None else taus
        aug = self.cfg.augment.enabled
        rows, keys = [], []
        for tau in taus:
            cs = self.cells(tau, aug)
            keys += [c.key for c in cs]
            rows.append(self._row("tau", tau, cs, accepted=cs[0].pseudo_count, pseudo_acc=cs[0].pseudo_accuracy))
        cols = ["tau", "accepted", "pseudo_acc", "top1_mean", "top1_std", "top3_mean", "top3_std", "n_seeds"]
        return ExperimentReport("threshold", cols, rows, self.snapshot, keys)

    def stages(self) -> ExperimentReport:
        cs = self.cells(self.default_tau, self.cfg.augment.enabled)
        labels = ("S1", "S1+S2", "S1+S2+S3")
        rows = [self._row("stages", labels[k], cs, stage=k) for k in range(len(labels))]
        cols = ["stages", "top1_mean", "top1_std", "top3_mean", "top3_std", "n_seeds"]
        return ExperimentReport("stages", cols, rows, self.snapshot, [c.key for c in cs])

    def ssda_aug(self) -> ExperimentReport:
        tau = self.cfg.ssda.tau_student
        rows, keys = [], []
        for use_ssda, use_aug in ((False, False), (True, False), (False, True), (True, True)):
            cs = self.cells(tau if use_ssda else None, use_aug)
            keys += [c.key for c in cs]
            rows.append(self._row("method", _method_name(use_ssda, use_aug), cs,
                                  ssda=use_ssda, augment=use_aug))
        cols = ["method", "ssda", "augment", "top1_mean", "top1_std", "top3_mean", "top3_std", "n_seeds"]
        return ExperimentReport("ssda-aug", cols, rows, self.snapshot, keys)

    def run(self, which: str) -> ExperimentReport:
        if which == "threshold":
            return self.threshold()
        if which == "stages":
            return self.stages()
        if which == "ssda-aug":
            return self.ssda_aug()
        raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")


def _method_name(use_ssda: bool, use_aug: bool) -> str:
    parts = [p for p, on in (("SSDA", use_ssda), ("Aug", use_aug)) if on]
    return "+".join(parts) if parts else "baseline"


def load_or_train_teacher(cfg: RunConfig, out_dir, checkpoint=None) -> Network:
    if checkpoint is not None:
        return load_checkpoint(checkpoint)
    ckpt = Path(out_dir) / "teacher" / "teacher.ckpt"
    snap = Path(out_dir) / "teacher" / "config.ini"
    if ckpt.is_file() and snap.is_file() and snap.read_text(encoding="utf-8") == cfg.resolved().to_ini():
        return load_checkpoint(ckpt)
    model = train_teacher(cfg, ckpt.parent).model
    cfg.save(snap)
    return model
