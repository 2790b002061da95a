"""Three-stage cycle training and the teacher's two-phase fine-tuning.

Stages run back to back over one global epoch counter, so the LR staircase
never restarts at a stage boundary. One AdamW state is shared by all stages:
moments of parameters that stay trainable carry over, and parameters that are
unfrozen for the first time start from zero moments.

All randomness is keyed, never drawn from shared state: the epoch permutation
by (seed, epoch) and each example's crop and augmentation by
(seed, epoch, example index). Batch preparation may therefore fan out over
``CYCLET_THREADS`` workers without changing a single bit of the result.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from cyclet import augment as aug
from cyclet import ssda
from cyclet.data import DatasetManifest, ImageSet, center_batch, crop, example_rng, load_image_set, normalize
from cyclet.errors import ConfigError, DataError
from cyclet.evaluation import metrics_from_probs
from cyclet.models import Network, predict_probs
from cyclet.nncore import ops
from cyclet.nncore.optim import GROUP_NAMES, LrSchedule, OptimState, adamw_step, lr_at
from cyclet.nncore.tensor import Tape, Tensor

log = logging.getLogger(__name__)

STAGE_GROUPS = {
    "Exploitation": ("head",),
    "Exploration": ("backbone", "head"),
    "Stabilization": ("head",),
}
_SHUFFLE_STREAM = 0x5EED


@dataclass
class StageConfig:
    name: str
    epochs: int
    trainable_groups: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.trainable_groups:
            self.trainable_groups = STAGE_GROUPS.get(self.name, ())
        self.trainable_groups = tuple(self.trainable_groups)
        if self.epochs < 1:
            raise ConfigError(f"stage {self.name!r} needs a positive epoch count, got {self.epochs}")


@dataclass
class CycleSchedule:
    stages: list[StageConfig]
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 32
    weight_decay: float = 0.01

    @classmethod
    def default(cls, epochs=(10, 30, 10), **kw) -> "CycleSchedule":
        names = ("Exploitation", "Exploration", "Stabilization")
        return cls([StageConfig(n, e) for n, e in zip(names, epochs)], **kw)

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("a cycle schedule needs at least one stage")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        for s in self.stages:
            expected = STAGE_GROUPS.get(s.name)
            if expected is None:
                raise ConfigError(f"unknown stage {s.name!r}; expected one of {sorted(STAGE_GROUPS)}")
            if set(s.trainable_groups) != set(expected):
                raise ConfigError(f"stage {s.name} must train exactly {expected}, got {s.trainable_groups}")

    def prefix(self, k: int) -> "CycleSchedule":
        return replace(self, stages=list(self.stages[:k]))

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def boundaries(self) -> list[int]:
        """Global epoch at which each stage after the first begins."""
        out, acc = [], 0
        for s in self.stages[:-1]:
            acc += s.epochs
            out.append(acc)
        return out


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    lr: float
    loss: float
    top1: float
    top3: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    grad_params: dict[str, set[str]] = field(default_factory=dict)

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.events.extend(other.events)
        for k, v in other.grad_params.items():
            self.grad_params.setdefault(k, set()).update(v)

    @property
    def final(self) -> dict:
        if not self.records:
            return {}
        r = self.records[-1]
        return {"epochs": len(self.records), "loss": r.loss, "top1": r.top1, "top3": r.top3}

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "stage", "lr", "loss", "top1", "top3"])
            for r in self.records:
                w.writerow([r.epoch, r.stage, repr(r.lr), f"{r.loss:.6f}", f"{r.top1:.6f}", f"{r.top3:.6f}"])


# ---------------------------------------------------------------- batching


def data_threads() -> int:
    try:
        return max(1, int(os.environ.get("CYCLET_THREADS", "1")))
    except ValueError:
        return 1


class BatchMaker:
    """Random-crop (+ optional augmentation) mini-batches from an in-memory ImageSet."""

    def __init__(self, data: ImageSet, crop_side: int, seed: int, policy: aug.AugPolicy | None = None, threads: int | None = None):
        if len(data) == 0:
            raise DataError("training set is empty")
        if (data.labels < 0).any():
            raise DataError("training set contains unlabeled examples")
        if crop_side > data.images.shape[1]:
            raise DataError(f"crop side {crop_side} larger than stored side {data.images.shape[1]}")
        self.data = data
        self.crop_side = crop_side
        self.seed = seed
        self.policy = policy
        self.threads = threads or data_threads()

    def example(self, epoch: int, index: int) -> np.ndarray:
        rng = example_rng(self.seed, epoch, index)
        img = crop(self.data.images[index], self.crop_side, "random", rng)
        if self.policy is not None:
            img = aug.apply(img, aug.decide(self.policy, rng))
        return normalize(img)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch, _SHUFFLE_STREAM]).permutation(len(self.data))

    def batches(self, epoch: int, batch_size: int):
        order = self.order(epoch)
        pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        try:
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                if pool is not None:
                    xs = list(pool.map(lambda i: self.example(epoch, int(i)), idx))
                else:
                    xs = [self.example(epoch, int(i)) for i in idx]
                yield np.stack(xs), self.data.labels[idx]
        finally:
            if pool is not None:
                pool.shutdown()


# ---------------------------------------------------------------- training


def _evaluate_set(model: Network, eval_set: ImageSet | None) -> tuple[float, float]:
    if eval_set is None or len(eval_set) == 0:
        return math.nan, math.nan
    probs = predict_probs(model, center_batch(eval_set.images, model.config.input_side))
    m = metrics_from_probs(probs, eval_set.labels, ks=(1, min(3, probs.shape[1])))
    return m.top1, m.top3


def run_epochs(
    model: Network,
    batches: BatchMaker,
    name: str,
    trainable: tuple[str, ...],
    epochs: int,
    optim: OptimState,
    lr_schedule: LrSchedule,
    epoch_offset: int,
    batch_size: int,
    eval_set: ImageSet | None = None,
) -> TrainLog:
    unknown = set(trainable) - set(GROUP_NAMES)
    if unknown:
        raise ConfigError(f"stage {name!r} names unknown parameter group(s) {sorted(unknown)}")
    model.set_trainable(trainable)
    params = [p for g in model.groups if g.trainable for p in g.params]
    all_params = model.parameters()
    out = TrainLog()
    touched = out.grad_params.setdefault(name, set())
    for local in range(epochs):
        epoch = epoch_offset + local
        lr = lr_at(lr_schedule, epoch)
        total, seen = 0.0, 0
        for x, y in batches.batches(epoch, batch_size):
            for p in all_params:
                p.grad = None
            with Tape() as tape:
                loss = ops.softmax_cross_entropy(model(Tensor(x)), y)
            grads = tape.backward(loss, params)
            touched.update(p.name for p in all_params if id(p) in grads)
            adamw_step(model.groups, optim, lr)
            total += float(loss.data) * len(y)
            seen += len(y)
        top1, top3 = _evaluate_set(model, eval_set)
        out.records.append(EpochRecord(epoch, name, lr, total / seen, top1, top3))
        log.debug("epoch %d [%s] lr=%.2e loss=%.4f top1=%.4f", epoch, name, lr, total / seen, top1)
    return out


def make_optimizer(schedule: CycleSchedule) -> OptimState:
    return OptimState(lr0=schedule.lr_schedule.lr0, weight_decay=schedule.weight_decay)


def run_stage(
    model: Network,
    data: ImageSet,
    stage: StageConfig,
    optim: OptimState,
    lr_schedule: LrSchedule,
    epoch_offset: int,
    seed: int,
    batch_size: int = 32,
    policy: aug.AugPolicy | None = None,
    eval_set: ImageSet | None = None,
) -> tuple[Network, TrainLog]:
    """Train ``stage.epochs`` epochs with only ``stage.trainable_groups`` updated."""
    batches = BatchMaker(data, model.config.input_side, seed, policy)
    part = run_epochs(model, batches, stage.name, stage.trainable_groups, stage.epochs, optim,
                      lr_schedule, epoch_offset, batch_size, eval_set)
    return model, part


def cycle_train(
    student: Network,
    data: ImageSet,
    schedule: CycleSchedule,
    seed: int,
    policy: aug.AugPolicy | None = None,
    eval_set: ImageSet | None = None,
    on_stage_end: Optional[Callable[[int, StageConfig, Network], None]] = None,
) -> tuple[Network, TrainLog]:
    schedule.validate()
    optim = make_optimizer(schedule)
    trail = TrainLog()
    offset = 0
    for i, stage in enumerate(schedule.stages):
        _, part = run_stage(student, data, stage, optim, schedule.lr_schedule, offset, seed,
                            schedule.batch_size, policy, eval_set)
        trail.extend(part)
        offset += stage.epochs
        if on_stage_end is not None:
            on_stage_end(i, stage, student)
    return student, trail


@dataclass
class TeacherPlan:
    epochs_a: int = 10
    epochs_b: int = 10
    lr0: float = 1.5e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    resize_side: int = 40
    phase_b: str = "pseudo"  # "pseudo" | "combined"

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr0, 0.1, 20)


def train_teacher_pipeline(
    teacher: Network,
    labeled: DatasetManifest,
    unlabeled: DatasetManifest,
    tau_teacher: float,
    seed: int,
    plan: TeacherPlan | None = None,
    eval_set: ImageSet | None = None,
    on_phase_end: Optional[Callable[[str, Network], None]] = None,
) -> tuple[Network, TrainLog, ssda.CurationReport]:
    """Phase A on labeled data, curate at ``tau_teacher``, phase B on the pseudo set.

    Phase B is skipped (and the skip logged as an event) when nothing passes the
    threshold.
    """
    plan = plan or TeacherPlan()
    if plan.phase_b not in ("pseudo", "combined"):
        raise ConfigError(f"phase_b must be 'pseudo' or 'combined', got {plan.phase_b!r}")
    both = ("backbone", "head")
    optim = OptimState(lr0=plan.lr0, weight_decay=plan.weight_decay)
    sched = plan.lr_schedule()
    trail = TrainLog()

    train_set = load_image_set(labeled, plan.resize_side)
    batches = BatchMaker(train_set, teacher.config.input_side, seed)
    trail.extend(run_epochs(teacher, batches, "phase-A", both, plan.epochs_a, optim, sched, 0,
                            plan.batch_size, eval_set))
    if on_phase_end is not None:
        on_phase_end("phase-A", teacher)

    pseudo, report = ssda.curate(teacher, unlabeled, tau_teacher, plan.resize_side)
    if report.accepted == 0:
        msg = f"phase-B skipped: no pseudo-label reached tau={tau_teacher} ({report.total} candidates)"
        log.warning(msg)
        trail.events.append(msg)
        return teacher, trail, report

    manifest = ssda.merge(labeled, pseudo) if plan.phase_b == "combined" else pseudo
    b_set = load_image_set(manifest, plan.resize_side)
    batches = BatchMaker(b_set, teacher.config.input_side, seed)
    trail.extend(run_epochs(teacher, batches, "phase-B", both, plan.epochs_b, optim, sched, plan.epochs_a,
                            plan.batch_size, eval_set))
    if on_phase_end is not None:
        on_phase_end("phase-B", teacher)
    return teacher, trail, report
