"""Run configuration: a sectioned ``key = value`` INI file.

Every key has a default, so an empty file is a valid config. Tuples are
written comma-separated, booleans as ``true``/``false``. Relative paths are
resolved against the directory of the config file.
"""
from __future__ import annotations

import configparser
import copy
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from cyclet.augment import AugPolicy
from cyclet.cycle import CycleSchedule, TeacherPlan
from cyclet.data import DomainShift, SynthSpec
from cyclet.errors import ConfigError
from cyclet.models import ModelConfig
from cyclet.nncore.optim import LrSchedule


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclass
class DatasetSection:
    root: str = "data"
    num_classes: int = 10
    image_side: int = 48
    train_per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 20
    hue_shift: float = 30.0
    brightness_bias: float = -0.25
    noise_sigma: float = 0.08


@dataclass
class TeacherSection:
    resize_side: int = 64
    input_side: int = 56
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    width_multiplier: float = 1.0
    epochs_a: int = 10
    epochs_b: int = 10
    lr0: float = 1.5e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    phase_b: str = "pseudo"


@dataclass
class StudentSection:
    resize_side: int = 40
    input_side: int = 32
    width_multiplier: float = 1.0
    hidden_units: int = 128
    expansion: int = 4


@dataclass
class SsdaSection:
    enabled: bool = True
    tau_teacher: float = 0.9
    tau_student: float = 0.8


@dataclass
class AugmentSection:
    enabled: bool = True
    flip_threshold: float = 0.3
    strong_threshold: float = 0.7
    n: int = 2
    m: int = 5


@dataclass
class CycleSection:
    epochs: tuple[int, ...] = (10, 30, 10)
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_period: int = 20
    batch_size: int = 32
    weight_decay: float = 0.01


@dataclass
class EvalSection:
    C: float = 1.0
    iterations: int = 20
    warmup: int = 3


@dataclass
class AblateSection:
    taus: tuple[float, ...] = (0.0, 0.8, 0.85, 0.9)
    seeds: int = 5


_SECTIONS = {
    "run": RunSection,
    "dataset": DatasetSection,
    "teacher": TeacherSection,
    "student": StudentSection,
    "ssda": SsdaSection,
    "augment": AugmentSection,
    "cycle": CycleSection,
    "eval": EvalSection,
    "ablate": AblateSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    ssda: SsdaSection = field(default_factory=SsdaSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    cycle: CycleSection = field(default_factory=CycleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -------------------------------------------------------- derived objects

    @property
    def dataset_root(self) -> Path:
        return (self.base_dir / self.dataset.root).resolve()

    @property
    def out_dir(self) -> Path:
        return (self.base_dir / self.run.out).resolve()

    def synth_spec(self) -> SynthSpec:
        d = self.dataset
        return SynthSpec(
            num_classes=d.num_classes,
            image_side=d.image_side,
            train_per_class=d.train_per_class,
            val_per_class=d.val_per_class,
            test_per_class=d.test_per_class,
            domain_shift=DomainShift(d.hue_shift, d.brightness_bias, d.noise_sigma),
            seed=self.run.seed,
        )

    def teacher_model(self) -> ModelConfig:
        t = self.teacher
        return ModelConfig(
            arch="teacher",
            num_classes=self.dataset.num_classes,
            input_side=t.input_side,
            width_multiplier=t.width_multiplier,
            channels=t.channels,
            blocks_per_stage=t.blocks_per_stage,
        )

    def student_model(self) -> ModelConfig:
        s = self.student
        return ModelConfig(
            arch="student",
            num_classes=self.dataset.num_classes,
            input_side=s.input_side,
            width_multiplier=s.width_multiplier,
            hidden_units=s.hidden_units,
            expansion=s.expansion,
        )

    def teacher_plan(self) -> TeacherPlan:
        t = self.teacher
        return TeacherPlan(t.epochs_a, t.epochs_b, t.lr0, t.batch_size, t.weight_decay, t.resize_side, t.phase_b)

    def aug_policy(self) -> AugPolicy | None:
        a = self.augment
        if not a.enabled:
            return None
        return AugPolicy(a.flip_threshold, a.strong_threshold, a.n, a.m)

    def schedule(self) -> CycleSchedule:
        c = self.cycle
        return CycleSchedule.default(
            c.epochs,
            lr_schedule=LrSchedule(c.lr0, c.decay_factor, c.decay_period),
            batch_size=c.batch_size,
            weight_decay=c.weight_decay,
        )

    # -------------------------------------------------------- validation

    def validate(self, require_dataset: bool = False) -> "RunConfig":
        for name, side in (("teacher", self.teacher), ("student", self.student)):
            if side.input_side > side.resize_side:
                raise ConfigError(f"[{name}] input_side {side.input_side} exceeds resize_side {side.resize_side}")
        if self.dataset.num_classes < 2:
            raise ConfigError(f"[dataset] num_classes must be >= 2, got {self.dataset.num_classes}")
        for key in ("tau_teacher", "tau_student"):
            tau = getattr(self.ssda, key)
            if not 0.0 <= tau <= 1.0:
                raise ConfigError(f"[ssda] {key} must lie in [0, 1], got {tau}")
        if len(self.cycle.epochs) != 3:
            raise ConfigError(f"[cycle] epochs needs three stage lengths, got {self.cycle.epochs}")
        if self.eval.C <= 0 or self.eval.iterations < 1 or self.eval.warmup < 0:
            raise ConfigError("[eval] needs C > 0, iterations >= 1, warmup >= 0")
        if self.ablate.seeds < 1:
            raise ConfigError(f"[ablate] seeds must be >= 1, got {self.ablate.seeds}")
        self.teacher_model().validate()
        self.student_model().validate()
        self.aug_policy()
        self.schedule().validate()
        if self.teacher.phase_b not in ("pseudo", "combined"):
            raise ConfigError(f"[teacher] phase_b must be pseudo or combined, got {self.teacher.phase_b!r}")
        if require_dataset:
            for split in ("train", "val", "test"):
                p = self.dataset_root / f"{split}.csv"
                if not p.is_file():
                    raise ConfigError(f"dataset manifest {p} not found; run gen-data first")
        return self

    # -------------------------------------------------------- (de)serialisation

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def resolved(self) -> "RunConfig":
        """A copy whose paths are absolute, so a saved snapshot works from any directory."""
        cfg = copy.deepcopy(self)
        cfg.dataset.root = str(self.dataset_root)
        cfg.run.out = str(self.out_dir)
        return cfg

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.resolved().to_ini(), encoding="utf-8")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typing.get_origin(typ) is tuple:
            (inner, _) = typing.get_args(typ)
            return tuple(_parse(x, inner, where) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config(text: str, base_dir=".", source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in hints:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _parse(raw, hints[key], f"{source} [{name}] {key}")
        sections[name] = cls(**values)
    return RunConfig(**sections, base_dir=Path(base_dir))


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, path.parent, str(path))
