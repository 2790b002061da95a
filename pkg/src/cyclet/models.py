"""Teacher and student networks, their backbone/head split, and checkpoints.

The teacher is a residual CNN whose head is a single dense layer. The student
is a stack of inverted-residual blocks built from depthwise separable
convolutions, finished by a two-layer dense head. Everything up to and
including global average pooling belongs to the ``backbone`` group; the dense
layers after it form the ``head`` group.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"CYCLETCK"
    version    u32       1
    cfg_len    u32       length of the JSON-encoded ModelConfig
    cfg        bytes     UTF-8 JSON, sorted keys
    n_params   u32
    n_params records:
        name_len u16, name (UTF-8)
        group_len u8, group (UTF-8, "backbone" or "head")
        ndim u8, dims u32 * ndim
        data     float32 * prod(dims), little-endian, C order
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from cyclet.errors import ConfigError, DataError, ShapeError
from cyclet.nncore import ops
from cyclet.nncore.optim import ParamGroup
from cyclet.nncore.tensor import DTYPE, Tensor

CHECKPOINT_MAGIC = b"CYCLETCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture knobs. ``channels``/``blocks_per_stage`` shape the teacher,
    ``stem_channels``/``block_channels``/``last_channels``/``hidden_units`` the
    student; ``width_multiplier`` scales every conv width of either."""

    arch: str = "student"
    num_classes: int = 10
    input_side: int = 32
    width_multiplier: float = 1.0
    hidden_units: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    stem_channels: int = 16
    block_channels: tuple[int, ...] = (16, 24, 24, 32, 32)
    block_strides: tuple[int, ...] = (1, 2, 1, 2, 1)
    expansion: int = 4
    last_channels: int = 128

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.block_strides = tuple(int(s) for s in self.block_strides)

    def validate(self) -> None:
        if self.arch not in ("teacher", "student"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_side < 1 or self.hidden_units < 1 or self.width_multiplier <= 0:
            raise ConfigError("input_side, hidden_units and width_multiplier must be positive")
        if len(self.block_channels) != len(self.block_strides):
            raise ConfigError("block_channels and block_strides must have equal length")
        # strided "same" convs round up; only the teacher's 2x2 max-pool needs an even side
        stride = self.total_stride()
        if self.input_side < stride:
            raise ConfigError(f"input_side {self.input_side} is smaller than the {self.arch} total stride {stride}")
        if self.arch == "teacher" and self.input_side % 2:
            raise ConfigError(f"teacher input_side must be even for the stem max-pool, got {self.input_side}")

    def total_stride(self) -> int:
        if self.arch == "teacher":
            return 2 * 2 ** (len(self.channels) - 1)
        return 2 * math.prod(self.block_strides)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


def _scaled(c: int, mult: float) -> int:
    return max(4, int(round(c * mult)))


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class _Layer:
    def params(self) -> list[Tensor]:
        return [v for v in vars(self).values() if isinstance(v, Tensor)]


class Dense(_Layer):
    def __init__(self, name: str, din: int, dout: int, rng):
        self.w = Tensor(_he_uniform(rng, (din, dout), din), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(dout, DTYPE), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class Conv(_Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, rng):
        self.stride = stride
        self.w = Tensor(_he_uniform(rng, (k, k, cin, cout), k * k * cin), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, DTYPE), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding="same")


class DepthwiseConv(_Layer):
    def __init__(self, name: str, c: int, k: int, stride: int, rng):
        self.stride = stride
        self.w = Tensor(_he_uniform(rng, (k, k, c), k * k), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(c, DTYPE), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.w, self.b, stride=self.stride, padding="same")


class PointwiseConv(_Layer):
    def __init__(self, name: str, cin: int, cout: int, rng):
        self.w = Tensor(_he_uniform(rng, (cin, cout), cin), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, DTYPE), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pointwise_conv2d(x, self.w, self.b)


class ResidualBlock(_Layer):
    """Two 3x3 convs plus an identity or strided 1x1 projection shortcut."""

    def __init__(self, name: str, cin: int, cout: int, stride: int, rng):
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, stride, rng)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, 1, rng)
        self.proj = Conv(f"{name}.proj", cin, cout, 1, stride, rng) if (stride != 1 or cin != cout) else None

    def params(self):
        layers = [self.conv1, self.conv2] + ([self.proj] if self.proj else [])
        return [p for layer in layers for p in layer.params()]

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        short = self.proj(x) if self.proj is not None else x
        return ops.relu(ops.add(y, short))


class InvertedResidual(_Layer):
    """Expand (1x1) -> depthwise 3x3 -> linear project (1x1), with a skip when shapes allow."""

    def __init__(self, name: str, cin: int, cout: int, stride: int, expansion: int, rng):
        hidden = cin * expansion
        self.expand = PointwiseConv(f"{name}.expand", cin, hidden, rng)
        self.dw = DepthwiseConv(f"{name}.dw", hidden, 3, stride, rng)
        self.project = PointwiseConv(f"{name}.project", hidden, cout, rng)
        self.skip = stride == 1 and cin == cout

    def params(self):
        return self.expand.params() + self.dw.params() + self.project.params()

    def __call__(self, x: Tensor) -> Tensor:
        y = self.project(ops.relu(self.dw(ops.relu(self.expand(x)))))
        return ops.add(x, y) if self.skip else y


class Network:
    """Shared plumbing: parameter groups, freezing, forward to logits."""

    config: ModelConfig
    backbone_layers: list
    head_layers: list

    def _make_groups(self) -> None:
        bb = [p for layer in self.backbone_layers for p in layer.params()]
        hd = [p for layer in self.head_layers for p in layer.params()]
        self.groups = [ParamGroup("backbone", bb), ParamGroup("head", hd)]

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise ConfigError(f"model has no parameter group {name!r}")

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def group_of(self) -> dict[str, str]:
        return {p.name: g.name for g in self.groups for p in g.params}

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - {g.name for g in self.groups}
        if unknown:
            raise ConfigError(f"unknown parameter group(s) {sorted(unknown)}")
        for g in self.groups:
            g.trainable = g.name in names

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def head(self, f: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1:] != (self.config.input_side, self.config.input_side, 3):
            raise ShapeError(
                f"{self.config.arch}.forward",
                f"expected (N, {self.config.input_side}, {self.config.input_side}, 3), got {x.shape}",
            )
        return self.head(self.features(x))

    __call__ = forward


class TeacherNet(Network):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        widths = [_scaled(c, config.width_multiplier) for c in config.channels]
        self.stem = Conv("backbone.stem", 3, widths[0], 3, 1, rng)
        self.blocks = []
        cin = widths[0]
        for si, c in enumerate(widths):
            for bi in range(config.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(ResidualBlock(f"backbone.s{si}b{bi}", cin, c, stride, rng))
                cin = c
        self.fc = Dense("head.fc", cin, config.num_classes, rng)
        self.backbone_layers = [self.stem, *self.blocks]
        self.head_layers = [self.fc]
        self._make_groups()

    def features(self, x):
        y = ops.max_pool2d(ops.relu(self.stem(x)), 2)
        for block in self.blocks:
            y = block(y)
        return ops.global_avg_pool(y)

    def head(self, f):
        return self.fc(f)


class StudentNet(Network):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        wm = config.width_multiplier
        stem_c = _scaled(config.stem_channels, wm)
        self.stem = Conv("backbone.stem", 3, stem_c, 3, 2, rng)
        self.blocks = []
        cin = stem_c
        for i, (c, s) in enumerate(zip(config.block_channels, config.block_strides)):
            cout = _scaled(c, wm)
            self.blocks.append(InvertedResidual(f"backbone.ir{i}", cin, cout, s, config.expansion, rng))
            cin = cout
        last = _scaled(config.last_channels, wm)
        self.last = PointwiseConv("backbone.last", cin, last, rng)
        self.fc1 = Dense("head.fc1", last, config.hidden_units, rng)
        self.fc2 = Dense("head.fc2", config.hidden_units, config.num_classes, rng)
        self.backbone_layers = [self.stem, *self.blocks, self.last]
        self.head_layers = [self.fc1, self.fc2]
        self._make_groups()

    def features(self, x):
        y = ops.relu(self.stem(x))
        for block in self.blocks:
            y = block(y)
        return ops.global_avg_pool(ops.relu(self.last(y)))

    def head(self, f):
        return self.fc2(ops.relu(self.fc1(f)))


def build_teacher(config: ModelConfig, seed: int) -> TeacherNet:
    config = ModelConfig.from_dict({**asdict(config), "arch": "teacher"})
    config.validate()
    return TeacherNet(config, np.random.default_rng(seed))


def build_student(config: ModelConfig, seed: int) -> StudentNet:
    config = ModelConfig.from_dict({**asdict(config), "arch": "student"})
    config.validate()
    return StudentNet(config, np.random.default_rng(seed))


def build_model(config: ModelConfig, seed: int) -> Network:
    return build_teacher(config, seed) if config.arch == "teacher" else build_student(config, seed)


def predict_probs(model: Network, batch, chunk: int = 128) -> np.ndarray:
    """Softmax class probabilities for a batch of normalized images (N, S, S, 3)."""
    x = np.asarray(batch, dtype=DTYPE)
    side = model.config.input_side
    if x.ndim != 4 or x.shape[1:] != (side, side, 3):
        raise ShapeError("predict_probs", f"expected images of shape (N, {side}, {side}, 3), got {x.shape}")
    rows = []
    for start in range(0, len(x), chunk):
        logits = model(Tensor(x[start:start + chunk]))
        rows.append(ops.softmax(logits).data)
    if not rows:
        return np.zeros((0, model.config.num_classes), DTYPE)
    return np.concatenate(rows, axis=0)


def save_checkpoint(model: Network, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config.to_json().encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    groups = model.group_of()
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for p in params:
        name, group = p.name.encode(), groups[p.name].encode()
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack("<B", len(group)) + group)
        out.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    path.write_bytes(b"".join(out))


def load_checkpoint(path) -> Network:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e.strerror}", path) from e
    if buf[:8] != CHECKPOINT_MAGIC:
        raise DataError("not a cyclet checkpoint (bad magic)", path)
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError, TypeError) as e:
        raise DataError(f"corrupt checkpoint: {e}", path) from None


def _parse_checkpoint(buf: bytes, path: Path) -> Network:
    version, cfg_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}", path)
    off = 16
    config = ModelConfig.from_dict(json.loads(buf[off:off + cfg_len].decode()))
    off += cfg_len
    model = build_model(config, seed=0)
    named = model.named_parameters()
    groups = model.group_of()
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if n != len(named):
        raise DataError(f"checkpoint has {n} params, architecture expects {len(named)}", path)
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (lg,) = struct.unpack_from("<B", buf, off)
        group = buf[off + 1:off + 1 + lg].decode()
        off += 1 + lg
        (nd,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 1)
        off += 1 + 4 * nd
        count = math.prod(shape)
        if name not in named or named[name].shape != tuple(shape) or groups[name] != group:
            raise DataError(f"checkpoint record {name!r} ({group}, {shape}) does not match architecture", path)
        named[name].data[...] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes after the last parameter record", path)
    return model


__all__ = [
    "ModelConfig", "TeacherNet", "StudentNet", "Network", "build_teacher", "build_student", "build_model",
    "predict_probs", "save_checkpoint", "load_checkpoint",
]
