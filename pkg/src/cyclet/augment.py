"""Weak/strong augmentation policy.

A uniform draw ``p`` picks the branch: horizontal flip below ``flip_threshold``,
RandAugment above ``strong_threshold``, the untouched image otherwise.
RandAugment draws ``n`` ops with replacement from five ops and applies them in
draw order at the shared magnitude ``m``.

Magnitude mapping (m in [0, 10]):

* Brightness / Color / Contrast: factor ``1 +/- 0.9 * m / 10`` (sign drawn),
  realised as ``blend(degenerate, img, factor)`` with degenerate = black,
  per-pixel grey, per-channel mean image respectively.
* Rotate: ``+/- 30 * m / 10`` degrees, nearest neighbour, corners filled with
  the channel-mean colour.
* AutoContrast: per-channel stretch to [0, 255]; ignores ``m``.

Every derived parameter is then clamped (factors to [0.1, 1.9], angles to
+/-30 degrees) so that no op can wreck the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cyclet.errors import ConfigError

OP_SET = ("AutoContrast", "Brightness", "Color", "Contrast", "Rotate")
FACTOR_RANGE = (0.1, 1.9)
MAX_ANGLE = 30.0
MAX_FACTOR_DELTA = 0.9


@dataclass
class AugPolicy:
    flip_threshold: float = 0.3
    strong_threshold: float = 0.7
    n: int = 2
    m: int = 5
    op_set: tuple[str, ...] = OP_SET

    def __post_init__(self):
        self.op_set = tuple(self.op_set)
        if not 0 <= self.flip_threshold <= self.strong_threshold <= 1:
            raise ConfigError(
                f"need 0 <= flip_threshold <= strong_threshold <= 1, got {self.flip_threshold}, {self.strong_threshold}"
            )
        if self.n < 1:
            raise ConfigError(f"RandAug n must be >= 1, got {self.n}")
        if not 0 <= self.m <= 10:
            raise ConfigError(f"RandAug m must lie in [0, 10], got {self.m}")
        unknown = set(self.op_set) - set(OP_SET)
        if unknown or not self.op_set:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")


@dataclass(frozen=True)
class AugDecision:
    p: float
    branch: str  # "flip" | "identity" | "randaug"
    ops: tuple[tuple[str, float | None], ...] = field(default=())


def _clamp_factor(f: float) -> float:
    return min(max(f, FACTOR_RANGE[0]), FACTOR_RANGE[1])


def _clamp_angle(a: float) -> float:
    return min(max(a, -MAX_ANGLE), MAX_ANGLE)


def sample_ops(n: int, m: int, rng: np.random.Generator, op_set=OP_SET) -> tuple[tuple[str, float | None], ...]:
    ops = []
    for _ in range(n):
        name = op_set[int(rng.integers(len(op_set)))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if name == "AutoContrast":
            param = None
        elif name == "Rotate":
            param = _clamp_angle(sign * MAX_ANGLE * m / 10)
        else:
            param = _clamp_factor(1.0 + sign * MAX_FACTOR_DELTA * m / 10)
        ops.append((name, param))
    return tuple(ops)


def decide(policy: AugPolicy, rng: np.random.Generator) -> AugDecision:
    p = float(rng.random())
    return decision_for(policy, p, rng)


def decision_for(policy: AugPolicy, p: float, rng: np.random.Generator | None = None) -> AugDecision:
    """Branch for a given draw ``p``; RandAug parameters are sampled from ``rng``."""
    if p < policy.flip_threshold:
        return AugDecision(p, "flip")
    if p > policy.strong_threshold:
        if rng is None:
            raise ValueError("the RandAug branch needs an rng to sample its ops")
        return AugDecision(p, "randaug", sample_ops(policy.n, policy.m, rng, policy.op_set))
    return AugDecision(p, "identity")


# ---------------------------------------------------------------- ops


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    d = np.asarray(degenerate, dtype=np.float64)
    return _to_u8(d + factor * (img.astype(np.float64) - d))


def auto_contrast(img: np.ndarray) -> np.ndarray:
    x = img.astype(np.float64)
    lo = x.min(axis=(0, 1))
    hi = x.max(axis=(0, 1))
    span = hi - lo
    scale = np.where(span > 0, 255.0 / np.where(span > 0, span, 1), 1.0)
    offset = np.where(span > 0, lo, 0.0)
    return _to_u8((x - offset) * scale)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return blend(np.zeros_like(img, dtype=np.float64), img, factor)


def grayscale(img: np.ndarray) -> np.ndarray:
    x = img.astype(np.float64)
    g = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    return np.repeat(g[..., None], 3, axis=2)


def color(img: np.ndarray, factor: float) -> np.ndarray:
    return blend(grayscale(img), img, factor)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.astype(np.float64).mean(axis=(0, 1))
    return blend(np.broadcast_to(mean, img.shape), img, factor)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre with nearest-neighbour sampling."""
    if degrees == 0:
        return img.copy()
    h, w, _ = img.shape
    fill = np.rint(img.reshape(-1, 3).mean(axis=0)).astype(np.uint8)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    a = math.radians(degrees)
    # inverse map: output pixel -> source pixel
    sx = math.cos(a) * (xx - cx) + math.sin(a) * (yy - cy) + cx
    sy = -math.sin(a) * (xx - cx) + math.cos(a) * (yy - cy) + cy
    sxi, syi = np.rint(sx).astype(np.int64), np.rint(sy).astype(np.int64)
    inside = (sxi >= 0) & (sxi < w) & (syi >= 0) & (syi < h)
    out = np.empty_like(img)
    out[...] = fill
    out[inside] = img[syi[inside], sxi[inside]]
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def apply_op(img: np.ndarray, name: str, param: float | None) -> np.ndarray:
    if name == "AutoContrast":
        return auto_contrast(img)
    if name == "Brightness":
        return brightness(img, param)
    if name == "Color":
        return color(img, param)
    if name == "Contrast":
        return contrast(img, param)
    if name == "Rotate":
        return rotate(img, param)
    raise ConfigError(f"unknown augmentation op {name!r}")


def apply(image: np.ndarray, decision: AugDecision) -> np.ndarray:
    if decision.branch == "flip":
        return hflip(image)
    if decision.branch == "identity":
        return image.copy()
    out = image
    for name, param in decision.ops:
        out = apply_op(out, name, param)
    return out if out is not image else image.copy()


def rand_aug(image: np.ndarray, n: int, m: int, rng: np.random.Generator, op_set=OP_SET) -> np.ndarray:
    out = image
    for name, param in sample_ops(n, m, rng, op_set):
        out = apply_op(out, name, param)
    return out


def augment(policy: AugPolicy):
    """Return an ``(img, rng) -> img`` callable for ``data.preprocess``."""

    def _fn(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return apply(img, decide(policy, rng))

    return _fn
