"""Images, manifests, preprocessing and the synthetic domain-shifted dataset.

Images are ``uint8`` arrays of shape (H, W, 3) stored on disk as binary PPM
(P6). Manifests are UTF-8 CSV files with a ``path,label`` header; pseudo-label
manifests add ``confidence`` and ``provenance`` columns. Paths are relative to
the manifest's directory.
"""
from __future__ import annotations

import colorsys
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from cyclet.errors import DataError

UNLABELED = "UNLABELED"
SPLITS = ("train", "val", "test")
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


# ---------------------------------------------------------------- images


def check_image(img: np.ndarray) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"not a valid RGB image: dtype={img.dtype} shape={img.shape}")
    return img


def write_ppm(path, img: np.ndarray) -> None:
    img = check_image(np.asarray(img))
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping # comments."""
    vals, i = [], 2
    while len(vals) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and buf[j:j + 1].isdigit():
            j += 1
        if j == i:
            raise DataError("malformed PPM header", path)
        vals.append(int(buf[i:j]))
        i = j
    return vals, i + 1


def read_ppm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image: {e.strerror}", path) from e
    if buf[:2] != b"P6":
        raise DataError("not a binary PPM (P6) file", path)
    (w, h, maxval), start = _ppm_tokens(buf, 3, path)
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"unsupported PPM geometry {w}x{h} maxval {maxval}", path)
    data = buf[start:start + w * h * 3]
    if len(data) != w * h * 3:
        raise DataError(f"truncated PPM: expected {w * h * 3} bytes of pixels, got {len(data)}", path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    path: str
    label: Optional[int]
    confidence: Optional[float] = None
    provenance: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    split: str = "train"
    num_classes: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    @property
    def labels(self) -> list[Optional[int]]:
        return [e.label for e in self.entries]


def _split_from_name(path: Path) -> str:
    stem = path.stem.lower()
    for s in SPLITS:
        if stem.startswith(s):
            return s
    return "train"


def load_manifest(path, num_classes: int | None = None, split: str | None = None, check_images: bool = True) -> DatasetManifest:
    """Parse a manifest CSV.

    Rows are ``path,label`` or ``path,label,confidence,provenance``; a first
    row starting with ``path`` is a header. ``label`` is a class index or
    ``UNLABELED``. Every failure raises ``DataError`` carrying the line number.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError("manifest not found", path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "path":
                continue
            if len(row) not in (2, 4):
                raise DataError(f"expected 2 or 4 columns, got {len(row)}", path, lineno)
            rel, lab = row[0].strip(), row[1].strip()
            if not rel:
                raise DataError("empty image path", path, lineno)
            if rel in seen:
                raise DataError(f"duplicate path {rel!r}", path, lineno)
            seen.add(rel)
            if lab == UNLABELED:
                label = None
            else:
                try:
                    label = int(lab)
                except ValueError:
                    raise DataError(f"label {lab!r} is neither an integer nor {UNLABELED}", path, lineno) from None
                if label < 0 or (num_classes is not None and label >= num_classes):
                    bound = f"[0, {num_classes})" if num_classes is not None else ">= 0"
                    raise DataError(f"label {label} out of range {bound}", path, lineno)
            conf = prov = None
            if len(row) == 4:
                try:
                    conf = float(row[2]) if row[2].strip() else None
                except ValueError:
                    raise DataError(f"confidence {row[2]!r} is not a number", path, lineno) from None
                prov = row[3].strip() or None
            if check_images:
                img_path = root / rel
                if not img_path.is_file():
                    raise DataError(f"image {rel!r} does not exist", path, lineno)
                try:
                    read_ppm(img_path)
                except DataError as e:
                    raise DataError(f"image {rel!r} does not parse: {e}", path, lineno) from None
            entries.append(ManifestEntry(rel, label, conf, prov))
    return DatasetManifest(root, entries, split or _split_from_name(path), num_classes)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write ``manifest`` as CSV; the 4-column form is used if any entry has a provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rich = any(e.provenance is not None or e.confidence is not None for e in manifest.entries)
    rel_root = Path(os.path.relpath(manifest.root, path.parent))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "label", "confidence", "provenance"] if rich else ["path", "label"])
        for e in manifest.entries:
            rel = (rel_root / e.path).as_posix() if str(rel_root) != "." else e.path
            lab = UNLABELED if e.label is None else str(e.label)
            if rich:
                conf = "" if e.confidence is None else repr(float(e.confidence))
                w.writerow([rel, lab, conf, e.provenance or ""])
            else:
                w.writerow([rel, lab])


# ---------------------------------------------------------------- preprocessing


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to ``side`` x ``side`` with half-pixel centers, rounded back to uint8."""
    h, w, _ = img.shape
    if (h, w) == (side, side):
        return img.copy()

    def axis(n_in: int):
        pos = (np.arange(side) + 0.5) * (n_in / side) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def crop(img: np.ndarray, side: int, mode: str = "center", rng: np.random.Generator | None = None) -> np.ndarray:
    h, w, _ = img.shape
    if side > h or side > w:
        raise DataError(f"crop side {side} exceeds image {h}x{w}")
    if mode == "center":
        top, left = (h - side) // 2, (w - side) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return img[top:top + side, left:left + side]


def normalize(img: np.ndarray) -> np.ndarray:
    """Map integer pixels to [-1, 1] via ``v / 127.5 - 1``."""
    return (img.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-example stream keyed only by (global seed, epoch, example index)."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def preprocess(
    image: np.ndarray,
    resize_side: int,
    crop_side: int,
    mode: str = "center",
    rng: np.random.Generator | None = None,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> np.ndarray:
    """resize -> crop -> (augment) -> normalize; returns float32 (crop, crop, 3)."""
    if crop_side > resize_side:
        raise DataError(f"crop side {crop_side} larger than resize side {resize_side}")
    img = resize_bilinear(check_image(image), resize_side)
    img = crop(img, crop_side, mode, rng)
    if augment is not None:
        img = augment(img, rng)
    return normalize(img)


# ---------------------------------------------------------------- in-memory sets


@dataclass
class ImageSet:
    """Resized images held in memory for fast epoch loops."""

    images: np.ndarray  # (N, R, R, 3) uint8
    labels: np.ndarray  # (N,) int64, -1 for unlabeled
    paths: list[str]
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.paths)


def load_image_set(manifest: DatasetManifest, resize_side: int) -> ImageSet:
    imgs = [resize_bilinear(read_ppm(manifest.resolve(e)), resize_side) for e in manifest.entries]
    images = np.stack(imgs) if imgs else np.zeros((0, resize_side, resize_side, 3), np.uint8)
    labels = np.array([-1 if e.label is None else e.label for e in manifest.entries], dtype=np.int64)
    prov = [e.provenance or "original" for e in manifest.entries]
    return ImageSet(images, labels, [str(manifest.resolve(e)) for e in manifest.entries], prov)


def center_batch(images: np.ndarray, crop_side: int) -> np.ndarray:
    """Deterministic center-crop + normalize for an (N, R, R, 3) uint8 stack."""
    r = images.shape[1]
    if crop_side > r:
        raise DataError(f"crop side {crop_side} larger than resize side {r}")
    o = (r - crop_side) // 2
    return normalize(images[:, o:o + crop_side, o:o + crop_side])


# ---------------------------------------------------------------- synthetic data


@dataclass
class DomainShift:
    hue_shift: float = 0.0  # degrees
    brightness_bias: float = 0.0  # fraction of full scale, added to every channel
    noise_sigma: float = 0.0  # std of additive Gaussian noise, fraction of full scale

    def is_identity(self) -> bool:
        return self.hue_shift == 0 and self.brightness_bias == 0 and self.noise_sigma == 0


@dataclass
class SynthSpec:
    num_classes: int = 10
    image_side: int = 48
    train_per_class: int = 70
    val_per_class: int = 15
    test_per_class: int = 15
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def counts(self) -> dict[str, int]:
        return {"train": self.train_per_class, "val": self.val_per_class, "test": self.test_per_class}


HUE_JITTER = 30.0
MIN_STRENGTH = 0.5
_FAMILIES = ("hstripes", "vstripes", "diagonal", "checks", "blobs", "rings", "gradient", "radial", "dots", "cross")


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h % 360.0) / 360.0, s, v))


def _pattern(family: str, variant: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """A [0, 1] mask for one texture family with random intra-class variation."""
    v, u = np.mgrid[0:side, 0:side] / side
    freq = rng.uniform(2.5, 4.5) * (1 + variant)
    phase = rng.uniform(0, 2 * math.pi)
    if family == "hstripes":
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * v + phase)
    if family == "vstripes":
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + phase)
    if family == "diagonal":
        a = math.radians(45 + rng.uniform(-12, 12))
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * (u * math.cos(a) + v * math.sin(a)) + phase)
    if family == "checks":
        s = np.sin(2 * math.pi * freq * u + phase) * np.sin(2 * math.pi * freq * v + phase)
        return (s > 0).astype(np.float64)
    if family == "blobs":
        m = np.zeros((side, side))
        for _ in range(int(rng.integers(3, 6))):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.07, 0.14) / (1 + variant)
            m = np.maximum(m, np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * r * r)))
        return m
    if family == "rings":
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        r = np.hypot(u - cx, v - cy)
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * r * 1.5 + phase)
    if family == "gradient":
        a = rng.uniform(0, 2 * math.pi)
        g = (u - 0.5) * math.cos(a) + (v - 0.5) * math.sin(a)
        return np.clip(g / 0.7 + 0.5, 0, 1)
    if family == "radial":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        return np.clip(1 - np.hypot(u - cx, v - cy) / rng.uniform(0.4, 0.6), 0, 1)
    if family == "dots":
        period = 1 / freq
        du = ((u + phase / 10) % period) / period - 0.5
        dv = ((v + phase / 10) % period) / period - 0.5
        return (np.hypot(du, dv) < 0.25).astype(np.float64)
    if family == "cross":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        w = rng.uniform(0.06, 0.12)
        return ((np.abs(u - cx) < w) | (np.abs(v - cy) < w)).astype(np.float64)
    raise ValueError(family)


def render_example(label: int, num_classes: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Render one clean (unshifted) image of class ``label``.

    Class identity lives in the texture family. Each class also has a base hue,
    jittered by ``HUE_JITTER`` degrees, so colour is a useful but unreliable cue
    that the domain shift breaks. A per-image pattern strength drawn from
    ``[MIN_STRENGTH, 1]`` makes some images faint and hence genuinely ambiguous.
    """
    family = _FAMILIES[label % len(_FAMILIES)]
    variant = label // len(_FAMILIES)
    hue = 360.0 * label / num_classes + rng.normal(0, HUE_JITTER)
    fg = _hsv(hue, rng.uniform(0.55, 0.95), rng.uniform(0.7, 1.0))
    bg = _hsv(hue + 180 + rng.normal(0, 20), rng.uniform(0.2, 0.5), rng.uniform(0.15, 0.45))
    strength = rng.uniform(MIN_STRENGTH, 1.0)
    m = _pattern(family, variant, side, rng)[..., None] * strength
    img = bg * (1 - m) + fg * m
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _hue_matrix(degrees: float) -> np.ndarray:
    """RGB-space hue rotation about the grey axis (luma-preserving, as in CSS hue-rotate)."""
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    return np.array([
        [0.213 + c * 0.787 - s * 0.213, 0.715 - c * 0.715 - s * 0.715, 0.072 - c * 0.072 + s * 0.928],
        [0.213 - c * 0.213 + s * 0.143, 0.715 + c * 0.285 + s * 0.140, 0.072 - c * 0.072 - s * 0.283],
        [0.213 - c * 0.213 - s * 0.787, 0.715 - c * 0.715 + s * 0.715, 0.072 + c * 0.928 + s * 0.072],
    ])


def apply_domain_shift(img: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    if shift.is_identity():
        return img.copy()
    x = img.astype(np.float64)
    if shift.hue_shift:
        x = x @ _hue_matrix(shift.hue_shift).T
    x = x + shift.brightness_bias * 255.0
    if shift.noise_sigma:
        x = x + rng.normal(0, shift.noise_sigma * 255.0, size=x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write PPM images plus ``train.csv``, ``val.csv`` (unlabeled), ``test.csv``.

    ``val_truth.csv`` holds the hidden val labels for analysis only. Images of a
    split are written in class-interleaved order; every file is a pure function
    of (seed, split, index), so reruns are byte-identical.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory: {e.strerror}", out) from e
    manifests: dict[str, Path] = {}
    truth_entries: list[ManifestEntry] = []
    for split, per_class in spec.counts().items():
        (out / split).mkdir(exist_ok=True)
        entries = []
        for idx in range(per_class * spec.num_classes):
            label = idx % spec.num_classes
            rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], idx])
            img = render_example(label, spec.num_classes, spec.image_side, rng)
            if split != "train":
                img = apply_domain_shift(img, spec.domain_shift, rng)
            rel = f"{split}/{idx:05d}.ppm"
            try:
                write_ppm(out / rel, img)
            except OSError as e:
                raise DataError(f"cannot write image: {e.strerror}", out / rel) from e
            if split == "val":
                entries.append(ManifestEntry(rel, None))
                truth_entries.append(ManifestEntry(rel, label))
            else:
                entries.append(ManifestEntry(rel, label))
        manifests[split] = out / f"{split}.csv"
        write_manifest(DatasetManifest(out, entries, split, spec.num_classes), manifests[split])
    write_manifest(DatasetManifest(out, truth_entries, "val", spec.num_classes), out / "val_truth.csv")
    meta = asdict(spec)
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifests
