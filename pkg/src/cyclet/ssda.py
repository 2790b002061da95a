"""Confidence-thresholded pseudo-labelling of unlabeled, domain-shifted images.

A prediction's confidence is its largest class probability. It becomes a
pseudo-label (the argmax class, lowest index on ties) when the confidence
meets or exceeds the threshold ``tau``; otherwise it is discarded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cyclet.data import DatasetManifest, ManifestEntry, center_batch, load_image_set
from cyclet.errors import ConfigError, DataError
from cyclet.models import Network, predict_probs

SIMPLEX_ATOL = 1e-5


def _check_simplex(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"expected a 1-D probability vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"not a probability vector (min={p.min()}, sum={p.sum()})")
    return p


def _check_tau(tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold tau must lie in [0, 1], got {tau}")
    return float(tau)


def confidence(probs) -> float:
    return float(_check_simplex(probs).max())


def pseudo_label(probs, tau: float) -> tuple[int, float] | None:
    """``(argmax class, confidence)`` if confidence >= tau, else ``None`` (discarded)."""
    tau = _check_tau(tau)
    p = _check_simplex(probs)
    conf = float(p.max())
    if conf >= tau:
        return int(np.argmax(p)), conf
    return None


@dataclass
class CurationReport:
    tau: float
    total: int
    accepted: int
    per_class: list[int] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.total if self.total else 0.0

    def as_dict(self) -> dict:
        return {
            "tau": self.tau,
            "total": self.total,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "per_class": list(self.per_class),
        }


def select(probs: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised threshold rule over rows: (accepted mask, labels, confidences)."""
    tau = _check_tau(tau)
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise ValueError(f"expected (N, C) probabilities, got {probs.shape}")
    conf = probs.max(axis=1).astype(np.float64)
    labels = probs.argmax(axis=1)
    return conf >= tau, labels, conf


def curate_predictions(
    unlabeled: DatasetManifest, probs: np.ndarray, tau: float, num_classes: int
) -> tuple[DatasetManifest, CurationReport]:
    """Filter precomputed predictions (one row per manifest entry, in order)."""
    tau = _check_tau(tau)
    if len(unlabeled) == 0:
        empty = DatasetManifest(unlabeled.root, [], "pseudo", num_classes)
        return empty, CurationReport(tau, 0, 0, [0] * num_classes)
    if len(probs) != len(unlabeled):
        raise DataError(f"{len(probs)} predictions for {len(unlabeled)} manifest entries")
    mask, labels, conf = select(probs, tau)
    entries = [
        ManifestEntry(e.path, int(labels[i]), float(conf[i]), "pseudo")
        for i, e in enumerate(unlabeled.entries)
        if mask[i]
    ]
    hist = np.bincount(labels[mask], minlength=num_classes).tolist()
    report = CurationReport(tau, len(unlabeled), int(mask.sum()), hist)
    return DatasetManifest(unlabeled.root, entries, "pseudo", num_classes), report


def score_unlabeled(model: Network, unlabeled: DatasetManifest, resize_side: int) -> np.ndarray:
    """Center-crop predictions for every manifest entry; no stochastic augmentation."""
    if len(unlabeled) == 0:
        return np.zeros((0, model.config.num_classes), np.float32)
    images = load_image_set(unlabeled, resize_side).images
    return predict_probs(model, center_batch(images, model.config.input_side))


def curate(model: Network, unlabeled: DatasetManifest, tau: float, resize_side: int) -> tuple[DatasetManifest, CurationReport]:
    tau = _check_tau(tau)
    probs = score_unlabeled(model, unlabeled, resize_side)
    return curate_predictions(unlabeled, probs, tau, model.config.num_classes)


def merge(labeled: DatasetManifest, pseudo: DatasetManifest) -> DatasetManifest:
    """Labeled entries first, then pseudo entries, each tagged with its provenance."""
    if labeled.num_classes is not None and pseudo.num_classes is not None and labeled.num_classes != pseudo.num_classes:
        raise DataError(f"class-count mismatch: labeled has {labeled.num_classes}, pseudo has {pseudo.num_classes}")
    root = Path(labeled.root)
    out: list[ManifestEntry] = []
    seen: set[Path] = set()
    for e in labeled.entries:
        if e.label is None:
            raise DataError(f"labeled manifest contains unlabeled entry {e.path!r}")
        out.append(ManifestEntry(e.path, e.label, e.confidence, "original"))
        seen.add((root / e.path).resolve())
    for e in pseudo.entries:
        full = (Path(pseudo.root) / e.path).resolve()
        if full in seen:
            raise DataError(f"path {e.path!r} appears in both labeled and pseudo manifests")
        seen.add(full)
        try:
            rel = full.relative_to(root.resolve()).as_posix()
        except ValueError:
            rel = str(full)
        out.append(ManifestEntry(rel, e.label, e.confidence, "pseudo"))
    num_classes = labeled.num_classes if labeled.num_classes is not None else pseudo.num_classes
    return DatasetManifest(root, out, "train", num_classes)
