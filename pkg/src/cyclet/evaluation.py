"""Top-k accuracy, single-image CPU latency, and the accuracy/runtime score."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from cyclet.data import DatasetManifest, center_batch, load_image_set
from cyclet.errors import ConfigError, DataError
from cyclet.models import Network, predict_probs
from cyclet.nncore.tensor import DTYPE, Tensor


def label_ranks(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each true label when classes are ordered by (-prob, index)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    py = probs[np.arange(len(labels)), labels][:, None]
    idx = np.arange(probs.shape[1])[None, :]
    ahead = (probs > py) | ((probs == py) & (idx < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(probs, labels, k: int) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} are not aligned")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if k < 1 or k > probs.shape[1]:
        raise ValueError(f"k must lie in [1, {probs.shape[1]}], got {k}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("labels out of range")
    return float((label_ranks(probs, labels) < k).mean())


@dataclass
class Metrics:
    top1: float
    top3: float
    n_examples: int
    topk: dict[int, float] = field(default_factory=dict)


def metrics_from_probs(probs, labels, ks=(1, 3)) -> Metrics:
    probs = np.asarray(probs)
    c = probs.shape[1]
    topk = {k: topk_accuracy(probs, labels, k) for k in ks}
    top1 = topk[1] if 1 in topk else topk_accuracy(probs, labels, 1)
    top3 = topk[3] if 3 in topk else topk_accuracy(probs, labels, min(3, c))
    return Metrics(top1, top3, len(labels), topk)


def evaluate(model: Network, manifest: DatasetManifest, resize_side: int, ks=(1, 3)) -> Metrics:
    """Center-crop accuracy of ``model`` over a fully labeled manifest."""
    if len(manifest) == 0:
        raise DataError("cannot evaluate on an empty manifest")
    unl = [e.path for e in manifest.entries if e.label is None]
    if unl:
        raise DataError(f"evaluation manifest has {len(unl)} unlabeled entries, e.g. {unl[0]!r}")
    images = load_image_set(manifest, resize_side)
    probs = predict_probs(model, center_batch(images.images, model.config.input_side))
    return metrics_from_probs(probs, images.labels, ks)


@dataclass
class ScoreInputs:
    top1: float
    top3: float
    runtime_ms: float
    C: float = 1.0


def challenge_score(inputs: ScoreInputs) -> float:
    """``2 * (top1 + top3) / (C * runtime_ms)`` with accuracies as fractions."""
    if not inputs.runtime_ms > 0:
        raise ConfigError(f"runtime must be positive, got {inputs.runtime_ms}")
    if not inputs.C > 0:
        raise ConfigError(f"normalization constant C must be positive, got {inputs.C}")
    return 2.0 * (inputs.top1 + inputs.top3) / (inputs.C * inputs.runtime_ms)


@dataclass
class LatencyReport:
    samples_ms: list[float]
    warmup: int = 3

    @property
    def iterations(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std_ms(self) -> float:
        return statistics.pstdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0

    @property
    def min_ms(self) -> float:
        return min(self.samples_ms)

    @property
    def max_ms(self) -> float:
        return max(self.samples_ms)


def measure_latency(model: Network, iterations: int = 20, warmup: int = 3, seed: int = 0) -> LatencyReport:
    """Wall-clock a batch-of-one forward pass ``iterations`` times after ``warmup`` discarded runs."""
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    side = model.config.input_side
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, side, side, 3)).astype(DTYPE)
    samples = []
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        model(Tensor(x))
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            samples.append(dt)
    return LatencyReport(samples, warmup)

