"""Parameter groups, AdamW with decoupled weight decay, and the staircase LR."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from cyclet.errors import ConfigError, OptimError
from cyclet.nncore.tensor import Tensor

GROUP_NAMES = ("backbone", "head")


class ParamGroup:
    """Named parameters that are frozen or trained together.

    Toggling ``trainable`` flips ``requires_grad`` on every member so the tape
    never produces gradients for a frozen group.
    """

    def __init__(self, name: str, params: list[Tensor], trainable: bool = True):
        if name not in GROUP_NAMES:
            raise ConfigError(f"unknown parameter group {name!r}; expected one of {GROUP_NAMES}")
        self.name = name
        self.params = list(params)
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"ParamGroup({self.name!r}, {len(self.params)} params, trainable={self.trainable})"

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        for p in self.params:
            p.requires_grad = self._trainable


@dataclass
class LrSchedule:
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_period: int = 20

    def __post_init__(self):
        if self.decay_period < 1:
            raise ConfigError(f"decay_period must be a positive epoch count, got {self.decay_period}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Staircase learning rate: ``lr0 * decay_factor ** (epoch // decay_period)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.lr0 * schedule.decay_factor ** (epoch // schedule.decay_period)


@dataclass
class OptimState:
    """AdamW moments keyed by parameter name.

    ``step`` counts optimizer steps globally. Bias correction uses a
    per-parameter count because frozen parameters accumulate no moments;
    a parameter unfrozen later starts from zero moments and its own step 1.
    """

    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(groups: list[ParamGroup], state: OptimState, lr: float, grads: dict[str, np.ndarray] | None = None) -> OptimState:
    """Apply one AdamW update in place to every trainable group.

    Gradients come from ``grads`` (by parameter name) when given, otherwise from
    each parameter's ``.grad``. Frozen groups are not read or written.
    """
    b1, b2, eps, wd = state.beta1, state.beta2, state.eps, state.weight_decay
    for group in groups:
        if not group.trainable:
            continue
        for p in group.params:
            g = grads.get(p.name) if grads is not None else p.grad
            if g is None:
                raise OptimError(f"adamw_step: no gradient for trainable parameter {p.name!r}")
            if g.shape != p.shape:
                raise OptimError(f"adamw_step: gradient shape {g.shape} != parameter {p.name!r} shape {p.shape}")
            key = p.name
            if key not in state.m:
                state.m[key] = np.zeros_like(p.data)
                state.v[key] = np.zeros_like(p.data)
                state.t[key] = 0
            m, v = state.m[key], state.v[key]
            state.t[key] += 1
            t = state.t[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if wd:
                p.data -= (lr * wd) * p.data
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    state.step += 1
    return state


def checksum(params: list[Tensor]) -> str:
    """SHA-256 over the raw bytes of ``params`` in order; used to prove a group stayed frozen."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode() if p.name else b"")
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()

