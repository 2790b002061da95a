"""Tensor container and the recording tape used for reverse-mode autodiff.

Forward ops (see ``ops.py``) append one node per call to the innermost active
``Tape``. ``Tape.backward`` replays the nodes in reverse, pulling the output
gradient of each node through its vector-Jacobian closure.

    with Tape() as tape:
        loss = softmax_cross_entropy(model(x), y)
    grads = tape.backward(loss, params)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from cyclet.errors import GraphError

DTYPE = np.float32


class Tensor:
    """An n-d float array with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters) that want a gradient; results of
    recorded ops inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=DTYPE):
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str
    tape: "Tape"
    index: int


class Tape:
    """Ordered record of forward ops; usable as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Differentiate a scalar ``loss`` recorded on this tape.

        Every leaf reached with ``requires_grad`` gets its ``.grad`` set. Leaves
        listed in ``params`` that the loss does not depend on get a zero
        gradient; listed leaves with ``requires_grad=False`` get none.
        Returns ``{id(leaf): grad}``.
        """
        node = loss._node
        if node is None or node.tape is not self:
            raise GraphError("backward: loss was not produced by an op recorded on this tape")
        if loss.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(n.out), None)
            if g is None:
                continue
            in_grads = n.vjp(g)
            for t, gi in zip(n.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t

        result: dict[int, np.ndarray] = {}
        for key, t in leaves.items():
            t.grad = grads[key].astype(t.data.dtype, copy=False)
            result[key] = t.grad
        for p in params or ():
            if p.requires_grad and id(p) not in result:
                p.grad = np.zeros_like(p.data)
                result[id(p)] = p.grad
        return result


def record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap ``out_data`` and, if a tape is live and any input wants a gradient, log the op."""
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, vjp, op, tape, len(tape.nodes))
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Run backward on whichever tape recorded ``loss``."""
    if loss._node is None:
        raise GraphError("backward: tensor was not produced by a recorded forward op")
    return loss._node.tape.backward(loss, params)
