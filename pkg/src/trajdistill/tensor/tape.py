"""Tensors, the recording tape, and reverse-mode differentiation.

Every primitive op is registered with a forward function over raw numpy
arrays and a vector-Jacobian product written in terms of other primitive
ops.  Because the VJPs are themselves ops, running ``backward`` with
``create_graph=True`` records the gradient computation on the active tape
and the result can be differentiated again.  The unrolled student updates
rely on exactly that.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ContractError, NumericError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_active: list["Tape"] = []


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable  # (*arrays, **attrs) -> (out, saved)
    vjp: Callable  # (node, g: Tensor, needs: tuple[bool]) -> tuple[Tensor | None]


OPS: dict[str, OpDef] = {}

# pure data movement or masking: finite inputs always give finite outputs
_NO_CHECK = frozenset(
    {"reshape", "transpose", "slice_flat", "embed_flat", "gather_flat", "neg", "relu", "relu_grad", "max_pool2d", "max_axis", "broadcast_to"}
)


def register(name: str, forward: Callable, vjp: Callable) -> None:
    OPS[name] = OpDef(name, forward, vjp)


class Tensor:
    """An n-d float array that may sit on a tape.

    Leaves are created with ``requires_grad=True`` (usually via
    :meth:`Tape.leaf`).  Op outputs inherit ``requires_grad`` from their
    inputs only while a tape is recording.
    """

    __slots__ = ("data", "requires_grad", "id", "op", "parents", "attrs", "saved")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}
        self.saved = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def current_tape() -> "Tape | None":
    return _active[-1] if _active else None


def apply(name: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run primitive ``name`` and record it if any input is differentiable."""
    opdef = OPS[name]
    with np.errstate(all="ignore"):
        out, saved = opdef.forward(*(t.data for t in inputs), **attrs)
    if name not in _NO_CHECK and not np.isfinite(out).all():
        raise NumericError(f"non-finite value produced by op '{name}'")
    t = Tensor(out)
    tape = current_tape()
    if tape is not None and tape.recording and any(p.requires_grad for p in inputs):
        t.requires_grad = True
        t.op = name
        t.parents = inputs
        t.attrs = attrs
        t.saved = saved
        tape._record(t)
    return t


class Tape:
    """Ordered record of op nodes; usable as a context manager.

    Nodes are appended as ops execute, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._pos: dict[int, int] = {}
        self.recording = True

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: Tensor) -> None:
        self._pos[node.id] = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, data, dtype=None) -> Tensor:
        t = Tensor(data, requires_grad=True, dtype=dtype)
        self.leaves.append(t)
        return t

    def watch(self, t: Tensor) -> Tensor:
        t.requires_grad = True
        if all(t is not l for l in self.leaves):
            self.leaves.append(t)
        return t

    @contextmanager
    def paused(self):
        prev, self.recording = self.recording, False
        try:
            yield self
        finally:
            self.recording = prev

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-execute every recorded node from leaf values.

        Inputs that are neither leaves nor recorded nodes are treated as
        constants and read from their stored data.
        """
        values: dict[int, np.ndarray] = {l.id: l.data for l in self.leaves}
        if leaf_values:
            values.update(leaf_values)
        for node in self.nodes:
            args = [values.get(p.id, p.data) for p in node.parents]
            out, _ = OPS[node.op].forward(*args, **node.attrs)
            values[node.id] = out
        return values


def _dependents(tape: Tape, target_ids: set[int], stop: int) -> set[int]:
    dep = set(target_ids)
    for node in tape.nodes[: stop + 1]:
        for p in node.parents:
            if p.id in dep:
                dep.add(node.id)
                break
    return dep


def backward(
    tape: Tape,
    root: Tensor,
    wrt: list[Tensor] | None = None,
    create_graph: bool = False,
) -> dict[int, Tensor]:
    """Gradients of scalar ``root`` with respect to ``wrt`` (default: all leaves).

    Returns a mapping from tensor id to gradient.  With ``create_graph``
    the gradient ops are recorded on ``tape`` so they can be
    differentiated again.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    targets = list(tape.leaves if wrt is None else wrt)
    target_ids = {t.id for t in targets}
    zeros = {t.id: Tensor(np.zeros_like(t.data)) for t in targets}

    if root.id in target_ids:
        out = dict(zeros)
        out[root.id] = Tensor(np.ones_like(root.data))
        return out
    stop = tape._pos.get(root.id)
    if stop is None:
        return zeros

    dep = _dependents(tape, target_ids, stop)
    if root.id not in dep:
        return zeros

    grads: dict[int, Tensor] = {root.id: Tensor(np.ones_like(root.data))}
    prev = tape.recording
    tape.recording = create_graph
    _active.append(tape)
    try:
        for k in range(stop, -1, -1):
            node = tape.nodes[k]
            g = grads.get(node.id) if node.id in target_ids else grads.pop(node.id, None)
            if g is None:
                continue
            needs = tuple(p.id in dep for p in node.parents)
            pgrads = OPS[node.op].vjp(node, g, needs)
            for p, need, pg in zip(node.parents, needs, pgrads):
                if not need or pg is None:
                    continue
                acc = grads.get(p.id)
                grads[p.id] = pg if acc is None else apply("add", acc, pg)
    finally:
        _active.pop()
        tape.recording = prev

    return {tid: grads.get(tid, zeros[tid]) for tid in target_ids}


def grad(tape: Tape, root: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """List form of :func:`backward`, ordered like ``wrt``."""
    g = backward(tape, root, wrt=wrt, create_graph=create_graph)
    return [g[t.id] for t in wrt]
