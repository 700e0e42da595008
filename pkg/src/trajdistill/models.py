"""Architectures as pure functions of a flat parameter vector.

A model is an :class:`ArchSpec` plus a :class:`ParamVector`; ``forward``
slices the flat vector into layer tensors on the fly, so a snapshot of a
training run is just the vector itself.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import ops
from .tensor.nn import conv2d, global_max_pool, group_norm, linear, max_pool2d, relu
from .tensor.tape import Tensor

ARCHS = ("cnn6", "resnet9", "vgg15", "cnn4_tiny")
_DEFAULT_NORM = {"cnn6": "none", "vgg15": "none", "resnet9": "group_norm", "cnn4_tiny": "none"}


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int] = (373, 64)
    num_classes: int = 7
    channel_scale: float = 1.0
    norm: str | None = None

    def __post_init__(self):
        if self.name not in ARCHS:
            raise ValueError(f"unknown architecture {self.name!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.norm is None:
            object.__setattr__(self, "norm", _DEFAULT_NORM[self.name])
        if self.norm not in ("none", "group_norm"):
            raise ValueError(f"norm must be 'none' or 'group_norm', got {self.norm!r}")

    @property
    def arch_id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.channel_scale)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{**d, "input_shape": tuple(d.get("input_shape", (373, 64)))})


@dataclass(frozen=True, eq=False)
class ParamVector:
    arch_id: str
    values: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...] = field(repr=False)

    def __post_init__(self):
        n = sum(int(np.prod(s)) for _, _, s in self.layout)
        if self.values.ndim != 1 or self.values.size != n:
            raise ShapeError(f"parameter vector has {self.values.size} values, layout needs {n}")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            self.arch_id == other.arch_id
            and self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.arch_id, np.asarray(values).reshape(-1), self.layout)


# ------------------------------------------------------------------- layouts

def _conv(name, cin, cout, k):
    return [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (cout,))]


def _gn(name, c):
    return [(f"{name}.gamma", (c,)), (f"{name}.beta", (c,))]


def _fc(name, fin, fout):
    return [(f"{name}.w", (fout, fin)), (f"{name}.b", (fout,))]


def _cnn6_convs(spec):
    chans = [spec.ch(c) for c in (64, 128, 256, 512)]
    return list(zip([1] + chans[:-1], chans))


def _vgg15_convs(spec):
    out, cin = [], 1
    for c, reps in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        c = spec.ch(c)
        block = []
        for _ in range(reps):
            block.append((cin, c))
            cin = c
        out.append(block)
    return out


def _gn_groups(c: int) -> int:
    return math.gcd(8, c)


def layout_entries(spec: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    K, gn = spec.num_classes, spec.norm == "group_norm"
    entries: list = []
    if spec.name == "cnn6":
        for i, (ci, co) in enumerate(_cnn6_convs(spec)):
            entries += _conv(f"conv{i + 1}", ci, co, 3)
            if gn:
                entries += _gn(f"norm{i + 1}", co)
        feat = _cnn6_convs(spec)[-1][1]
    elif spec.name == "vgg15":
        n = 0
        for b, block in enumerate(_vgg15_convs(spec)):
            for ci, co in block:
                n += 1
                entries += _conv(f"conv{n}", ci, co, 3)
                if gn:
                    entries += _gn(f"norm{n}", co)
        feat = spec.ch(512)
    elif spec.name == "resnet9":
        stem = spec.ch(64)
        entries += _conv("stem", 1, stem, 7)
        if gn:
            entries += _gn("stem_norm", stem)
        cin = stem
        for b, c in enumerate((128, 256, 512)):
            c = spec.ch(c)
            entries += _conv(f"block{b + 1}.conv1", cin, c, 3)
            if gn:
                entries += _gn(f"block{b + 1}.norm1", c)
            entries += _conv(f"block{b + 1}.conv2", c, c, 3)
            if gn:
                entries += _gn(f"block{b + 1}.norm2", c)
            if cin != c:
                entries += _conv(f"block{b + 1}.proj", cin, c, 1)
            cin = c
        feat = cin
    else:  # cnn4_tiny
        c1, c2 = spec.ch(8), spec.ch(16)
        entries += _conv("conv1", 1, c1, 3)
        if gn:
            entries += _gn("norm1", c1)
        entries += _conv("conv2", c1, c2, 3)
        if gn:
            entries += _gn("norm2", c2)
        feat = c2 * (spec.input_shape[1] // 4)
        hidden = spec.ch(32)
        entries += _fc("fc1", feat, hidden)
        entries += _fc("fc2", hidden, K)
        return entries
    hidden = spec.ch(512)
    entries += _fc("fc1", feat, hidden)
    entries += _fc("fc2", hidden, K)
    return entries


def make_layout(spec: ArchSpec) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
    out, off = [], 0
    for name, shape in layout_entries(spec):
        out.append((name, off, tuple(shape)))
        off += int(np.prod(shape))
    return tuple(out)


def param_count(spec: ArchSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout_entries(spec))


def build_model(spec: ArchSpec, rng_seed: int, dtype=np.float32) -> ParamVector:
    """Kaiming-uniform weights, zero biases, unit/zero norm affine terms."""
    rng = np.random.default_rng(rng_seed)
    layout = make_layout(spec)
    values = np.zeros(layout[-1][1] + int(np.prod(layout[-1][2])), dtype=dtype)
    for name, off, shape in layout:
        n = int(np.prod(shape))
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            values[off : off + n] = rng.uniform(-bound, bound, size=n)
        elif name.endswith(".gamma"):
            values[off : off + n] = 1
    return ParamVector(spec.arch_id, values, layout)


def unflatten(p: ParamVector) -> dict[str, np.ndarray]:
    return {name: p.values[off : off + int(np.prod(shape))].reshape(shape) for name, off, shape in p.layout}


def flatten(spec: ArchSpec, arrays: dict[str, np.ndarray], dtype=None) -> ParamVector:
    layout = make_layout(spec)
    parts = [np.asarray(arrays[name], dtype=dtype).reshape(-1) for name, _, _ in layout]
    return ParamVector(spec.arch_id, np.concatenate(parts), layout)


# ------------------------------------------------------------------ forward

def _split(spec: ArchSpec, flat: Tensor) -> dict[str, Tensor]:
    out = {}
    for name, off, shape in make_layout(spec):
        n = int(np.prod(shape))
        out[name] = ops.reshape(ops.slice_flat(flat, off, off + n), shape)
    return out


def _conv_block(p, x, conv, norm, gn, stride=1, padding="same"):
    x = conv2d(x, p[f"{conv}.w"], p[f"{conv}.b"], stride=stride, padding=padding)
    if gn:
        x = group_norm(x, _gn_groups(x.shape[1]), p[f"{norm}.gamma"], p[f"{norm}.beta"])
    return x


def forward(spec: ArchSpec, params, batch) -> Tensor:
    """Logits (N, K) for a batch (N, 1, frames, mel_bins).

    ``params`` may be a ParamVector, a flat array, or a flat Tensor; pass
    a Tensor on an active tape to differentiate through the parameters.
    """
    if isinstance(params, ParamVector):
        params = params.values
    flat = params if isinstance(params, Tensor) else Tensor(params)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=flat.dtype))
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} incompatible with input (N, 1, {spec.input_shape[0]}, {spec.input_shape[1]})")
    if flat.ndim != 1 or flat.shape[0] != param_count(spec):
        raise ShapeError(f"{flat.shape} parameters for {spec.name} which needs {param_count(spec)}")
    p = _split(spec, flat)
    gn = spec.norm == "group_norm"

    if spec.name == "cnn6":
        for i in range(4):
            x = relu(max_pool2d(_conv_block(p, x, f"conv{i + 1}", f"norm{i + 1}", gn), 2))
        x = global_max_pool(x)
    elif spec.name == "vgg15":
        n = 0
        for block in _vgg15_convs(spec):
            for _ in block:
                n += 1
                x = relu(_conv_block(p, x, f"conv{n}", f"norm{n}", gn))
            x = max_pool2d(x, 2)
        x = global_max_pool(x)
    elif spec.name == "resnet9":
        x = relu(_conv_block(p, x, "stem", "stem_norm", gn, stride=2))
        x = max_pool2d(x, 3, 2)
        for b in range(1, 4):
            h = relu(_conv_block(p, x, f"block{b}.conv1", f"block{b}.norm1", gn))
            h = _conv_block(p, h, f"block{b}.conv2", f"block{b}.norm2", gn)
            if f"block{b}.proj.w" in p:
                x = conv2d(x, p[f"block{b}.proj.w"], p[f"block{b}.proj.b"], padding="valid")
            x = relu(ops.add(h, x))
        x = global_max_pool(x)
    else:  # cnn4_tiny: keep the mel axis, max over time only
        x = relu(max_pool2d(_conv_block(p, x, "conv1", "norm1", gn), 2))
        x = relu(max_pool2d(_conv_block(p, x, "conv2", "norm2", gn), 2))
        x = ops.max_axis(x, axis=2)
        x = ops.reshape(x, (x.shape[0], -1))

    x = relu(linear(x, p["fc1.w"], p["fc1.b"]))
    return linear(x, p["fc2.w"], p["fc2.b"])


def predict(spec: ArchSpec, params, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class predictions, computed in chunks without a tape."""
    preds = []
    for s in range(0, len(x), batch_size):
        logits = forward(spec, params, x[s : s + batch_size])
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
