"""Small classifiers (MLP and a two-conv CNN) on top of :mod:`fastadv.tensor`.

Parameters are kept as read-only numpy arrays in a name-ordered dict, so
attacks and evaluation cannot modify them; the optimizer swaps in new arrays.

Checkpoint layout (all integers little-endian)::

    b"FATB"                         magic
    u32  version (=1)
    u32  header length, then UTF-8 JSON {"arch": {...}, "meta": {...}}
    u32  tensor count
    per tensor:
        u16  name length, UTF-8 name
        u8   bytes per element (4 = float32, 8 = float64)
        u8   ndim, then ndim x u32 dims
        raw little-endian values, C order
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import GradRequest, Tape, Tensor

MAGIC = b"FATB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MLP:
    input_shape: tuple = (784,)
    hidden: tuple = (128, 64)
    num_classes: int = 10

    kind = "mlp"


@dataclass(frozen=True)
class SmallConvNet:
    input_shape: tuple = (1, 28, 28)
    channels: tuple = (16, 32)
    fc_width: int = 64
    num_classes: int = 10

    kind = "cnn"


Arch = Union[MLP, SmallConvNet]


def arch_to_dict(arch: Arch) -> dict:
    d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(arch).items()}
    return {"kind": arch.kind, **d}


def arch_from_dict(d: dict) -> Arch:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"mlp": MLP, "cnn": SmallConvNet}.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown architecture kind {kind!r}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def param_shapes(arch: Arch) -> dict[str, tuple]:
    """Ordered parameter names and shapes implied by an architecture."""
    shapes: dict[str, tuple] = {}
    if isinstance(arch, MLP):
        widths = [math.prod(arch.input_shape), *arch.hidden, arch.num_classes]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"fc{i}.weight"] = (fan_out, fan_in)
            shapes[f"fc{i}.bias"] = (fan_out,)
        return shapes
    c, h, w = arch.input_shape
    if h % 2 ** len(arch.channels) or w % 2 ** len(arch.channels):
        raise ValueError(f"input {arch.input_shape} not divisible by pooling "
                         f"for {len(arch.channels)} conv blocks")
    for i, out_c in enumerate(arch.channels):
        shapes[f"conv{i}.weight"] = (out_c, c, 3, 3)
        shapes[f"conv{i}.bias"] = (out_c,)
        c, h, w = out_c, h // 2, w // 2
    widths = [c * h * w] + ([arch.fc_width] if arch.fc_width else []) + [arch.num_classes]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"fc{i}.weight"] = (fan_out, fan_in)
        shapes[f"fc{i}.bias"] = (fan_out,)
    return shapes


@dataclass
class ModelParams:
    arch: Arch
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if list(self.params) != list(expected):
            raise ValueError(f"parameter names {list(self.params)} do not match "
                             f"architecture {list(expected)}")
        for name, arr in self.params.items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            if not np.isfinite(arr).all():
                raise T.NonFiniteError(f"{name}: non-finite parameter values")
            arr.setflags(write=False)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.arch.input_shape)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def replace(self, params: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.arch, params)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of architecture and every parameter."""
        return (self.arch == other.arch and list(self.params) == list(other.params)
                and all(a.dtype == b.dtype and a.tobytes() == b.tobytes()
                        for a, b in zip(self.params.values(), other.params.values())))


def init_params(arch: Arch, seed: int, dtype=None) -> ModelParams:
    """He-normal weights scaled by fan-in, zero biases; deterministic in ``seed``."""
    dtype = dtype or T.get_dtype()
    widths = list(arch.hidden) if isinstance(arch, MLP) else list(arch.channels)
    if any(w <= 0 for w in widths) or getattr(arch, "fc_width", 0) < 0:
        raise ValueError(f"zero-width layer in {arch}")
    if arch.num_classes < 1:
        raise ValueError("num_classes must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return ModelParams(arch, params)


def _check_input(model: ModelParams, x: np.ndarray) -> None:
    if x.ndim < 1 or tuple(x.shape[1:]) != model.input_shape:
        raise T.ShapeError(f"input batch shape {x.shape} does not match model input "
                           f"{model.input_shape}")


def _forward(model: ModelParams, x: Tensor, w: dict[str, Tensor]) -> Tensor:
    arch = model.arch
    h = x
    if isinstance(arch, SmallConvNet):
        for i in range(len(arch.channels)):
            h = T.maxpool2d(T.relu(T.conv2d(h, w[f"conv{i}.weight"], w[f"conv{i}.bias"])))
    h = T.flatten(h)
    n_fc = sum(1 for k in w if k.startswith("fc") and k.endswith(".weight"))
    for i in range(n_fc):
        h = T.add_bias(T.matmul(h, _transpose(w[f"fc{i}.weight"])), w[f"fc{i}.bias"])
        if i < n_fc - 1:
            h = T.relu(h)
    return h


def _transpose(wt: Tensor) -> Tensor:
    # weights are stored (out, in); the transpose is exposed as its own node
    data = np.ascontiguousarray(wt.data.T)
    if wt.tape is None:
        return Tensor._wrap(data)
    return wt.tape._push(data, (wt.index,), lambda g, n: (g.T,))


def forward_graph(model: ModelParams, x, tape: Optional[Tape] = None,
                  track_input: bool = True) -> tuple[Tensor, Tape]:
    """Run the model while recording on ``tape`` (a fresh one by default).

    Parameters are registered as named leaves the first time a tape sees them,
    so several forward passes can share one tape and accumulate parameter
    gradients. With ``track_input`` the batch becomes the tape's input leaf,
    otherwise it enters as a constant.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    _check_input(model, xd)
    if tape is None:
        tape = Tape()
    if not tape.params:
        w = {name: tape.param(name, arr) for name, arr in model.params.items()}
    else:
        if list(tape.params) != list(model.params):
            raise T.TapeError("tape parameters belong to a different model")
        w = {name: Tensor._wrap(model.params[name], tape, idx)
             for name, idx in tape.params.items()}
    xt = tape.input(xd) if track_input else tape.constant(xd)
    return _forward(model, xt, w), tape


def forward_logits(model: ModelParams, x) -> np.ndarray:
    """Plain (unrecorded) forward pass returning (batch, num_classes) logits."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    _check_input(model, xd)
    w = {name: Tensor._wrap(arr) for name, arr in model.params.items()}
    return _forward(model, Tensor._wrap(np.asarray(xd)), w).data


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def confidence_true_class(model: ModelParams, x, y) -> np.ndarray:
    """Softmax probability the model assigns to each example's true label."""
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise IndexError(f"labels must lie in [0, {model.num_classes})")
    p = softmax_np(forward_logits(model, x))
    return p[np.arange(len(y)), y]


def param_gradients(model: ModelParams, x, loss_fn, y) -> tuple[dict[str, np.ndarray], float]:
    """Convenience: gradients of ``loss_fn(logits, y)`` w.r.t. every parameter."""
    logits, tape = forward_graph(model, x, track_input=False)
    loss = loss_fn(logits, y)
    grads, _ = T.backward(tape, 1.0, GradRequest(wrt_params=True), output=loss)
    return {k: v.data for k, v in grads.items()}, loss.item()


# ---------------------------------------------------------------- checkpoints

_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def dumps(arch: Arch, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({"arch": arch_to_dict(arch), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        if arr.dtype.itemsize not in _CODES or arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODES[arr.dtype.itemsize]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[Arch, dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a FATB checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(take(hlen)))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        size, ndim = struct.unpack("<BB", take(2))
        if size not in _CODES:
            raise CheckpointError(f"{name}: unknown element size {size}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = math.prod(shape)
        arr = np.frombuffer(take(n * size), dtype=_CODES[size]).reshape(shape)
        tensors[name] = arr.astype(_CODES[size].newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    return arch_from_dict(header["arch"]), tensors, header["meta"]


def save_model(model: ModelParams, path, meta: Optional[dict] = None,
               extra: Optional[dict[str, np.ndarray]] = None) -> None:
    tensors = dict(model.params)
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name!r} collides with a parameter")
        tensors[name] = arr
    Path(path).write_bytes(dumps(model.arch, tensors, meta))


def load_model(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Returns ``(model, meta, extra_tensors)``."""
    arch, tensors, meta = loads(Path(path).read_bytes())
    names = list(param_shapes(arch))
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    model = ModelParams(arch, {n: tensors[n] for n in names})
    extra = {k: v for k, v in tensors.items() if k not in model.params}
    return model, meta, extra
