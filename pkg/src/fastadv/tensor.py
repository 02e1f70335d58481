"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array. Operations on tensors that
live on a :class:`Tape` are recorded there; :func:`backward` then walks the
tape once, in reverse recording order, and returns gradients for the
requested leaves only.

Only exact-shape or scalar broadcasting is supported. Every operation checks
its result for NaN/Inf and raises :class:`NonFiniteError` instead of letting
non-finite values propagate.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor", "Tape", "GradRequest", "NonFiniteError", "ShapeError", "TapeError",
    "set_precision", "get_dtype", "precision", "backward",
    "add", "sub", "mul", "scale", "clamp", "sign", "neg", "square",
    "matmul", "add_bias", "relu", "reshape", "flatten", "conv2d", "maxpool2d",
    "log_softmax", "softmax", "sum", "mean", "pick",
]

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_precision(bits: int) -> None:
    """Set the global float precision (32 or 64) for newly created tensors."""
    global _dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    old = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_dtype"] = old


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """Immutable n-dimensional array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype)
        _check_finite(arr, "Tensor()")
        arr.setflags(write=False)
        self.data = arr
        self.tape: Optional[Tape] = None
        self.index: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Optional["Tape"] = None,
              index: Optional[int] = None) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.tape = tape
        t.index = index
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        rec = f", tape node {self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rec})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __len__(self) -> int:
        return len(self.data)


Operand = Union[Tensor, float, int, np.ndarray]
# backward closure: (grad_out, needs) -> one gradient (or None) per parent
BackFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class GradRequest:
    wrt_params: bool = True
    wrt_input: bool = False

    def __post_init__(self):
        if not (self.wrt_params or self.wrt_input):
            raise ValueError("GradRequest needs at least one of wrt_params / wrt_input")


class Tape:
    """Single-use record of a computation, consumed by one :func:`backward`."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backfns: list[Optional[BackFn]] = []
        self._meta: list[tuple[tuple, np.dtype]] = []
        self.params: dict[str, int] = {}
        self.input_index: Optional[int] = None
        self.consumed = False

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, arr: np.ndarray, parents: tuple[int, ...],
              fn: Optional[BackFn]) -> Tensor:
        if self.consumed:
            raise TapeError("cannot record on a tape that has been consumed by backward")
        self._parents.append(parents)
        self._backfns.append(fn)
        self._meta.append((arr.shape, arr.dtype))
        return Tensor._wrap(arr, self, len(self._parents) - 1)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise TapeError(f"parameter {name!r} already registered on this tape")
        arr = _as_array(value)
        t = self._push(arr, (), None)
        self.params[name] = t.index
        return t

    def input(self, value) -> Tensor:
        if self.input_index is not None:
            raise TapeError("tape already has an input leaf")
        t = self._push(_as_array(value), (), None)
        self.input_index = t.index
        return t

    def constant(self, value) -> Tensor:
        """Record a leaf that never receives a gradient."""
        return self._push(_as_array(value), (), None)


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.array(value, dtype=_dtype)
    _check_finite(arr, "leaf")
    return arr


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def _result(name: str, arr: np.ndarray, inputs: tuple, fn: BackFn) -> Tensor:
    _check_finite(arr, name)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(arr)
    recorded = tuple(x for x in inputs if isinstance(x, Tensor) and x.tape is tape)
    if len(recorded) != len(inputs):
        # lift untracked tensor operands onto the tape as constants
        inputs = tuple(x if x.tape is tape else tape.constant(x) for x in inputs)
    return tape._push(arr, tuple(x.index for x in inputs), fn)


def _data(x: Operand) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and b.shape != ():
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, a.dtype)
        return _result("add", out, (a,), lambda g, n: (g,))
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g, n: (g, _unbroadcast(g, b.shape) if n[1] else None))


def sub(a: Tensor, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data - np.asarray(b, a.dtype)
        return _result("sub", out, (a,), lambda g, n: (g,))
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g, n: (g, -_unbroadcast(g, b.shape) if n[1] else None))


def mul(a: Tensor, b: Operand) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def back(g, n):
        return (g * bd if n[0] else None,
                _unbroadcast(g * ad, bd.shape) if n[1] else None)
    return _result("mul", ad * bd, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result("scale", a.data * s, (a,), lambda g, n: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g, n: (-g,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _result("clamp", out, (a,), lambda g, n: (g * inside,))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``; its derivative is zero everywhere."""
    return _result("sign", np.sign(a.data), (a,), lambda g, n: (np.zeros_like(g),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result("square", ad * ad, (a,), lambda g, n: (2 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.maximum(a.data, a.dtype.type(0)), (a,), lambda g, n: (g * mask,))


# ---------------------------------------------------------------- shapes

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _result("reshape", out, (a,), lambda g, n: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g, n):
        return (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None)
    return _result("matmul", ad @ bd, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias of shape (features,) to every row of x."""
    if b.ndim != 1 or x.ndim != 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    return _result("add_bias", x.data + b.data, (x, b),
                   lambda g, n: (g, g.sum(axis=0) if n[1] else None))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero 'same' padding.

    x: (N, C, H, W); w: (F, C, 3, 3); b: (F,). Returns (N, F, H, W).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input (N, C, H, W), got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} filters")
    N, C, H, W = x.shape
    F = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # im2col: cols[n, c, i, j, h, w] = xp[n, c, h + i, w + j]
    cols = np.empty((N, C, 3, 3, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    cols = cols.reshape(N, C * 9, H * W)
    wmat = w.data.reshape(F, C * 9)
    out = np.matmul(wmat, cols)
    out += b.data[:, None]

    def back(g, n):
        g = g.reshape(N, F, H * W)
        gx = gw = gb = None
        if n[0]:
            dcols = np.matmul(wmat.T, g).reshape(N, C, 3, 3, H, W)
            dxp = np.zeros((N, C, H + 2, W + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + H, j:j + W] += dcols[:, :, i, j]
            gx = dxp[:, :, 1:H + 1, 1:W + 1]
        if n[1]:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if n[2]:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb
    return _result("conv2d", out.reshape(N, F, H, W), (x, w, b), back)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: expected (N, C, H, W) with even H, W, got {x.shape}")
    d = x.data
    # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
    views = [d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2]]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    shape = x.shape

    def back(g, n):
        gx = np.zeros(shape, dtype=g.dtype)
        taken = np.zeros(g.shape, dtype=bool)
        for k, v in enumerate(views):
            win = (v == out) & ~taken
            taken |= win
            gx[:, :, k // 2::2, k % 2::2] = g * win
        return (gx,)
    return _result("maxpool2d", out, (x,), back)


# ---------------------------------------------------------------- reductions / softmax

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result("sum", out, (a,), lambda g, n: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, count = a.shape, a.data.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return _result("mean", out, (a,),
                   lambda g, n: (np.full(shape, g / count, dtype=g.dtype),))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a (batch, classes) tensor, max-shifted for stability."""
    if a.ndim != 2:
        raise ShapeError(f"log_softmax: expected (batch, classes), got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _result("log_softmax", out, (a,),
                   lambda g, n: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"softmax: expected (batch, classes), got {a.shape}")
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return _result("softmax", p, (a,),
                   lambda g, n: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def pick(a: Tensor, idx) -> Tensor:
    """Select ``a[i, idx[i]]`` for every row i; returns shape (batch,)."""
    idx = np.asarray(idx)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: indices {idx.shape} do not match rows of {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"pick: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g, n):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[rows, idx] = g
        return (ga,)
    return _result("pick", a.data[rows, idx], (a,), back)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss_grad_seed, req: GradRequest = GradRequest(),
             output: Optional[Tensor] = None):
    """Propagate ``loss_grad_seed`` from ``output`` (default: last recorded node).

    Returns ``(param_grads, input_grad)``: a dict keyed by parameter name when
    ``req.wrt_params`` else None, and the input gradient when ``req.wrt_input``
    else None. A tape can be consumed only once.
    """
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    if not len(tape):
        raise TapeError("backward on an empty tape")
    out_idx = len(tape) - 1 if output is None else output.index
    if output is not None and output.tape is not tape:
        raise TapeError("output tensor is not recorded on this tape")
    if req.wrt_input and tape.input_index is None:
        raise TapeError("input gradient requested but the tape has no input leaf")
    tape.consumed = True

    targets = set()
    if req.wrt_params:
        targets.update(tape.params.values())
    if req.wrt_input:
        targets.add(tape.input_index)
    needed = [False] * (out_idx + 1)
    for i in range(out_idx + 1):
        needed[i] = i in targets or any(needed[p] for p in tape._parents[i])

    out_shape, out_dtype = tape._meta[out_idx]
    seed = np.array(_data(loss_grad_seed), dtype=out_dtype)
    seed = np.broadcast_to(seed, out_shape).copy() if seed.shape != out_shape else seed
    grads: dict[int, np.ndarray] = {out_idx: seed}
    for i in range(out_idx, -1, -1):
        g = grads.get(i)
        fn = tape._backfns[i]
        if g is None or fn is None or not needed[i]:
            continue
        parents = tape._parents[i]
        pgrads = fn(g, [needed[p] for p in parents])
        for p, pg in zip(parents, pgrads):
            if pg is None or not needed[p]:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
        if i not in targets:
            del grads[i]
    tape._backfns = [None] * len(tape._backfns)

    def leaf_grad(idx: int) -> Tensor:
        g = grads.get(idx)
        if g is None:
            g = np.zeros(*tape._meta[idx])
        return Tensor._wrap(np.ascontiguousarray(g))

    param_grads = ({name: leaf_grad(idx) for name, idx in tape.params.items()}
                   if req.wrt_params else None)
    input_grad = leaf_grad(tape.input_index) if req.wrt_input else None
    return param_grads, input_grad
