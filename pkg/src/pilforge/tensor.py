"""Dense tensors with define-by-run reverse-mode differentiation, layers, Adam, and the NPIL weight format.

Each op records its parents and a closure that pushes the output gradient
back into them. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order once. Values are float32 unless :func:`precision` selects
another dtype, which the gradient checks use for float64 finite differences.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ParseError

_state = {"dtype": np.float32, "grad": True, "check_finite": False}

# forward matmuls run in fixed row blocks so each row's result is independent of batch size
MATMUL_BLOCK = 1024


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NumericalError` as soon as any op produces NaN or inf."""
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


@contextlib.contextmanager
def frozen(tensors: Iterable["Tensor"]):
    """Treat ``tensors`` as constants: no gradient is recorded or accumulated for them."""
    tensors = list(tensors)
    old = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, r in zip(tensors, old):
            t.requires_grad = r


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype) + (0 if self.grad is None else self.grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed once propagated
                node.grad = None

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g, dtype=t.data.dtype), t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` must return one gradient per parent.

    Entries may be ``None`` for parents that receive no gradient. Other
    modules use this to add ops without touching the tape machinery.
    """
    out = Tensor(data)
    if _state["check_finite"] and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite output from {getattr(backward, '__qualname__', 'op')}")
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g, parents=out._parents):
            grads = backward(g)
            for p, pg in zip(parents, grads):
                if pg is not None and p.requires_grad:
                    _accumulate(p, pg)

        out._backward = _bw
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return make_op(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick = a.data >= b.data
    return make_op(np.where(pick, a.data, b.data), (a, b), lambda g: (g * pick, g * ~pick))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make_op(np.where(cond, a.data, b.data), (a, b), lambda g: (np.where(cond, g, 0), np.where(cond, 0, g)))


# -- elementwise unary ----------------------------------------------------


def sin(x) -> Tensor:
    x = as_tensor(x)
    return make_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return make_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x) -> Tensor:
    x = as_tensor(x)
    return make_op(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def elu(x) -> Tensor:
    """``x`` for positive inputs, ``exp(x) - 1`` otherwise."""
    x = as_tensor(x)
    neg_part = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg_part)
    return make_op(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, neg_part + 1.0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- shape and reductions -------------------------------------------------


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_op(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_op(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (g,))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ValueError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} along axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return make_op(out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(out), (x,), bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in xs]
    return concat(expanded, axis=axis)


# -- linear algebra -------------------------------------------------------


def blocked_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for 2-D ``a``, evaluated in zero-padded blocks of :data:`MATMUL_BLOCK` rows."""
    m = a.shape[0]
    out = np.empty((m, w.shape[1]), dtype=np.result_type(a, w))
    for s in range(0, m, MATMUL_BLOCK):
        e = min(s + MATMUL_BLOCK, m)
        if e - s == MATMUL_BLOCK:
            np.matmul(a[s:e], w, out=out[s:e])
        else:
            pad = np.zeros((MATMUL_BLOCK, a.shape[1]), dtype=a.dtype)
            pad[: e - s] = a[s:e]
            out[s:e] = (pad @ w)[: e - s]
    return out


def matmul(a, w) -> Tensor:
    """``a (..., K) @ w (K, N)``. Leading axes of ``a`` are flattened into rows."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {w.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])
    out = blocked_matmul(a2, w.data).reshape(a.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw

    return make_op(out, (a, w), bw)


def film_siren(y, gamma, beta, lambda0: float) -> Tensor:
    """FiLM-modulated sine activation ``sin(lambda0 * gamma * y + beta)``."""
    y, gamma, beta = as_tensor(y), as_tensor(gamma), as_tensor(beta)
    try:
        shape = np.broadcast_shapes(y.shape, gamma.shape, beta.shape)
    except ValueError:
        raise ValueError(f"film_siren: incompatible shapes {y.shape}, {gamma.shape}, {beta.shape}") from None
    if shape != y.shape:
        raise ValueError(f"film_siren: modulation {gamma.shape}/{beta.shape} does not broadcast to {y.shape}")
    arg = lambda0 * gamma.data * y.data + beta.data
    out = np.sin(arg)

    def bw(g):
        c = g * np.cos(arg)
        return c * (lambda0 * gamma.data), c * (lambda0 * y.data), c

    return make_op(out, (y, gamma, beta), bw)


# -- layers ---------------------------------------------------------------


class Dense:
    """Affine layer ``x @ W + b``."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float | None = None, name: str = "dense"):
        bound = scale if scale is not None else np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), name=f"{name}/weight")
        self.bias = parameter(np.zeros(fan_out), name=f"{name}/bias")

    def __call__(self, x) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def named_parameters(layers: Mapping[str, Dense]) -> dict[str, Tensor]:
    out = {}
    for key, layer in layers.items():
        out[f"{key}/weight"] = layer.weight
        out[f"{key}/bias"] = layer.bias
    return out


# -- optimisation ---------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None]) -> list[np.ndarray]:
    """Bias-corrected Adam update, in place on ``params``; missing gradients count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return list(params)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.state, [p.data for p in self.params], [p.grad for p in self.params])


# -- weight files ---------------------------------------------------------

MAGIC = b"NPIL"
VERSION = 1


class WeightFileError(ParseError):
    pass


def weight_file_size(tensors: Mapping[str, np.ndarray]) -> int:
    size = 12
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
    return size


def save_weights(tensors: Mapping[str, "Tensor | np.ndarray"], path) -> None:
    """Write named tensors as ``NPIL`` v1: little-endian headers and float32 payloads."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, t in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()

    def need(pos: int, n: int, what: str):
        if pos + n > len(buf):
            raise WeightFileError(f"truncated weight file reading {what}: expected {pos + n} bytes, got {len(buf)}", pos)

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise WeightFileError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}", 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, nlen + 1, "name")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(pos, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        numel = int(np.prod(dims, dtype=np.int64))
        need(pos, 4 * numel, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=numel, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * numel
    if pos != len(buf):
        raise WeightFileError(f"trailing bytes: expected {pos} bytes, got {len(buf)}", pos)
    return out


# -- verification helpers -------------------------------------------------


def numerical_gradient(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x`` (any float dtype)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(fn(x))
        flat[i] = keep - h
        fm = float(fn(x))
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
