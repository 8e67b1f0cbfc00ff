"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a numpy array; every differentiable op is defined here together
with its vector-Jacobian product. Operations are recorded only while a
:class:`Tape` is active and at least one input requires a gradient, so
inference code pays nothing for the autodiff machinery::

    w = Tensor(np.eye(2), requires_grad=True)
    with Tape() as tape:
        loss = tsum(matmul(x, w))
    backward(tape, loss)
    w.grad  # -> ndarray, same shape as w

Gradients accumulate across calls to :func:`backward`; call
:meth:`Tensor.zero_grad` between steps.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "panoseg_active_tape", default=None
)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in result")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision (keeps ``requires_grad``)."""
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow the outer one. A tape is
    single-threaded, but independent tapes may run concurrently since the
    active tape is tracked per context.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    arr = np.asarray(arr)
    _check_finite(arr, op)
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        tape.nodes.append(_Node(out, tuple(inputs), vjp, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise UsageError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype)
            else:
                inp.grad = inp.grad + gi


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or batched with identical leading extents."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "add_bias")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (broadcast onto ``x``)."""
    out = x.data + const.astype(x.dtype, copy=False)
    if out.shape != x.shape:
        raise DimensionError(f"add_constant: {const.shape} does not broadcast onto {x.shape}")
    return _result(out, (x,), lambda g: (g,), "add_constant")


def tsum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _result(x.data.sum(), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    return _result(x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    return _result(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise UsageError("concat of an empty list")
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] + t.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise DimensionError(f"concat: {t.shape} incompatible with {xs[0].shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), vjp, "concat")


# ---------------------------------------------------------------- nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax_rows")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = xd.dtype.type(_GELU_K)
    c = xd.dtype.type(0.044715)
    half = xd.dtype.type(0.5)
    t = np.tanh(k * (xd + c * xd**3))

    def vjp(g):
        dt = (1 - t * t) * k * (1 + 3 * c * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _result(half * xd * (1 + t), (x,), vjp, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last extent {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g * gd
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), vjp, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax ``logits``."""
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    n = targets.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, targets] -= 1
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` closes over ``params`` and returns a scalar. Up to ``max_coords``
    coordinates per parameter are sampled (all of them when ``None``). The
    error of one coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    Parameters are perturbed in place and restored afterwards.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, float(err))
    return worst
