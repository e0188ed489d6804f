"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Ops executed while a :class:`Tape` is active are recorded in order; calling
:func:`backward` on a scalar produced on that tape walks the record once in
reverse and accumulates gradients into every reachable :class:`Parameter`.
Outside a tape, ops run forward only.

Custom fused kernels (the rasterizer compositor, cosine rows, ...) plug in
through :func:`primitive`, which takes the forward result and a
vector-Jacobian product closure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "NonDeterminismError",
    "Tensor",
    "Parameter",
    "Tape",
    "primitive",
    "backward",
    "finite_diff_check",
    "adam_step",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "relu",
    "absolute",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "getitem",
    "concat",
    "stack",
    "where",
    "softmax_rows",
    "logsumexp",
    "layer_norm",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class NonDeterminismError(RuntimeError):
    """Two evaluations of the same function at the same point disagreed."""


_TAPES: list["Tape"] = []


class Tensor:
    """Immutable row-major float64 array with an optional place on a tape."""

    __slots__ = ("data", "requires_grad", "name")
    # Make ndarray <op> Tensor defer to the reflected Tensor method.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "constructor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = object.__new__(Tensor)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only size-1 tensors convert to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic sugar.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf: value, accumulated gradient and Adam moments.

    ``data`` is swapped for a fresh immutable array on every update, so
    tensors captured on an old tape keep seeing the values they were built
    from.
    """

    __slots__ = ("grad", "m", "v", "step")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros(self.data.shape)
        self.m = np.zeros(self.data.shape)
        self.v = np.zeros(self.data.shape)
        self.step = 0

    def assign(self, values) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {arr.shape} vs {self.data.shape}")
        _check_finite(arr, "assign")
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.data.shape)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the primitive ops executed while it is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def primitive(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward result and record it on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    for inputs that take no gradient). Broadcast inputs receive cotangents of
    the broadcast shape; they are summed back automatically.
    """
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, op)
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        _TAPES[-1].nodes.append(_Node(op, tuple(inputs), result, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients of every leaf reached.

    Gradients of :class:`Parameter` leaves are also added to ``param.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves.setdefault(key, inp)
    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None:
            continue
        out[t] = g
        if isinstance(t, Parameter):
            t.grad = t.grad + g
    return out


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return primitive("div", (a, b), out, lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return primitive("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return primitive(
        "power", (a,), a.data**p, lambda g: (g * p * a.data ** (p - 1.0),)
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return primitive("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return primitive("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return primitive("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Split by sign so neither branch overflows.
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return primitive("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return primitive("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return primitive("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return primitive("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return primitive(
        "where",
        (a, b),
        np.where(cond, a.data, b.data),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return primitive("matmul", (a, b), out, vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return primitive("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(n, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return primitive("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return primitive(
        "transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),)
    )


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return primitive("take", (a,), out, vjp)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return primitive("getitem", (a,), np.array(out), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return primitive(
        "concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return primitive(
        "stack",
        tensors,
        out,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# Normalisations


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return primitive(
        "softmax_rows",
        (x,),
        out,
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return primitive(
        "logsumexp", (x,), out, lambda g: (np.expand_dims(g, axis) * soft,)
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d == 1 and eps <= 0:
        raise ValueError("layer_norm over a single feature needs eps > 0")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise ZeroDivisionError("layer_norm of a constant row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, g * xhat, g

    return primitive("layer_norm", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------------------
# Gradient oracle and optimiser


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error is ``|g_tape - g_fd| / max(1, |g_fd|)``. ``max_coords``
    caps the number of coordinates probed per parameter (chosen with a
    seeded RNG); ``None`` checks all of them.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    base = f().item()
    if f().item() != base:
        raise NonDeterminismError("function returned different values at the same point")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        orig = p.data
        analytic = p.grad.reshape(-1)
        coords = np.arange(orig.size)
        if max_coords is not None and orig.size > max_coords:
            coords = np.sort(rng.choice(orig.size, size=max_coords, replace=False))
        flat = orig.reshape(-1)
        try:
            for c in coords:
                bumped = flat.copy()
                bumped[c] = flat[c] + h
                p.assign(bumped.reshape(orig.shape))
                fp = f().item()
                bumped[c] = flat[c] - h
                p.assign(bumped.reshape(orig.shape))
                fm = f().item()
                fd = (fp - fm) / (2.0 * h)
                err = abs(analytic[c] - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
        finally:
            p.assign(orig)
    for p in params:
        p.zero_grad()
    return worst


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
        p.zero_grad()
