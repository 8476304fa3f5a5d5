"""Dense-tensor numerics with reverse-mode automatic differentiation.

Everything trainable in this package flows through :class:`Tensor`. The
recorded graph is the linked structure of tensors: each op output keeps
references to its operands plus a backward closure, and ``backward()``
replays the closures in reverse topological order, accumulating (+=) into
parameter ``grad`` slots. Repeated backward calls without zeroing therefore
accumulate gradients, which is the mechanism behind gradient accumulation
in the trainer.

Precision is float32 by default; verification suites switch to float64 via
the ``precision`` context manager. Every forward op fail-fasts on NaN/Inf,
naming the op that produced the bad value.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_DTYPE = np.float32
_NO_GRAD = False
nan_checks = True


class NumericsError(RuntimeError):
    """Raised when a forward op produces NaN/Inf (fail-fast contract)."""


class ShapeError(ValueError):
    """Raised on operand shape mismatch."""


@contextmanager
def precision(dtype):
    """Temporarily set the default dtype ('float32' or 'float64')."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def default_dtype():
    return _DTYPE


def verification_mode() -> bool:
    """True when running in 64-bit verification precision."""
    return np.dtype(_DTYPE) == np.float64


@contextmanager
def no_grad():
    """Disable graph recording (inference / numeric probes)."""
    global _NO_GRAD
    prev = _NO_GRAD
    _NO_GRAD = True
    try:
        yield
    finally:
        _NO_GRAD = prev


def _check_finite(data: np.ndarray, op: str):
    if nan_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out dimensions that numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense row-major array with an optional gradient accumulator."""

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "fc" and arr.dtype != _DTYPE and op == "leaf":
            arr = arr.astype(_DTYPE)
        elif arr.dtype.kind in "iub" and op == "leaf":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad and not _NO_GRAD
        self.grad = None
        self.op = op
        self._prev: tuple = ()
        self._backward = None
        _check_finite(self.data, op)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, op, backward):
        req = any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = req and not _NO_GRAD
        out.grad = None
        out.op = op
        if out.requires_grad:
            out._prev = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        else:
            out._prev = ()
            out._backward = None
        _check_finite(data, op)
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.grad is not None})"

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=_DTYPE))

    def __add__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._ensure_grad()
                self.grad += _unbroadcast(g, self.shape)
            if other.requires_grad:
                other._ensure_grad()
                other.grad += _unbroadcast(g, other.shape)

        return Tensor._from_op(out_data, (self, other), "add", backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._ensure_grad()
            self.grad += -g

        return Tensor._from_op(-self.data, (self,), "neg", backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._ensure_grad()
                self.grad += _unbroadcast(g * other.data, self.shape)
            if other.requires_grad:
                other._ensure_grad()
                other.grad += _unbroadcast(g * self.data, other.shape)

        return Tensor._from_op(out_data, (self, other), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._ensure_grad()
                self.grad += _unbroadcast(g / other.data, self.shape)
            if other.requires_grad:
                other._ensure_grad()
                other.grad += _unbroadcast(-g * self.data / (other.data * other.data), other.shape)

        return Tensor._from_op(out_data, (self, other), "div", backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, power: float):
        out_data = self.data**power

        def backward(g):
            self._ensure_grad()
            self.grad += g * power * self.data ** (power - 1)

        return Tensor._from_op(out_data, (self,), f"pow{power}", backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            self._ensure_grad()
            self.grad += g.reshape(old)

        return Tensor._from_op(out_data, (self,), "reshape", backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def backward(g):
            self._ensure_grad()
            self.grad += g.transpose(inv)

        return Tensor._from_op(out_data, (self,), "transpose", backward)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g):
            self._ensure_grad()
            if isinstance(idx, np.ndarray) or (
                isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx)
            ):
                np.add.at(self.grad, idx, g)
            else:
                self.grad[idx] += g

        return Tensor._from_op(np.ascontiguousarray(out_data), (self,), "getitem", backward)

    def broadcast_to(self, shape):
        orig = self.shape
        out_data = np.broadcast_to(self.data, shape).copy()

        def backward(g):
            self._ensure_grad()
            self.grad += _unbroadcast(g, orig)

        return Tensor._from_op(out_data, (self,), "broadcast", backward)

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            self._ensure_grad()
            if axis is None:
                self.grad += g
            elif keepdims:
                self.grad += np.broadcast_to(g, self.shape)
            else:
                self.grad += np.broadcast_to(np.expand_dims(g, axis), self.shape)

        return Tensor._from_op(np.asarray(out_data), (self,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ---------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._ensure_grad()
            self.grad += g * out_data

        return Tensor._from_op(out_data, (self,), "exp", backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            self._ensure_grad()
            self.grad += g / self.data

        return Tensor._from_op(out_data, (self,), "log", backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._ensure_grad()
            self.grad += g * 0.5 / out_data

        return Tensor._from_op(out_data, (self,), "sqrt", backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._ensure_grad()
            self.grad += g * (1.0 - out_data * out_data)

        return Tensor._from_op(out_data, (self,), "tanh", backward)

    def abs(self):
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(g):
            self._ensure_grad()
            self.grad += g * sign

        return Tensor._from_op(out_data, (self,), "abs", backward)

    def clamp(self, lo=None, hi=None):
        out_data = np.clip(self.data, lo, hi)
        inside = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi

        def backward(g):
            self._ensure_grad()
            self.grad += g * inside

        return Tensor._from_op(out_data, (self,), "clamp", backward)

    # -- autodiff -----------------------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar loss; grads accumulate (+=)."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        self._ensure_grad()
        self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free non-leaf grads and closures so the graph can be collected
        for node in order:
            if node._backward is not None:
                node._backward = None
                if node is not self:
                    node.grad = None
                node._prev = ()


class Param(Tensor):
    """A named trainable tensor; ``no_decay`` marks bias/layer-norm params."""

    def __init__(self, data, name: str, no_decay: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.no_decay = no_decay

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def topo_order(root: Tensor) -> list:
    """All recorded nodes reachable from ``root``, operands before consumers."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# -- free-function ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcast batch dims; backward fills both grads."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)

    return Tensor._from_op(out_data, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: x @ w + b (fused for graph economy)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._ensure_grad()
            x.grad += g @ w.data.T
        if w.requires_grad:
            w._ensure_grad()
            w.grad += x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b.requires_grad:
            b._ensure_grad()
            b.grad += g.reshape(-1, w.shape[1]).sum(axis=0)

    return Tensor._from_op(out_data, (x, w, b), "linear", backward)


def relu(x: Tensor) -> Tensor:
    x = Tensor._coerce(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x._ensure_grad()
        x.grad += g * (x.data > 0)

    return Tensor._from_op(out_data, (x,), "relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor._coerce(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._ensure_grad()
        x.grad += g * out_data * (1.0 - out_data)

    return Tensor._from_op(out_data, (x,), "sigmoid", backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (fixed project-wide)."""
    x = Tensor._coerce(x)
    xd = x.data
    inner = GELU_C * (xd + GELU_A * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        x._ensure_grad()
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        x.grad += g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner)

    return Tensor._from_op(out_data, (x,), "gelu", backward)


ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilized softmax over ``axis``; masked entries come out exactly 0.

    ``mask`` is a 0/1 numpy array broadcastable to ``x``; every slice along
    ``axis`` must keep at least one unmasked entry.
    """
    x = Tensor._coerce(x)
    xd = x.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask).astype(bool), xd.shape)
        if not m.any(axis=axis).all():
            raise ValueError("softmax: fully-masked slice")
        mx = np.max(np.where(m, xd, -np.inf), axis=axis, keepdims=True)
        # masked entries are filled with the row max before exp so the
        # (discarded) exponentials can never overflow
        e = np.where(m, np.exp(np.where(m, xd, mx) - mx), 0.0)
    else:
        mx = np.max(xd, axis=axis, keepdims=True)
        e = np.exp(xd - mx)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._ensure_grad()
        x.grad += out_data * (g - (g * out_data).sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (x,), "softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then gamma*x + beta."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over zero-width axis")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        gg = g * gamma.data
        if x.requires_grad:
            x._ensure_grad()
            x.grad += inv * (
                gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gamma._ensure_grad()
            gamma.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            beta._ensure_grad()
            beta.grad += g.reshape(-1, d).sum(axis=0)

    return Tensor._from_op(out_data, (x, gamma, beta), "layer_norm", backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._ensure_grad()
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return Tensor._from_op(out_data, tuple(tensors), "concat", backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(keep)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, norm floored at 1e-8."""
    u = Tensor._coerce(u)
    v = Tensor._coerce(v)
    if verification_mode():
        import warnings

        for t, tag in ((u, "u"), (v, "v")):
            if float(np.linalg.norm(t.data)) < 1e-8:
                warnings.warn(f"cosine_sim: zero-norm vector {tag}, epsilon-guarded")
    nu = (u * u).sum().clamp(lo=1e-16).sqrt()
    nv = (v * v).sum().clamp(lo=1e-16).sqrt()
    return (u * v).sum() / (nu * nv)


def finite_diff_check(f, params, eps: float = 1e-5, floor: float = 1e-3) -> float:
    """Worst relative error between analytic grads of ``f()`` and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor; run this in float64 precision. The relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar")
    if not np.isfinite(loss.data).all():
        raise NumericsError("finite_diff_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    # the probe loop only reads f() values; skip per-op NaN scans there
    # (the analytic pass above ran with the fail-fast contract intact)
    global nan_checks
    prev_checks = nan_checks
    worst = 0.0
    try:
        nan_checks = False
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                aflat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f().item()
                    flat[i] = orig - eps
                    fm = f().item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    denom = max(abs(aflat[i]), abs(num), floor)
                    worst = max(worst, abs(aflat[i] - num) / denom)
    finally:
        nan_checks = prev_checks
    for p in params:
        p.zero_grad()
    return worst
