"""Dense tensors with a small reverse-mode autograd.

Only the operations the similarity head needs are provided.  Every op works on
arrays with arbitrary leading (batch) axes; the trailing three axes of a
semantic tensor are ``(h, l, d)``.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

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

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate ``grad`` (default ones) to every leaf that requires grad."""
        if not self.requires_grad:
            raise StateError("backward() called on a tensor with no recorded graph")
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor that is trained."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


class ParamSet:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.grad = None

    def count(self) -> int:
        return int(sum(p.data.size for p in self))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            p = self._params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars and constant arrays adopt the tensor operand's dtype
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    basic = all(isinstance(i, (int, slice)) or i is Ellipsis
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


# ---------------------------------------------------------------------------
# reductions


def sum_axes(x, axes, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axes, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(out, (x,), backward)


def amax(x, axes, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    full = x.data.max(axis=axes, keepdims=True)
    out = full if keepdims else np.squeeze(full, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = x.data == full
        return (mask * (g / mask.sum(axis=axes, keepdims=True)),)

    return _result(out, (x,), backward)


_SPATIAL_AXES = {"h": -3, "l": -2}


def pool_axis(t, axes: Iterable[str], mode: str = "avg") -> Tensor:
    """Average or max pool a semantic tensor over any of its ``h``/``l`` axes.

    Reduced axes are dropped; the remaining axes keep their order.
    """
    axes = set(axes)
    if not axes:
        raise ValueError("pool_axis needs at least one of 'h', 'l'")
    if not axes <= set(_SPATIAL_AXES):
        raise ValueError(f"unknown pooling axes {sorted(axes - set(_SPATIAL_AXES))}")
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeError(f"pool_axis expects (..., H, L, D), got {t.shape}")
    idx = tuple(_SPATIAL_AXES[a] for a in sorted(axes))
    if mode == "avg":
        return mean(t, idx)
    if mode == "max":
        return amax(t, idx)
    raise ValueError(f"unknown pooling mode {mode!r}")


# ---------------------------------------------------------------------------
# linear maps


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """``out[..., j] = sum_i w[j, i] * x[..., i] + b[j]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data.T + b.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw, g.sum(axis=lead)

    return _result(out, (x, w, b), backward)


def conv1x1(t, w, b) -> Tensor:
    """Per-position affine map over the feature axis, ``w`` is ``(D', D)``."""
    return affine(t, w, b)


def _same_padding(k: int, r: int) -> tuple[int, int]:
    span = (k - 1) * r + 1
    before = span // 2
    return before, span - 1 - before


def conv2d_dilated(t, w, b, dilation: int = 1) -> Tensor:
    """Dilated 2-D convolution over ``(h, l)`` with zero "same" padding.

    ``w`` has shape ``(k_h, k_l, D_in, D_out)``; the output at ``(i, j)`` sums
    ``A(i + m*r - p_h, j + n*r - p_l, d) * w[m, n, d, d']`` with ``p`` half the
    dilated kernel span, so spatial dims are preserved.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    t, w, b = as_tensor(t), as_tensor(w), as_tensor(b)
    if t.ndim < 3 or w.ndim != 4 or w.shape[2] != t.shape[-1] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d_dilated: input {t.shape}, kernel {w.shape}, bias {b.shape}")
    kh, kl, c_in, c_out = w.shape
    *lead, H, L, _ = t.shape
    x = t.data.reshape(-1, H, L, c_in)
    ph, pl = _same_padding(kh, dilation), _same_padding(kl, dilation)
    xp = np.pad(x, ((0, 0), ph, pl, (0, 0)))
    r = dilation
    out = np.zeros((x.shape[0], H, L, c_out), dtype=np.result_type(x, w.data))
    for m in range(kh):
        for n in range(kl):
            out += xp[:, m * r:m * r + H, n * r:n * r + L, :] @ w.data[m, n]
    out += b.data

    def backward(g):
        g = g.reshape(-1, H, L, c_out)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g.reshape(-1, c_out)
        for m in range(kh):
            for n in range(kl):
                win = (slice(None), slice(m * r, m * r + H), slice(n * r, n * r + L))
                gxp[win] += g @ w.data[m, n].T
                gw[m, n] = xp[win].reshape(-1, c_in).T @ g2
        gx = gxp[:, ph[0]:ph[0] + H, pl[0]:pl[0] + L, :]
        return gx.reshape(t.shape), gw, g2.sum(axis=0)

    return _result(out.reshape(*lead, H, L, c_out), (t, w, b), backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def softmax_axis(m, axis: str = "cols") -> Tensor:
    """Softmax of a matrix along ``rows`` (each column sums to 1) or ``cols``."""
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    return softmax(m, axis=-1 if axis == "cols" else -2)


def instance_norm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Normalise each feature column over the row axis (-2), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-2]
    if n < 2:
        raise ValueError("instance_norm needs at least two rows")
    mu = x.data.mean(axis=-2, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-2, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-2, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / len(labels)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[..., Tensor], *args, params: Sequence[Tensor] = (),
               step: float = 1e-5, seed: int = 0, numeric_dtype=np.longdouble) -> float:
    """Max relative error between autograd and central differences.

    ``args`` are arrays passed to ``f`` as fresh float64 tensors; ``params`` are
    tensors ``f`` reads through its closure.  Both are perturbed coordinate by
    coordinate and the error is ``|a - n| / max(1e-8, |a| + |n|)``.

    The analytic gradient is computed in the tensors' own precision.  The
    perturbed forwards run in ``numeric_dtype`` (extended precision by
    default): in float64 the difference quotient carries roughly
    ``eps * |f| / step`` of roundoff, which exceeds 1e-6 relative error for
    coordinates whose true gradient is below ~1e-5.  Non-scalar outputs are
    contracted with fixed random weights, applied to the output difference.
    Returns ``inf`` when any value is non-finite.
    """
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    targets = inputs + list(params)
    for t in targets:
        t.grad = None
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        return float("inf")
    weights = np.ones(()) if out.data.size == 1 else \
        np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(np.broadcast_to(weights, out.shape))
    analytic = [(t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1) for t in targets]

    saved = [t.data for t in targets]
    for t in targets:
        t.data = t.data.astype(numeric_dtype)
    w = weights.astype(numeric_dtype)

    def evaluate() -> np.ndarray:
        with no_grad():
            return f(*inputs).data.copy()

    worst = 0.0
    try:
        for t, grad in zip(targets, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = evaluate()
                flat[i] = orig - step
                down = evaluate()
                flat[i] = orig
                numeric = float((w * (up - down)).sum() / (2 * step))
                a = float(grad[i])
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    return float("inf")
                worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    finally:
        for t, data in zip(targets, saved):
            t.data = data
    return worst


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
