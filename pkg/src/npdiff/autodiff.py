"""Minimal reverse-mode automatic differentiation on numpy arrays.

A forward pass builds a graph of `Tensor` nodes; `backward` on a scalar
replays it in reverse topological order. Gradients are accumulated
additively into leaf tensors, so callers own the zero-grad policy
(`ParamStore.zero_grad` between steps). Two precisions are supported:
float64 for tests and verification, float32 for training runs.

The op set is deliberately small: elementwise arithmetic and activations,
(batched) matmul, reductions, indexing/gather/scatter, segment sums over
sorted segment ids, exclusive cumulative sums, and two attention helpers
with an `exact` mode whose reductions are invariant, bit for bit, under
permutation of the reduced axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import FormatError

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self):
        backward(self)

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap x as a constant Tensor (pass-through for Tensor inputs)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.data.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.data.dtype)
    elif not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Reverse pass from a scalar. Leaf grads accumulate additively."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded graph")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b):
    a, b = _coerce_pair(a, b)
    out = a.data / b.data
    def back(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _make(out, (a, b), back)


def power(a, p):
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power supports scalar exponents only")
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def absolute(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# activations

def leaky_relu(a, negative_slope: float = 0.01):
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, negative_slope * a.data)
    return _make(out, (a,), lambda g: (g * np.where(mask, 1.0, negative_slope).astype(a.data.dtype),))


def gelu(a):
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)
    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf).astype(x.dtype),)
    return _make(out, (a,), back)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    def back(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)
    return _make(out, (a,), back)


def softmax(a, exact: bool = False):
    """Softmax over the last axis.

    With exact=True the normalizer is a sort-then-sum over the last axis,
    which makes the result bitwise invariant under permutation of that
    axis (sorting canonicalizes the float accumulation order).
    """
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    if exact:
        denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    else:
        denom = e.sum(axis=-1, keepdims=True)
    out = e / denom
    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# shape and indexing

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key):
    a = as_tensor(a)
    out = a.data[key]
    def back(g):
        grad = np.zeros_like(a.data)
        grad[key] = g
        return (grad,)
    return _make(out, (a,), back)


def concat(tensors, axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"dtype mismatch in concat: {sorted(map(str, dtypes))}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(tensors), back)


def take_rows(a, idx):
    """Gather rows of a 2-d tensor; duplicate indices allowed."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if a.data.ndim != 2:
        raise ValueError(f"take_rows expects a 2-d tensor, got shape {a.data.shape}")
    out = a.data[idx]
    def back(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)
    return _make(out, (a,), back)


def scatter_rows(a, idx, size: int):
    """Place rows of a 2-d tensor at unique row indices of a zero (size, D) array."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if a.data.ndim != 2:
        raise ValueError(f"scatter_rows expects a 2-d tensor, got shape {a.data.shape}")
    if idx.size != len(np.unique(idx)):
        raise ValueError("scatter_rows requires unique indices")
    out = np.zeros((size, a.data.shape[1]), dtype=a.data.dtype)
    out[idx] = a.data
    return _make(out, (a,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
    return _make(np.asarray(out), (a,), back)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    def back(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
    return _make(np.asarray(out), (a,), back)


def segment_sum(a, segment_ids, num_segments: int):
    """Sum rows of `a` into segments. `segment_ids` must be sorted ascending.

    Empty segments yield zero rows. The per-segment accumulation order is
    the row order of `a`, so callers that sort rows by a permutation
    invariant key get bitwise permutation-invariant sums.
    """
    a = as_tensor(a)
    ids = np.asarray(segment_ids)
    if a.data.ndim != 2 or ids.shape != (a.data.shape[0],):
        raise ValueError(
            f"segment_sum expects (N, D) data with (N,) ids, got {a.data.shape} and {ids.shape}"
        )
    if ids.size and np.any(np.diff(ids) < 0):
        raise ValueError("segment_ids must be sorted ascending")
    if ids.size and (ids[0] < 0 or ids[-1] >= num_segments):
        raise ValueError("segment id out of range")
    out = np.zeros((num_segments, a.data.shape[1]), dtype=a.data.dtype)
    if ids.size:
        starts = np.flatnonzero(np.r_[True, np.diff(ids) > 0])
        out[ids[starts]] = np.add.reduceat(a.data, starts, axis=0)
    def back(g):
        return (g[ids],)
    return _make(out, (a,), back)


def exclusive_cumsum(a, axis: int = -1):
    """out[..., i] = sum of entries strictly before i along axis."""
    a = as_tensor(a)
    c = np.cumsum(a.data, axis=axis)
    out = np.zeros_like(a.data)
    src = [slice(None)] * a.data.ndim
    dst = [slice(None)] * a.data.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = c[tuple(src)]
    def back(g):
        rc = np.cumsum(np.flip(g, axis=axis), axis=axis)
        rc = np.flip(rc, axis=axis)
        grad = np.zeros_like(g)
        grad[tuple(src)] = rc[tuple(dst)]
        return (grad,)
    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# matmul and attention helpers

def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.data.shape} and {b.data.shape}")
    out = np.matmul(a.data, b.data)
    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _make(out, (a, b), back)


def attention_scores(q, k, exact: bool = False):
    """(H, T, d) x (H, S, d) -> (H, T, S) dot products over the head dim.

    exact=True computes each score with a fixed per-element pairwise sum
    over d, so scores move with token permutations bit for bit.
    """
    q, k = _coerce_pair(q, k)
    if exact:
        out = (q.data[:, :, None, :] * k.data[:, None, :, :]).sum(axis=-1)
    else:
        out = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    def back(g):
        gq = np.matmul(g, k.data)
        gk = np.matmul(np.swapaxes(g, -1, -2), q.data)
        return gq, gk
    return _make(out, (q, k), back)


def attention_apply(attn, v, exact: bool = False):
    """(H, T, S) weights applied to (H, S, d) values -> (H, T, d).

    exact=True sorts the S-axis addends before summing; the multiset of
    addends is permutation invariant, so the result is bitwise stable
    under permutation of the S axis.
    """
    attn, v = _coerce_pair(attn, v)
    if exact:
        prod = attn.data[:, :, :, None] * v.data[:, None, :, :]
        out = np.sort(prod, axis=2).sum(axis=2)
    else:
        out = np.matmul(attn.data, v.data)
    def back(g):
        ga = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gv = np.matmul(np.swapaxes(attn.data, -1, -2), g)
        return ga, gv
    return _make(out, (attn, v), back)


# ---------------------------------------------------------------------------
# parameter store and Adam

@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Named parameter arrays with paired grad and Adam moment buffers."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dtype}")
        self.entries: dict[str, ParamEntry] = {}
        self.step = 0
        self._overrides: dict[str, Tensor] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=self.dtype)
        self.entries[name] = ParamEntry(arr, np.zeros_like(arr), np.zeros_like(arr), np.zeros_like(arr))
        return arr

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def get(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def set(self, name: str, value):
        e = self.entries[name]
        arr = np.asarray(value, dtype=self.dtype)
        if arr.shape != e.value.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {e.value.shape}")
        e.value[...] = arr

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor sharing the stored value and grad buffers."""
        if name in self._overrides:
            return self._overrides[name]
        e = self.entries[name]
        t = Tensor.__new__(Tensor)
        t.data = e.value
        t.grad = e.grad
        t.requires_grad = True
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self):
        for e in self.entries.values():
            e.grad[...] = 0

    def overriding(self, tensors: dict):
        """Context manager substituting external tensors for named
        parameters; used to route gradient checks through modules that
        read their weights from a store."""
        store = self

        class _Ctx:
            def __enter__(self):
                store._overrides = dict(tensors)

            def __exit__(self, *exc):
                store._overrides = {}

        return _Ctx()

    def copy(self, values_only: bool = False) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name, e in self.entries.items():
            out.add(name, e.value)
            if not values_only:
                ne = out.entries[name]
                ne.m[...] = e.m
                ne.v[...] = e.v
        if not values_only:
            out.step = self.step
        return out

    def num_params(self) -> int:
        return sum(e.value.size for e in self.entries.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update from the accumulated grads, with bias correction."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for e in store.entries.values():
        g = e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * g * g
        mhat = e.m / c1
        vhat = e.v / c2
        e.value -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# MLPs

_ACTIVATIONS = ("leaky_relu", "gelu", "linear")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack: len(hidden) hidden layers plus a linear output."""
    in_width: int
    hidden: tuple
    out_width: int
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {_ACTIVATIONS}")

    def widths(self):
        return (self.in_width, *self.hidden, self.out_width)


def mlp_init(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator,
             zero_output: bool = False):
    """He-style init for the hidden stack, smaller for the linear output."""
    widths = spec.widths()
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last:
            std = 0.0 if zero_output else 1.0 / np.sqrt(fan_in)
        elif spec.activation == "leaky_relu":
            std = np.sqrt(2.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
        else:
            std = np.sqrt(2.0 / fan_in)
        w = std * rng.standard_normal((fan_in, fan_out)) if std > 0 else np.zeros((fan_in, fan_out))
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_apply(store: ParamStore, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    """Forward through the stack; activation after every layer but the last."""
    if x.shape[-1] != spec.in_width:
        raise ValueError(f"input width {x.shape[-1]} does not match spec in_width {spec.in_width}")
    n_layers = len(spec.hidden) + 1
    h = x
    for i in range(n_layers):
        h = matmul(h, store.tensor(f"{prefix}.w{i}")) + store.tensor(f"{prefix}.b{i}")
        if i < n_layers - 1:
            if spec.activation == "leaky_relu":
                h = leaky_relu(h, LEAKY_SLOPE)
            elif spec.activation == "gelu":
                h = gelu(h)
    return h


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    per_param: dict = field(default_factory=dict)
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    rtol: float = 1e-4
    atol: float = 1e-8
    passed: bool = True

    def __str__(self):
        lines = [f"grad check: passed={self.passed} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e}"]
        for name, (abs_e, rel_e) in self.per_param.items():
            lines.append(f"  {name}: abs={abs_e:.3e} rel={rel_e:.3e}")
        return "\n".join(lines)


def grad_check(fn, point: dict, rtol: float = 1e-4, atol: float = 1e-8,
               h: float = 1e-5, rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of fn against central differences.

    fn maps a dict of name -> Tensor to a scalar Tensor. `point` holds the
    float64 evaluation point. Relative errors are reported over entries
    whose gradient magnitude clears a floor (the larger of `rel_floor`
    and 1e-3 of that parameter's max gradient, so near-zero entries do
    not turn finite-difference noise into large ratios); entries under
    the floor are held to the absolute tolerance instead.
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in point.items()}
    loss = fn(tensors)
    backward(loss)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    report = GradCheckReport(rtol=rtol, atol=atol)
    for name, base in point.items():
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn({k: Tensor(v) for k, v in point.items()}).data)
            flat[i] = orig - h
            down = float(fn({k: Tensor(v) for k, v in point.items()}).data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        a = analytic[name]
        abs_err = np.abs(a - numeric)
        scale = np.maximum(np.abs(a), np.abs(numeric))
        floor = max(rel_floor, 1e-3 * float(scale.max()) if scale.size else rel_floor)
        big = scale > floor
        rel_err = np.zeros_like(abs_err)
        rel_err[big] = abs_err[big] / scale[big]
        max_abs = float(abs_err.max()) if abs_err.size else 0.0
        max_rel = float(rel_err.max()) if rel_err.size else 0.0
        report.per_param[name] = (max_abs, max_rel)
        report.max_abs_error = max(report.max_abs_error, max_abs)
        report.max_rel_error = max(report.max_rel_error, max_rel)
        if max_rel > rtol or float(abs_err[~big].max() if (~big).any() else 0.0) > atol:
            report.passed = False
    return report


# ---------------------------------------------------------------------------
# parameter checkpoint format

PARAMS_MAGIC = b"NPCDPARM"
PARAMS_VERSION = 1


def save_params(store: ParamStore, path, include_moments: bool = False):
    """Write the store as little-endian float32 records."""
    flags = 1 if include_moments else 0
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<IB", PARAMS_VERSION, flags))
        if include_moments:
            f.write(struct.pack("<Q", store.step))
        for name, e in store.entries.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", e.value.ndim))
            f.write(struct.pack(f"<{e.value.ndim}I", *e.value.shape))
            f.write(np.ascontiguousarray(e.value, dtype="<f4").tobytes())
            if include_moments:
                f.write(np.ascontiguousarray(e.m, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(e.v, dtype="<f4").tobytes())


def _read_exactly(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated parameter file while reading {what}")
    return data


def load_params(path, dtype=np.float64) -> ParamStore:
    with open(path, "rb") as f:
        magic = f.read(len(PARAMS_MAGIC))
        if magic != PARAMS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PARAMS_MAGIC!r}")
        version, flags = struct.unpack("<IB", _read_exactly(f, 5, "header"))
        if version != PARAMS_VERSION:
            raise FormatError(f"unsupported parameter file version {version}")
        include_moments = bool(flags & 1)
        store = ParamStore(dtype)
        if include_moments:
            (store.step,) = struct.unpack("<Q", _read_exactly(f, 8, "step counter"))
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated parameter file while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exactly(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exactly(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exactly(f, 4 * rank, "shape"))
            count = int(np.prod(shape)) if rank else 1
            def read_block(what):
                raw = _read_exactly(f, 4 * count, what)
                return np.frombuffer(raw, dtype="<f4").reshape(shape)
            store.add(name, read_block("values"))
            if include_moments:
                e = store.entries[name]
                e.m[...] = read_block("first moments")
                e.v[...] = read_block("second moments")
    return store


STATE_MAGIC = b"NPDSTATE"
STATE_VERSION = 1


def save_training_state(stores: dict, path):
    """Write named stores with full-precision values, Adam moments, and
    step counters; the exact in-memory optimizer state round-trips, so a
    resumed run continues the identical trajectory. Distinct from the
    float32 interchange checkpoints written by save_params."""
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<II", STATE_VERSION, len(stores)))
        for store_name, store in stores.items():
            blob = store_name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<QI", store.step, len(store.entries)))
            for name, e in store.entries.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", e.value.ndim))
                f.write(struct.pack(f"<{e.value.ndim}I", *e.value.shape))
                for arr in (e.value, e.m, e.v):
                    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_training_state(path, dtype=np.float64) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {STATE_MAGIC!r}")
        version, n_stores = struct.unpack("<II", _read_exactly(f, 8, "state header"))
        if version != STATE_VERSION:
            raise FormatError(f"unsupported training state version {version}")
        out = {}
        for _ in range(n_stores):
            (name_len,) = struct.unpack("<I", _read_exactly(f, 4, "store name length"))
            store_name = _read_exactly(f, name_len, "store name").decode("utf-8")
            step, n_entries = struct.unpack("<QI", _read_exactly(f, 12, "store header"))
            store = ParamStore(dtype)
            store.step = step
            for _ in range(n_entries):
                (nl,) = struct.unpack("<I", _read_exactly(f, 4, "entry name length"))
                name = _read_exactly(f, nl, "entry name").decode("utf-8")
                (rank,) = struct.unpack("<I", _read_exactly(f, 4, "rank"))
                shape = struct.unpack(f"<{rank}I", _read_exactly(f, 4 * rank, "shape"))
                count = int(np.prod(shape)) if rank else 1

                def read_block(what):
                    raw = _read_exactly(f, 8 * count, what)
                    return np.frombuffer(raw, dtype="<f8").reshape(shape)

                store.add(name, read_block("values"))
                e = store.entries[name]
                e.m[...] = read_block("first moments")
                e.v[...] = read_block("second moments")
            out[store_name] = store
        if f.read(1):
            raise FormatError("trailing bytes after training state")
    return out
