"""
Dense float arrays with a dynamic reverse-mode tape.

Every operation records its parents and a closure mapping the output gradient
to one gradient per parent. backward() walks the recorded graph once, in
reverse topological order, and releases it afterwards.
"""
import math
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import DoubleBackward, NonFinite, NonScalarLoss, ShapeMismatch

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Settings:
    dtype = np.float32
    checked = False
    grad_enabled = True


_settings = _Settings()


@contextmanager
def precision(dtype):
    """Evaluate every operation inside the block at the given float dtype."""
    previous = _settings.dtype
    _settings.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _settings.dtype = previous


@contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    previous = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = previous


def set_checked(flag: bool) -> None:
    """Turn NaN/Inf scanning of every op output on or off."""
    _settings.checked = bool(flag)


def is_checked() -> bool:
    return _settings.checked


def current_dtype():
    return _settings.dtype


class Array:
    """A float tensor that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_settings.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Array", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._released = False

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Array":
        return constant(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # Operators

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

    def __pow__(self, exponent: Scalar):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    # Reverse mode

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise NonScalarLoss(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise DoubleBackward("this loss has already been differentiated")
        if not self.requires_grad:
            self._released = True
            return

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.data.shape)
                existing = pending.get(id(parent))
                pending[id(parent)] = pg if existing is None else existing + pg

        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._released = True
        self._released = True

        if _settings.checked:
            for node in order:
                if node.is_leaf and node.grad is not None and not np.all(np.isfinite(node.grad)):
                    label = node.name or repr(node)
                    raise NonFinite(f"gradient of {label} is not finite")


def _topological_order(root: Array) -> List[Array]:
    order: List[Array] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._released and not node.is_leaf:
            raise DoubleBackward(f"graph through op '{node._op}' was already consumed")
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Array], backward: BackwardFn, op: str) -> Array:
    out = Array.__new__(Array)
    out.data = np.asarray(data).astype(_settings.dtype, copy=False)
    out.grad = None
    out.name = None
    out._released = False
    out._op = op
    needs = _settings.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    if not needs:
        # A constant result is a leaf of any later graph.
        out._op = "leaf"
    if _settings.checked and not np.all(np.isfinite(out.data)):
        raise NonFinite(f"{op} produced a non-finite value")
    return out


def _lift(x) -> Array:
    if isinstance(x, Array):
        return x
    return constant(x)


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


# Constructors

def constant(data) -> Array:
    return Array(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Array:
    return Array(data, requires_grad=True, name=name)


def zeros(shape) -> Array:
    return Array(np.zeros(shape), requires_grad=False)


def ones(shape) -> Array:
    return Array(np.ones(shape), requires_grad=False)


# Elementwise

def _check_broadcast(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Array:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a: Array) -> Array:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Array, exponent: Scalar) -> Array:
    ad = a.data
    p = float(exponent)

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad ** p, (a,), backward, "pow")


def exp(a: Array) -> Array:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Array) -> Array:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs_(a: Array) -> Array:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def gelu(a: Array) -> Array:
    """GELU, tanh approximation."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = c * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, (a,), backward, "gelu")


def softplus(a: Array) -> Array:
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def broadcast_to(a: Array, shape) -> Array:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch("broadcast_to", a.shape, shape) from None
    return _make(np.array(out), (a,), lambda g: (g,), "broadcast_to")


# Linear algebra and layout

def matmul(a, b) -> Array:
    """Batched matrix product; leading axes broadcast, accumulation in float64."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape, detail="batch axes") from None
    ad, bd = a.data, b.data

    def backward(g):
        g64 = _f64(g)
        ga = np.matmul(g64, np.swapaxes(_f64(bd), -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(_f64(ad), -1, -2), g64) if b.requires_grad else None
        return (ga, gb)

    return _make(np.matmul(_f64(ad), _f64(bd)), (a, b), backward, "matmul")


def transpose(a: Array, axes: Optional[Sequence[int]] = None) -> Array:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch("transpose", a.shape, axes, detail="axes must permute the array")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Array, axis1: int, axis2: int) -> Array:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def reshape(a: Array, shape) -> Array:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, shape) from None
    original = a.shape
    return _make(out, (a,), lambda g: (g.reshape(original),), "reshape")


def concat(arrays: Sequence, axis: int = 0) -> Array:
    arrays = [_lift(x) for x in arrays]
    if not arrays:
        raise ShapeMismatch("concat", (), detail="nothing to concatenate")
    ndim = arrays[0].ndim
    axis = axis % ndim
    for x in arrays[1:]:
        if x.ndim != ndim or any(
            x.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeMismatch("concat", arrays[0].shape, x.shape, detail=f"axis={axis}")
    sizes = [x.shape[axis] for x in arrays]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrays))
        )

    return _make(np.concatenate([x.data for x in arrays], axis=axis), arrays, backward, "concat")


def slice_(a: Array, index) -> Array:
    """Basic (non-fancy) indexing."""
    out = a.data[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] += g
        return (full,)

    return _make(np.array(out), (a,), backward, "slice")


# Reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Array, axis=None, keepdims: bool = False) -> Array:
    shape = a.shape
    out = np.sum(_f64(a.data), axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.sum(_f64(a.data), axis=axis, keepdims=keepdims) / count
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,), "mean")


# Normalisation and probabilities

def softmax(a: Array, axis: int = -1) -> Array:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(_f64(e), axis=axis, keepdims=True)
    out = out.astype(_settings.dtype, copy=False)

    def backward(g):
        inner = np.sum(_f64(g * out), axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = _f64(x.data)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd, n = _f64(gamma.data), x.shape[-1]

    def backward(g):
        g64 = _f64(g)
        lead = tuple(range(g64.ndim - 1))
        g_gamma = (g64 * xhat).sum(axis=lead) if gamma.requires_grad else None
        g_beta = g64.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g64 * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, g_gamma, g_beta)

    return _make(xhat * gd + _f64(beta.data), (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Array, targets: np.ndarray) -> Array:
    """Mean negative log-likelihood of integer targets over all leading positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    vocab = logits.shape[-1]
    flat = _f64(logits.data).reshape(-1, vocab)
    idx = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    count = flat.shape[0]
    loss = -log_probs[np.arange(count), idx].sum() / count

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(count), idx] -= 1.0
        return ((probs * (float(g) / count)).reshape(logits.shape),)

    return _make(loss, (logits,), backward, "cross_entropy")


# Image-shaped ops (NHWC)

def upsample2x(x: Array) -> Array:
    """Nearest-neighbour 2x upsampling of (B, H, W, C)."""
    if x.ndim != 4:
        raise ShapeMismatch("upsample2x", x.shape, detail="expected (B, H, W, C)")
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), backward, "upsample2x")


def conv2d(x: Array, w: Array, b: Optional[Array] = None) -> Array:
    """Stride-1 'same' convolution; x (B, H, W, Ci), w (kh, kw, Ci, Co) with odd kh, kw."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    kh, kw, ci, co = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("conv2d", w.shape, detail="kernel extents must be odd")
    bsz, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # (B, H, W, Ci, kh, kw) -> (B*H*W, kh*kw*Ci)
    cols = np.ascontiguousarray(np.transpose(windows, (0, 1, 2, 4, 5, 3))).reshape(-1, kh * kw * ci)
    wmat = w.data.reshape(kh * kw * ci, co)
    out = np.matmul(_f64(cols), _f64(wmat)).reshape(bsz, h, wd, co)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + _f64(b.data)

    def backward(g):
        g2 = _f64(g).reshape(-1, co)
        gw = np.matmul(_f64(cols).T, g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(g2, _f64(wmat).T).reshape(bsz, h, wd, kh, kw, ci)
            gpad = np.zeros((bsz, h + 2 * ph, wd + 2 * pw, ci))
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, ph:ph + h, pw:pw + wd, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")
