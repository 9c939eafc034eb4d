"""A small dense-tensor engine with reverse-mode autodiff, MSE loss and Adam.

Tensors wrap float64 numpy arrays. Every op returns a new Tensor that remembers
its parents and a closure mapping the output gradient to parent gradients.
``backward`` walks the graph once in reverse topological order; gradients of
intermediate nodes live only for the duration of that walk, leaves accumulate
into ``.grad``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphCycle, MissingGradient, NonFiniteDetected, NonFiniteGradient, ShapeMismatch

CHECK_FINITE = True
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar used by the model code
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward_fn, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteDetected(f"non-finite values produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward_fn, op)


def _unbroadcast(grad, shape):
    # sum out leading and stretched axes so grad matches the input shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- core ops


def matmul(a, b):
    """numpy ``@`` semantics, including batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def _matmul_flat(a, b):
    # (..., K) @ (K, M): one GEMM over the flattened leading axes
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(*lead, b.shape[1])

    def back(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}") from exc

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "add")


def mul(a, b):
    """Element-wise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}") from exc

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), back, "mul")


def mul_scalar(x, c):
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def conv1d_k1(x, weight, bias):
    """Kernel-size-1 convolution over time.

    ``x`` is (N, L_in, T), ``weight`` (L_out, L_in) or (L_out, L_in, 1),
    ``bias`` (L_out,); result (N, L_out, T) with
    ``out[n, o, t] = bias[o] + sum_k weight[o, k] * x[n, k, t]``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    w = weight.data.reshape(weight.shape[0], -1)
    if x.ndim != 3 or w.shape[1] != x.shape[1] or bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv1d_k1 x={x.shape} weight={weight.shape} bias={bias.shape}")
    out = np.matmul(w, x.data) + bias.data[None, :, None]

    def back(g):
        gx = np.matmul(w.T, g) if x.requires_grad else None
        gw = np.einsum("not,nkt->ok", g, x.data).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), back, "conv1d_k1")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax_lastdim(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def layer_norm(x, gain=None, bias=None, eps=1e-18):
    """Normalise the last axis to zero mean / unit variance, then apply ``gain``, ``bias``."""
    x = as_tensor(x)
    parents = [x]
    gain = as_tensor(gain) if gain is not None else None
    bias = as_tensor(bias) if bias is not None else None
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None:
            if p.shape != (d,):
                raise ShapeMismatch(f"layer_norm affine must be ({d},), got {p.shape}")
            parents.append(p)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gh = g * gain.data if gain is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None)
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, tuple(parents), back, "layer_norm")


def dropout(x, keep_prob, rng, training=True):
    """Inverted dropout: survivors are scaled by ``1 / keep_prob``."""
    x = as_tensor(x)
    if not training or keep_prob >= 1.0:
        return x
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mean_pool_time(x, factor):
    """Average consecutive groups of ``factor`` steps along axis 1 of (N, T, D)."""
    from .errors import IndivisibleLength

    x = as_tensor(x)
    n, t, d = x.shape
    if factor < 1 or t % factor:
        raise IndivisibleLength(f"pool factor {factor} does not divide T={t}")
    out = x.data.reshape(n, t // factor, factor, d).mean(axis=2)

    def back(g):
        return (np.repeat(g, factor, axis=1) / factor,)

    return _make(out, (x,), back, "mean_pool_time")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat_lastdim(tensors):
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeMismatch("concat_lastdim needs matching leading shapes")
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=-1)), "concat")


def sum_all(x):
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mse_loss(pred, target):
    """Mean of squared errors over every element."""
    pred = as_tensor(pred)
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target_arr.shape:
        raise ShapeMismatch(f"mse_loss {pred.shape} vs {target_arr.shape}")
    diff = pred.data - target_arr
    n = diff.size

    def back(g):
        return (g * 2.0 * diff / n,)

    return _make(np.array((diff * diff).mean()), (pred,), back, "mse")


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key, 0)
        if s == 2:
            continue
        if s == 1:
            raise GraphCycle("computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                ps = state.get(id(p), 0)
                if ps == 1:
                    raise GraphCycle("computation graph contains a cycle")
                if ps == 0:
                    stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient reached a parameter")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def adam_step(state, params):
    """One bias-corrected Adam update with decoupled weight decay.

    Gradients are left in place; the caller zeroes them.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise MissingGradient(f"parameter of shape {p.shape} has no gradient")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * update


def cosine_decay(wd_max, epoch, total_epochs):
    """Weight-decay coefficient for ``epoch`` (0-based), falling from ``wd_max`` to 0."""
    if total_epochs <= 1:
        return wd_max
    return 0.5 * wd_max * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))
