"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation eagerly computes its forward value and records a closure
that routes the output gradient back to its parents. ``backward()`` on a
scalar runs the closures in reverse topological order. Gradients inside the
graph are reset on every call, so each backward pass yields the exact
gradient of that one scalar.

The op set is deliberately small: elementwise arithmetic, relu/sigmoid/log,
clip, stride-1 same-padded convolution, per-channel batch normalization,
channel log-sum-exp, per-pixel channel gather, and masked means. That is
enough to express the full training objective of the segmentation model.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


class Tensor:
    """Array node in the autodiff graph; ``value`` is always float64."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        """Populate ``grad`` for every tensor this scalar depends on,
        then release the graph.

        Each op's backprop closure holds a reference to its own output,
        so a finished graph is a tangle of cycles that only the cycle
        collector would reclaim; over a long training run those dead
        graphs pile up faster than gc visits them.  Dropping ``_parents``
        and ``_backprop`` here breaks the cycles so plain refcounting
        frees the intermediates as soon as the caller lets go of the
        loss.  The cost is that a graph can only be walked once; build a
        fresh one per step (the second call raises).
        """
        if self._backprop is None and not self._parents:
            raise ContractViolation("backward() on a tensor with no recorded graph")
        if self.value.size != 1:
            raise ContractViolation("backward() expects a scalar")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backprop is not None:
                node._backprop()
        for node in order:
            node._parents = ()
            node._backprop = None

    # operator sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so aliasing a parent's grad to an
    # upstream array is safe
    t.grad = g if t.grad is None else t.grad + g


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value + b.value

    def backprop():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    out = _make(out_val, (a, b), backprop)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value - b.value

    def backprop():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    out = _make(out_val, (a, b), backprop)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value * b.value

    def backprop():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    out = _make(out_val, (a, b), backprop)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0
    # np.maximum (unlike np.where on the mask) propagates NaN, so numeric
    # failures surface downstream instead of being flushed to zero
    out_val = np.maximum(x.value, 0.0)

    def backprop():
        _accumulate(x, out.grad * mask)

    out = _make(out_val, (x,), backprop)
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    out_val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                       np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def backprop():
        _accumulate(x, out.grad * out_val * (1.0 - out_val))

    out = _make(out_val, (x,), backprop)
    return out


def log(x: Tensor) -> Tensor:
    out_val = np.log(x.value)

    def backprop():
        _accumulate(x, out.grad / x.value)

    out = _make(out_val, (x,), backprop)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes only where unclamped."""
    inside = (x.value >= lo) & (x.value <= hi)
    out_val = np.clip(x.value, lo, hi)

    def backprop():
        _accumulate(x, out.grad * inside)

    out = _make(out_val, (x,), backprop)
    return out


def tsum(x: Tensor) -> Tensor:
    out_val = np.asarray(x.value.sum())

    def backprop():
        _accumulate(x, np.broadcast_to(out.grad, x.value.shape))

    out = _make(out_val, (x,), backprop)
    return out


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over the True entries of a same-shaped boolean mask.

    An empty mask yields the constant 0 and carries no gradient, so loss
    terms over absent pixel roles drop out of the graph entirely.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.value.shape:
        raise ContractViolation(f"mask shape {mask.shape} != value shape {x.value.shape}")
    n = int(mask.sum())
    if n == 0:
        return constant(0.0)
    out_val = np.asarray(x.value.sum(where=mask) / n)

    def backprop():
        _accumulate(x, out.grad * mask / n)

    out = _make(out_val, (x,), backprop)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation over NCHW input with zero 'same' padding.

    Kernels must be square with odd side, so spatial resolution is always
    preserved. Implemented as one dense contraction per kernel offset.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ContractViolation("conv2d expects NCHW input and OIHW weights")
    n, c, h, wd = xv.shape
    co, ci, kh, kw = wv.shape
    if ci != c:
        raise ContractViolation(f"channel mismatch: input {c}, weights expect {ci}")
    if kh != kw or kh % 2 == 0:
        raise ContractViolation("conv2d supports odd square kernels only")
    p = kh // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
    out_val = np.zeros((n, co, h, wd))
    for u in range(kh):
        for v in range(kw):
            out_val += np.einsum(
                "oc,nchw->nohw", wv[:, :, u, v], xp[:, :, u:u + h, v:v + wd],
                optimize=True,
            )
    if b is not None:
        out_val += b.value[None, :, None, None]

    def backprop():
        g = out.grad
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.empty_like(wv)
            for u in range(kh):
                for v in range(kw):
                    gw[:, :, u, v] = np.einsum(
                        "nohw,nchw->oc", g, xp[:, :, u:u + h, v:v + wd], optimize=True,
                    )
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + h, v:v + wd] += np.einsum(
                        "oc,nohw->nchw", wv[:, :, u, v], g, optimize=True,
                    )
            _accumulate(x, gxp[:, :, p:p + h, p:p + wd] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_val, parents, backprop)
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization of NCHW input.

    Training mode normalizes with biased batch statistics and folds them into
    the running averages in place; eval mode uses the running averages.
    """
    xv = x.value
    axes = (0, 2, 3)
    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out_val = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def backprop():
        g = out.grad
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if not x.requires_grad:
            return
        gxhat = g * gamma.value[None, :, None, None]
        if training:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            s1 = gxhat.sum(axis=axes)[None, :, None, None]
            s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = inv[None, :, None, None] / m * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv[None, :, None, None]
        _accumulate(x, gx)

    out = _make(out_val, (x, gamma, beta), backprop)
    return out


def channel_log_sum_exp(x: Tensor) -> Tensor:
    """Per-pixel log-sum-exp over the channel axis of NCHW input; keeps dims."""
    xv = x.value
    m = xv.max(axis=1, keepdims=True)
    out_val = m + np.log(np.exp(xv - m).sum(axis=1, keepdims=True))

    def backprop():
        softmax = np.exp(xv - out_val)
        _accumulate(x, out.grad * softmax)

    out = _make(out_val, (x,), backprop)
    return out


def take_channel(x: Tensor, index_map: np.ndarray) -> Tensor:
    """Gather one channel per pixel: out[n,0,h,w] = x[n, idx[n,h,w], h, w]."""
    idx = np.asarray(index_map)
    if idx.shape != (x.value.shape[0],) + x.value.shape[2:]:
        raise ContractViolation("index map must be (N,H,W) matching the input")
    if idx.min() < 0 or idx.max() >= x.value.shape[1]:
        raise ContractViolation("channel index out of range")
    idx4 = idx[:, None]
    out_val = np.take_along_axis(x.value, idx4, axis=1)

    def backprop():
        gx = np.zeros_like(x.value)
        # each output element maps to exactly one input channel, so a plain
        # put works as scatter-add
        np.put_along_axis(gx, idx4, out.grad, axis=1)
        _accumulate(x, gx)

    out = _make(out_val, (x,), backprop)
    return out
