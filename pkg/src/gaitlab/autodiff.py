"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operator set the embedding models need: broadcasted arithmetic,
batched matmul, reshape/transpose/concat/indexing, softmax, relu, reductions,
plus the composite layers (linear, multi-head self-attention, layer norm,
2-channel batch norm, L2 normalization) and a finite-difference gradient
checker. Forward passes are deterministic; the tape is per-output and built
on one thread.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbedding, EmptyBatch, HeadConfigError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction of graph nodes --

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        return Tensor._result(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)
        return Tensor._result(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        return Tensor._result(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return Tensor._result(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        a = self
        p = float(p)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * p * a.data ** (p - 1.0))
        return Tensor._result(a.data ** p, (a,), bw)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / np.sqrt(a.data))
        return Tensor._result(out_data, (a,), bw)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * out_data)
        return Tensor._result(out_data, (a,), bw)

    def relu(self):
        a = self
        mask = a.data > 0

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)
        return Tensor._result(a.data * mask, (a,), bw)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError(
                f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        return Tensor._result(a.data @ b.data, (a, b), bw)

    # -- shape ops --

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old))
        return Tensor._result(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))
        return Tensor._result(a.data.transpose(axes), (a,), bw)

    def swapaxes(self, ax1, ax2):
        axes = list(range(self.data.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(axes)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            if a.requires_grad:
                acc = np.zeros_like(a.data)
                np.add.at(acc, idx, g)
                a._accumulate(acc)
        return Tensor._result(a.data[idx], (a,), bw)

    # -- reductions --

    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy()
                              if np.ndim(g) else np.full_like(a.data, g))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())
        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            if a.requires_grad:
                a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        return Tensor._result(y, (a,), bw)


def concat(tensors, axis=-1):
    tensors = [Tensor._coerce(t) for t in tensors]
    ax = axis if axis >= 0 else tensors[0].data.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name


# -- layers --

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input shape {x.data.shape} incompatible "
                         f"with weight shape {w.data.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def concat_project(parts, w: Tensor, b: Tensor | None = None) -> Tensor:
    return linear(concat(parts, axis=-1), w, b)


def msa(x: Tensor, params: dict, n_heads: int) -> Tensor:
    """Multi-head self-attention over the second-to-last axis (tokens).

    x: (..., T, d). params holds wq/bq, wk/bk, wv/bv, wo/bo, each (d, d)/(d,).
    """
    d = x.data.shape[-1]
    if d % n_heads != 0:
        raise HeadConfigError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    t = x.data.shape[-2]
    lead = x.data.shape[:-2]

    def split_heads(y):
        # (..., T, d) -> (..., h, T, dh)
        y = y.reshape(lead + (t, n_heads, dh))
        return y.swapaxes(-2, -3)

    q = split_heads(linear(x, params["wq"], params.get("bq")))
    k = split_heads(linear(x, params["wk"], params.get("bk")))
    v = split_heads(linear(x, params["wv"], params.get("bv")))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = scores.softmax(axis=-1)
    out = attn @ v                                  # (..., h, T, dh)
    out = out.swapaxes(-2, -3).reshape(lead + (t, d))
    return linear(out, params["wo"], params.get("bo"))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gamma + beta


def l2_normalize(x: Tensor, axis=-1) -> Tensor:
    norm2 = (x * x).sum(axis=axis, keepdims=True)
    if np.any(norm2.data < 1e-24):
        raise DegenerateEmbedding("vector norm below 1e-12, cannot normalize")
    return x / norm2.sqrt()


@dataclass
class BatchNorm2ChState:
    """Learnable 2-channel input normalization (the batch-norm scheme)."""
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(name_prefix="input_bn", n_channels=2, momentum=0.1, eps=1e-5):
        return BatchNorm2ChState(
            gamma=Parameter(np.ones(n_channels), f"{name_prefix}.gamma"),
            beta=Parameter(np.zeros(n_channels), f"{name_prefix}.beta"),
            running_mean=np.zeros(n_channels),
            running_var=np.ones(n_channels),
            momentum=momentum,
            eps=eps,
        )


def batchnorm_2ch(x: Tensor, state: BatchNorm2ChState, training: bool) -> Tensor:
    """Normalize over all axes except the last (channel) axis, size 2."""
    if x.data.shape[0] == 0:
        raise EmptyBatch("batch norm on an empty batch")
    if x.data.shape[-1] != state.gamma.data.shape[0]:
        raise ShapeError(f"expected channel axis of size {state.gamma.data.shape[0]}, "
                         f"got input shape {x.data.shape}")
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(-1)
        xn = xc / (var + state.eps).sqrt()
    else:
        xn = (x - state.running_mean) / np.sqrt(state.running_var + state.eps)
    return xn * state.gamma + state.beta


# -- gradient checking --

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: int


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(f, params, h: float = 1e-5, tolerance: float = 1e-4,
               max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               atol: float = 1e-7) -> GradCheckReport:
    """Compare backward-pass gradients of scalar f() against central differences.

    `f` must rebuild its computation from the current parameter values on each
    call. With `max_coords_per_param`, a random coordinate subset per parameter
    is probed (rng required), which keeps large models checkable. Coordinates
    where both gradients are below `atol` count as agreeing (a zero gradient
    has no meaningful relative error).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    entries = []
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                raise ValueError("coordinate subsampling requires an rng")
            idx = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            idx = np.arange(n)
        ana = analytic[p.name].reshape(-1)
        worst, worst_i = 0.0, -1
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            if abs(num) < atol and abs(ana[i]) < atol:
                continue
            rel = abs(num - ana[i]) / max(abs(num), abs(ana[i]))
            if rel > worst:
                worst, worst_i = rel, int(i)
        entries.append(GradCheckEntry(p.name, worst, worst_i))

    worst_entry = max(entries, key=lambda e: e.max_rel_err)
    return GradCheckReport(
        max_rel_err=worst_entry.max_rel_err,
        worst_param=worst_entry.name,
        tolerance=tolerance,
        entries=entries,
    )
