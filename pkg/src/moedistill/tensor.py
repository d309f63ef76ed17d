"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: exactly the operations needed for an encoder transformer,
its MoE variant, and the training losses. Everything is numpy underneath;
graphs are built implicitly through parent pointers and walked once in
reverse topological order by ``backward``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / frozen teacher)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; the graph is considered poisoned."""

    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class Tensor:
    """A float64 array plus an optional gradient and graph linkage.

    ``_parents`` is a list of ``(tensor, grad_fn)`` pairs where ``grad_fn``
    maps the output gradient to that parent's gradient contribution.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = []
        self._op = "leaf"
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss to every reachable leaf."""
        if self.data.shape != ():
            raise ShapeError("backward", self.data.shape)
        if self._backward_done:
            raise RuntimeError("backward called twice on the same graph; re-run the forward pass")
        self._backward_done = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.array(1.0)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            for parent, grad_fn in node._parents:
                if not (parent.requires_grad or parent._parents):
                    continue
                pg = grad_fn(g)
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, parents) -> Tensor:
    """Wrap an op result; parents is a list of (Tensor, grad_fn)."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._op = op
    t._backward_done = False
    if _grad_enabled and any(p.requires_grad or p._parents for p, _ in parents):
        t.requires_grad = any(p.requires_grad for p, _ in parents)
        t._parents = list(parents)
    else:
        t.requires_grad = False
        t._parents = []
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make("add", out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _make("sub", out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make("mul", out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _make("matmul", out, [(a, grad_a), (b, grad_b)])


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", out, [(a, lambda g: g * inside)])


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make("log", out, [(a, lambda g: g / a.data)])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, [(a, lambda g: g * out)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))."""
    a = as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _make("gelu", out, [(a, grad)])


# -- reductions and reshaping ----------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make("sum", np.asarray(out, dtype=np.float64), [(a, grad)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)
    return _make("transpose", out, [(a, lambda g: g.transpose(inv))])


def take(a, idx, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by integer index (gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def grad(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return ga

    return _make("take", out, [(a, grad)])


def scatter_rows(values, idx, num_rows: int) -> Tensor:
    """Place ``values[i]`` at row ``idx[i]`` of a zero tensor of ``num_rows`` rows.

    Inverse of ``take`` along axis 0 for unique indices; duplicate indices sum.
    """
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows,) + values.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.data)
    return _make("scatter", out, [(values, lambda g: g[idx])])


def embedding(weight, ids) -> Tensor:
    """Row lookup into an embedding matrix; gradients scatter-add back."""
    return take(weight, np.asarray(ids, dtype=np.int64), axis=0)


# -- fused neural-net ops ---------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make("softmax", out, [(a, grad)])


def layernorm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Layer normalization over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def grad_x(g):
        gx = g * gamma.data
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def grad_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make("layernorm", out, [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; only call during training."""
    a = as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


def mse(pred, target, mask=None) -> Tensor:
    """Mean squared error; with ``mask`` (batch×seq of 0/1), the mean runs
    over non-masked tokens and all trailing feature dims."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    if mask is None:
        w = np.ones(pred.shape)
        count = diff.size
    else:
        m = np.asarray(mask, dtype=np.float64)
        w = m.reshape(m.shape + (1,) * (pred.ndim - m.ndim))
        w = np.broadcast_to(w, pred.shape)
        count = w.sum()
        if count == 0:
            raise ShapeError("mse", mask.shape)
    out = np.asarray((w * diff * diff).sum() / count)

    def grad_pred(g):
        return g * 2.0 * w * diff / count

    def grad_target(g):
        return -g * 2.0 * w * diff / count

    return _make("mse", out, [(pred, grad_pred), (target, grad_target)])


def kl_div(p, q, clamp_eps: float = 1e-12) -> Tensor:
    """KL(p‖q) per row, averaged over rows; inputs clamped to [eps, 1]."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_div", p.shape, q.shape)
    pc = clamp(p, clamp_eps, 1.0)
    qc = clamp(q, clamp_eps, 1.0)
    rows = int(np.prod(p.shape[:-1])) if p.ndim > 1 else 1
    per_elem = mul(pc, sub(log(pc), log(qc)))
    return mul(tsum(per_elem), 1.0 / rows)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean cross-entropy from raw logits and integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = np.asarray(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)

    def grad(g):
        gg = probs.copy()
        gg[np.arange(n), labels] -= 1.0
        return g * gg / n

    return _make("cross_entropy", out, [(logits, grad)])


def masked_mean_rows(x, mask) -> Tensor:
    """Mean of x (batch×seq×d) over the token axis, weighting by ``mask``."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError("masked_mean_rows", x.shape, m.shape)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("masked_mean_rows", m.shape)
    w = m[:, :, None] / counts[:, :, None]
    out = (x.data * w).sum(axis=1)
    return _make("masked_mean_rows", out, [(x, lambda g: g[:, None, :] * w)])


# -- gradient checking ------------------------------------------------------


def finite_diff_check(f, params, step: float = 1e-6, n_samples: int = 50,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic gradients of ``f`` and central
    finite differences over sampled coordinates of ``params``.

    ``f`` must be a deterministic map from the current parameter values to a
    scalar Tensor. Analytic gradients are obtained by one forward/backward;
    each sampled coordinate then costs two extra forward passes.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    coords = []
    for pi, p in enumerate(params):
        for flat in range(p.data.size):
            coords.append((pi, flat))
    if len(coords) > n_samples:
        chosen = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in chosen]

    max_rel = 0.0
    for pi, flat in coords:
        p = params[pi]
        orig = p.data.flat[flat]
        with no_grad():
            p.data.flat[flat] = orig + step
            hi = f().item()
            p.data.flat[flat] = orig - step
            lo = f().item()
            p.data.flat[flat] = orig
        numeric = (hi - lo) / (2.0 * step)
        a = analytic[pi].flat[flat]
        denom = max(abs(a), abs(numeric), 1e-12)
        rel = abs(a - numeric) / denom
        max_rel = max(max_rel, rel)
    return max_rel
