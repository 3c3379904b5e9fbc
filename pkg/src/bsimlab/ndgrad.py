"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only numpy array. Operations on tensors that
require gradients record a closure-based tape; :func:`backward` walks it in
reverse topological order. :func:`grad_check` compares tape gradients against
central finite differences.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

EPS_NORM = 1e-12

# Active kink trace for grad_check; None outside a probe.
_kink_trace: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "_kink_trace", default=None
)


class DegenerateNorm(ValueError):
    """A vector whose norm is too small to normalize."""


class AntipodalTargets(DegenerateNorm):
    """A lambda-mixture of unit targets collapsed to (near) zero length."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GradCheckError(RuntimeError):
    """The objective failed at a finite-difference probe point."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable dense array node of a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError("tensor shape entries must be positive")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError("operation produced non-finite values")
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.setflags(write=False)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: a tape constant (stop-gradient)."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return Tensor._result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    """max(x, 0) with subgradient 0 at x == 0."""
    a = as_tensor(a)
    active = a.data > 0
    trace = _kink_trace.get()
    if trace is not None:
        trace.append(active)
    return Tensor._result(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes through unchanged.

    Only used to absorb rounding overshoot, so the pass-through is exact
    everywhere the clip is inactive.
    """
    a = as_tensor(a)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# shape and reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def take(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product of an m x k and a k x n tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return Tensor._result(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(a))) along ``axis`` over entries where ``mask`` is True.

    Max-subtracted for stability. Masked-out entries receive zero gradient.
    Keeps the reduced axis.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    if not mask.any(axis=axis).all():
        raise ValueError("logsumexp mask leaves an empty row")
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(xm - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return Tensor._result(out, (a,), lambda g: (g * e / s,))


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, ho, wo, c, k, k) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation. x: (N, C, H, W); w: (F, C, k, k); b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d weight {w.shape} does not match input {x.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        else:
            gx = np.zeros(x.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward)


def batch_norm(x, gamma, beta, eps: float = 1e-5, stats: dict | None = None) -> Tensor:
    """Per-channel batch normalization of (N, C, ...) using the batch's own statistics.

    y = gamma * (x - mean) / sqrt(var + eps) + beta, with the biased variance
    over every axis except 1. When ``stats`` is given, the batch mean and
    variance are stored in it under "mean" and "var".
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm affine shapes {gamma.shape}, {beta.shape} do not match {c} channels")
    axes = (0, *range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.data.size // c
    if m < 2:
        raise ValueError("batch_norm needs at least two values per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if stats is not None:
        stats["mean"] = mu.reshape(c).copy()
        stats["var"] = var.reshape(c).copy()
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        dxhat = g * g_
        gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._result(out, (x, gamma, beta), backward)


def affine_norm(x, gamma, beta, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Inference-mode counterpart of :func:`batch_norm` with fixed statistics."""
    x = as_tensor(x)
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    scale = (1.0 / np.sqrt(np.asarray(var) + eps)).reshape(bshape)
    shift = np.asarray(mean).reshape(bshape)
    return (x - shift) * scale * reshape(as_tensor(gamma), bshape) + reshape(as_tensor(beta), bshape)


# ---------------------------------------------------------------------------
# normalization and similarity


def l2_normalize(v, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateNorm if any norm is <= eps.
    """
    v = as_tensor(v)
    norms = np.sqrt((v.data**2).sum(axis=axis, keepdims=True))
    if (norms <= eps).any():
        raise DegenerateNorm(f"cannot normalize a vector with norm <= {eps:g}")
    return v / sqrt(tsum(v * v, axis=axis, keepdims=True))


def cosine_sim(a, b, eps: float = EPS_NORM) -> Tensor:
    """Cosine similarity along the last axis, clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_sim shapes differ: {a.shape} vs {b.shape}")
    na = l2_normalize(a, eps=eps)
    nb = l2_normalize(b, eps=eps)
    return clamp(tsum(na * nb, axis=-1), -1.0, 1.0)


def cosine_matrix(a, b, eps: float = EPS_NORM) -> Tensor:
    """Pairwise cosine similarities between rows of a (m x d) and b (n x d)."""
    na = l2_normalize(as_tensor(a), eps=eps)
    nb = l2_normalize(as_tensor(b), eps=eps)
    return clamp(matmul(na, transpose(nb)), -1.0, 1.0)


# ---------------------------------------------------------------------------
# backward pass


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Sets ``.grad`` on every node that requires a gradient and returns a map
    from leaf tensors to their gradients. Leaves listed in ``wrt`` that are
    not reachable from ``root`` get exact zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[Tensor, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones(root.shape)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros(node.shape)
            node.grad = g
            if node._backward is None:
                leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if wrt is not None:
        out = {}
        for t in wrt:
            g = leaves.get(t)
            if g is None:
                g = np.zeros(t.shape)
                t.grad = g
            out[t] = g
        return out
    return leaves


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    """Outcome of :func:`grad_check`."""

    max_rel_error: dict[str, float]
    eps: float
    flagged: dict[str, list[tuple]] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _probe(objective, params: Mapping[str, np.ndarray]) -> tuple[float, list]:
    trace: list = []
    token = _kink_trace.set(trace)
    try:
        val = objective({k: Tensor(v) for k, v in params.items()})
    except Exception as exc:  # noqa: BLE001
        raise GradCheckError(f"objective failed at probe point: {exc}") from exc
    finally:
        _kink_trace.reset(token)
    return float(as_tensor(val).data), trace


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    objective: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare tape gradients of ``objective`` with central differences.

    ``objective`` maps a dict of leaf tensors to a scalar tensor. The relative
    error of a coordinate is |g - g_fd| / max(|g|, |g_fd|, 1e-8). Coordinates
    where a relu changes state between the two probes straddle a kink; they
    are excluded and listed in ``flagged``. ``max_coords`` samples at most
    that many coordinates per block.
    """
    if not 1e-8 < eps < 1e-3:
        raise ValueError("eps must lie in (1e-8, 1e-3)")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    try:
        out = objective(leaves)
    except Exception as exc:  # noqa: BLE001
        raise GradCheckError(f"objective failed at base point: {exc}") from exc
    grads = backward(out, wrt=list(leaves.values()))

    report = GradReport(max_rel_error={}, eps=eps)
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, arr in base.items():
        g_auto = grads[leaves[name]]
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        worst = 0.0
        flagged = []
        for flat in coords:
            idx = np.unravel_index(flat, arr.shape)
            probe = dict(base)
            bumped = arr.copy()
            bumped[idx] = arr[idx] + eps
            probe[name] = bumped
            f_plus, tr_plus = _probe(objective, probe)
            bumped = arr.copy()
            bumped[idx] = arr[idx] - eps
            probe[name] = bumped
            f_minus, tr_minus = _probe(objective, probe)
            if not _same_pattern(tr_plus, tr_minus):
                flagged.append(tuple(int(i) for i in idx))
                continue
            g_fd = (f_plus - f_minus) / (2 * eps)
            g = float(g_auto[idx])
            rel = abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)
            worst = max(worst, rel)
        report.max_rel_error[name] = worst
        report.checked[name] = len(coords) - len(flagged)
        if flagged:
            report.flagged[name] = flagged
    return report
