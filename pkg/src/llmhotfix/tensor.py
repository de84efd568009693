"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every ``Tensor`` produced by an operation records its parents and a backward
closure. Nodes are stamped with a monotonically increasing id when created, so
the recorded graph is a tape: :func:`backward` replays the reachable part of it
in reverse creation order. The graph is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "DistributionError",
    "ZeroMassError",
    "StateError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "concat",
    "gather_last",
    "weighted_nll",
    "kl_rowwise",
    "kl_from_log_probs",
    "backward",
    "Adam",
    "adam_step",
    "numerical_grad",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class DistributionError(ValueError):
    pass


class ZeroMassError(ValueError):
    """All loss weights are zero; callers are expected to skip the example."""


class StateError(RuntimeError):
    pass


_counter = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_counter)

    # -- basic properties -------------------------------------------------
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
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operator overloads ----------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    if exponent == 2:
        return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _lift(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw)


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = _lift(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _node(weight.data[ids], (weight,), bw)


def gather_last(a, idx) -> Tensor:
    """Pick ``a[..., idx[...]]`` along the last axis; ``idx`` has ``a.shape[:-1]``."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), bw)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        return ga, gb

    return _node(out, (a, b), bw)


# -- normalizations -----------------------------------------------------------

def softmax(logits, axis: int = -1) -> Tensor:
    x = _lift(logits)
    if np.isnan(x.data).any():
        raise NumericError("NaN in softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = _lift(logits)
    if np.isnan(x.data).any():
        raise NumericError("NaN in log_softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = _lift(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        d = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        if not gain.requires_grad:
            return gx, None, None
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), bw)


# -- losses ---------------------------------------------------------------------

def weighted_nll(log_probs: Tensor, targets, weights) -> Tensor:
    """Token-weighted negative log-likelihood.

    ``log_probs`` is ``[..., T, V]``; ``targets`` and ``weights`` are ``[..., T]``.
    Each sequence is normalized by its count of nonzero-weight positions, and
    the result keeps the leading batch shape (a scalar for 2-D input).
    """
    log_probs = _lift(log_probs)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != log_probs.shape[:-1] or targets.shape != weights.shape:
        raise ShapeError(
            f"log_probs {log_probs.shape}, targets {targets.shape}, weights {weights.shape} disagree")
    if (weights < 0).any():
        raise ValueError("weights must be non-negative")
    count = np.count_nonzero(weights, axis=-1)
    if (count == 0).any():
        raise ZeroMassError("all-zero weights: no position contributes to the loss")
    picked = gather_last(log_probs, targets)
    total = tsum(picked * weights, axis=-1)
    return total * (-1.0 / count.astype(np.float64))


def kl_from_log_probs(ref_log_probs: np.ndarray, new_log_probs: Tensor, mask) -> Tensor:
    """Masked mean over positions of KL(ref || new); gradient flows into ``new`` only."""
    ref = np.asarray(ref_log_probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if ref.shape != new_log_probs.shape or mask.shape != ref.shape[:-1]:
        raise ShapeError(f"kl shapes disagree: {ref.shape}, {new_log_probs.shape}, mask {mask.shape}")
    n_sel = np.count_nonzero(mask)
    if n_sel == 0:
        raise ZeroMassError("kl mask selects no positions")
    p_ref = np.exp(ref)
    # 0·log 0 contributes nothing
    ref_term = (p_ref * np.where(p_ref > 0, ref, 0.0)).sum(axis=-1)
    cross = tsum(new_log_probs * p_ref, axis=-1)
    per_pos = (cross * -1.0) + ref_term
    return tsum(per_pos * mask) * (1.0 / n_sel)


def kl_rowwise(p_ref, p_new, mask, tol: float = 1e-6) -> Tensor:
    """Masked mean of KL(p_ref || p_new) over rows of probability tables."""
    p_ref_arr = p_ref.data if isinstance(p_ref, Tensor) else np.asarray(p_ref, dtype=np.float64)
    p_new = _lift(p_new)
    for label, arr in (("p_ref", p_ref_arr), ("p_new", p_new.data)):
        sums = arr.sum(axis=-1)
        if (np.abs(sums - 1.0) > tol).any() or (arr < 0).any():
            raise DistributionError(f"{label} rows are not distributions (row sums {sums})")
    with np.errstate(divide="ignore"):
        ref_log = np.log(p_ref_arr)
    return kl_from_log_probs(ref_log, log(p_new), mask)


# -- backward -----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        # intermediates die with the graph, so they may share the buffer
        t.grad = g if t.grad is None else t.grad + g
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# -- optimizer ------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a fixed set of named parameters."""

    def __init__(self, params, learning_rate: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if isinstance(params, dict):
            params = list(params.items())
        else:
            params = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
        self.params: list[tuple[str, Tensor]] = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self, self.params)


def adam_step(opt: Adam, params: Iterable[tuple[str, Tensor]] | None = None) -> None:
    params = list(opt.params if params is None else params)
    for name, p in params:
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if name not in opt.m:
            raise StateError(f"parameter {name!r} is not registered with the optimizer")
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    for name, p in params:
        g = p.grad
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)


# -- finite differences --------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected entries of ``t``.

    Returns an array aligned with ``indices`` (all entries when omitted).
    """
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    out = np.empty(len(indices))
    with no_grad():
        for i, idx in enumerate(indices):
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = fn().item()
            t.data[idx] = orig - h
            fm = fn().item()
            t.data[idx] = orig
            out[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> float:
    """Largest elementwise relative error between analytic and central-difference grads.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With ``max_entries``
    only that many randomly chosen entries per tensor are probed.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        idxs = list(np.ndindex(*t.shape))
        if max_entries is not None and len(idxs) > max_entries:
            pick = rng.choice(len(idxs), size=max_entries, replace=False)
            idxs = [idxs[i] for i in sorted(pick)]
        num = numerical_grad(fn, t, h=h, indices=idxs)
        ana = np.array([analytic[i] for i in idxs])
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
