"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every differentiable op records a
backward closure on its output; ``backward`` replays the closures in exact
reverse creation order, which is a valid topological order because outputs
are always created after their inputs. All verification paths run in double
precision so finite-difference checks are meaningful.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class GradientError(RuntimeError):
    """Raised on backward-pass contract violations."""


class NumericsError(ArithmeticError):
    """Raised when a non-finite value is produced in debug mode."""


def _debug_numerics() -> bool:
    return os.environ.get("HIERMEM_DEBUG", "") == "1"


_ids = itertools.count()

# Grad-recording mode is thread-local: retrieval jobs may run forwards on a
# scheduler thread while the main thread keeps building a training graph.
_grad_mode = threading.local()


@contextmanager
def no_grad():
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class ActivationMeter:
    """Counts elements of tensors recorded for backward (retained activations)."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> None:
        self.count = 0


_meter = ActivationMeter()


def activation_meter() -> ActivationMeter:
    return _meter


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_id", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _debug_numerics() and not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite value in tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    """Attach a backward closure if grad mode is on and any parent needs grad."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
        _meter.count += out.data.size
    if _debug_numerics() and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite value produced by op")
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of all requires_grad leaves reachable from ``loss``."""
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise GradientError("repeated backward on the same graph without reset")
    loss._backward_done = True
    loss.accumulate_grad(np.ones_like(loss.data))
    _backprop_from(loss)


def _backprop_from(root: Tensor) -> None:
    """Core reverse sweep; assumes root.grad is already seeded."""
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * s)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T.copy())

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _record(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    d = x.data.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)
        _ = d

    return _record(out, (x, gain, bias), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bw(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
            x.accumulate_grad(g * dx)

    return _record(out, (x,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` by integer ids."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {weight.data.shape[0]} rows")
    out = Tensor(weight.data[idx])

    def bw(g):
        if weight.requires_grad:
            acc = np.zeros_like(weight.data)
            np.add.at(acc, idx, g)
            weight.accumulate_grad(acc)

    return _record(out, (weight,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: empty input")
    widths = {p.data.shape[1] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[p.data.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return _record(out, tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: empty input")
    heights = {p.data.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError(f"concat_cols: incompatible shapes {[p.data.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[:, lo:hi])

    return _record(out, tuple(parts), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {n} rows")
    out = Tensor(x.data[start:stop].copy())

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[start:stop] = g
            x.accumulate_grad(acc)

    return _record(out, (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    n = x.data.shape[1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {n} cols")
    out = Tensor(x.data[:, start:stop].copy())

    def bw(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            acc[:, start:stop] = g
            x.accumulate_grad(acc)

    return _record(out, (x,), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over positions where ``mask`` is true.

    Masked positions get exactly zero weight; an all-false row yields an
    all-zero output row rather than NaN.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.data.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {scores.data.shape}")
    neg = np.where(mask, scores.data, -np.inf)
    rowmax = np.max(neg, axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(mask, np.exp(neg - rowmax), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
    out = Tensor(y)

    def bw(g):
        if scores.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            scores.accumulate_grad(y * (g - dot))

    return _record(out, (scores,), bw)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over rows, numerically stable."""
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if tgt.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {tgt.shape} vs {n} logit rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise ShapeError(f"cross_entropy: target id out of range for {v} classes")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=-1, keepdims=True))
    logp = logits.data - lse
    out = Tensor(np.array(-logp[np.arange(n), tgt].mean()))

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), tgt] -= 1.0
            logits.accumulate_grad(g * p / n)

    return _record(out, (logits,), bw)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.array(x.data.sum()))

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _record(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / as_tensor(x).data.size)


# ---------------------------------------------------------------------------
# gradient checkpointing


def checkpoint_segment(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> Tensor:
    """Run ``fn`` without recording internals; recompute them on backward.

    ``fn`` must be pure and return a single Tensor. Only the inputs and the
    output are retained; the backward pass re-executes ``fn`` on detached
    copies of the inputs, seeds the recomputed output with the upstream
    gradient, and backpropagates through the recomputation. Parameters that
    ``fn`` closes over receive their gradients directly during that inner
    sweep, so results are bit-identical to the non-checkpointed run.
    """
    inputs = [as_tensor(t) for t in inputs]
    if not grad_enabled() or not any(t.requires_grad for t in inputs):
        with no_grad():
            res = fn(*inputs)
        return Tensor(res.data)

    with no_grad():
        fwd = fn(*inputs)
    out = Tensor(fwd.data)

    def bw(g):
        copies = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        re_out = fn(*copies)
        if _debug_numerics() and not np.array_equal(re_out.data, out.data):
            raise GradientError("checkpoint_segment: recompute mismatch (non-pure subgraph?)")
        re_out.accumulate_grad(g)
        _backprop_from(re_out)
        for orig, cp in zip(inputs, copies):
            if orig.requires_grad and cp.grad is not None:
                orig.accumulate_grad(cp.grad)

    return _record(out, tuple(inputs), bw)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon: float = 1e-5, max_coords: int = 24,
                      rng: np.random.Generator | None = None,
                      atol: float = 1e-6) -> float:
    """Max relative error between analytic grads and central differences.

    ``fn`` takes no arguments and returns a scalar loss built from ``params``
    (and anything else it closes over); it is re-evaluated with perturbed
    parameter entries. Samples up to ``max_coords`` coordinates per parameter.
    Coordinates where both the analytic gradient and the central difference
    are below ``atol`` in magnitude count as exact agreement: there the
    central difference is dominated by rounding noise and a relative error
    is meaningless.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = fn()
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite loss in finite_diff_check")
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            with no_grad():
                hi = float(fn().data)
            flat[c] = orig - epsilon
            with no_grad():
                lo = float(fn().data)
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericsError(f"non-finite value at coordinate {int(c)} of {p!r}")
            cd = (hi - lo) / (2 * epsilon)
            a = an.reshape(-1)[c]
            if max(abs(a), abs(cd)) < atol:
                continue
            err = abs(a - cd) / (abs(cd) + 1e-12)
            worst = max(worst, err)
    return worst
