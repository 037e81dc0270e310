"""Minimal reverse-mode differentiation over dense matrices.

A :class:`Tape` records every primitive application in execution order;
``Tape.backward`` walks the record in reverse and accumulates exact analytic
gradients into every tensor that requires them.  Sparse matrices appear only
as constant left factors of ``sparse_dense_matmul`` (adjacency-style data),
so they never need gradients themselves.

Design constraints honoured throughout:

* gradients accumulate additively across fan-out,
* ``log`` and ``divide`` clamp their domain at ``CLAMP_EPS`` so cross-entropy
  of a confident softmax cannot produce infinities,
* broadcasting is limited to a row or column vector against a matrix.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

CLAMP_EPS = 1e-12
ZSCORE_EPS = 1e-8


class ShapeMismatchError(ValueError):
    """Operand shapes incompatible with the primitive's contract."""


class NondeterministicLossError(RuntimeError):
    """A loss closure returned different values for identical inputs."""


class Tensor:
    """A value on a tape, with an optional same-shape gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value: np.ndarray, requires_grad: bool, tape: "Tape"):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications for one backward pass.

    A tape is single-threaded; run independent tapes for concurrent work.
    With ``debug=True`` every primitive output is checked for NaN/Inf.
    """

    def __init__(self, debug: bool = False):
        self._steps: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.debug = debug

    def parameter(self, value) -> Tensor:
        return Tensor(np.asarray(value), True, self)

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value), False, self)

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None] | None) -> Tensor:
        if self.debug and not np.all(np.isfinite(out.value)):
            raise FloatingPointError("non-finite value produced on tape")
        if backward is not None and out.requires_grad:
            self._steps.append((out, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate in reverse execution order."""
        if loss.tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.value.shape != ():
            raise ShapeMismatchError("backward expects a scalar loss")
        loss.grad = np.ones((), dtype=loss.value.dtype)
        for out, backward in reversed(self._steps):
            if out.grad is not None:
                backward(out.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: callers may hand the same buffer to several parents
        t.grad = np.array(g, dtype=t.value.dtype)
    else:
        t.grad += g


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _binary(a, b) -> tuple[Tensor, Tensor, Tape]:
    tape = _tape_of(a, b)
    return _as_tensor(a, tape), _as_tensor(b, tape), tape


# ---------------------------------------------------------------------------
# dense linear algebra


def matmul(a, b) -> Tensor:
    a, b, tape = _binary(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, a.requires_grad or b.requires_grad, tape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return tape._record(out, backward)


def sparse_dense_matmul(s, d) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor.

    The sparse factor carries structural data (adjacency, incidence) and is
    never differentiated.
    """
    if not sp.issparse(s):
        raise TypeError("left operand must be a scipy sparse matrix")
    if not isinstance(d, Tensor):
        raise TypeError("right operand must be a Tensor")
    if d.value.ndim != 2 or s.shape[1] != d.value.shape[0]:
        raise ShapeMismatchError(f"sparse_dense_matmul: {s.shape} @ {d.shape}")
    tape = d.tape
    s = s.tocsr()
    out = Tensor(s @ d.value, d.requires_grad, tape)

    def backward(g):
        _accumulate(d, s.T @ g)

    return tape._record(out, backward)


def transpose(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    out = Tensor(a.value.T.copy(), a.requires_grad, tape)

    def backward(g):
        _accumulate(a, g.T)

    return tape._record(out, backward)


def trace_product(a, b) -> Tensor:
    """tr(A @ B) without materialising the product."""
    a, b, tape = _binary(a, b)
    if a.value.shape != b.value.shape[::-1]:
        raise ShapeMismatchError(f"trace_product: {a.shape} vs {b.shape}")
    out = Tensor(np.einsum("ij,ji->", a.value, b.value), a.requires_grad or b.requires_grad, tape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.value.T)
        if b.requires_grad:
            _accumulate(b, g * a.value.T)

    return tape._record(out, backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b, tape = _binary(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.value + b.value, a.requires_grad or b.requires_grad, tape)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return tape._record(out, backward)


def subtract(a, b) -> Tensor:
    a, b, tape = _binary(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"subtract: {a.shape} vs {b.shape}")
    out = Tensor(a.value - b.value, a.requires_grad or b.requires_grad, tape)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return tape._record(out, backward)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if len(sa) == 2 and len(sb) == 2:
        # column vector against matrix, or row vector against matrix
        if sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1):
            return True
        if sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1):
            return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo row/column-vector broadcasting by summing the expanded axis
    if g.shape == shape:
        return g
    out = g
    for axis in range(len(shape)):
        if shape[axis] == 1 and g.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


def elementwise_multiply(a, b) -> Tensor:
    a, b, tape = _binary(a, b)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeMismatchError(f"elementwise_multiply: {a.shape} vs {b.shape}")
    out = Tensor(a.value * b.value, a.requires_grad or b.requires_grad, tape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.value, b.value.shape))

    return tape._record(out, backward)


def divide(a, b) -> Tensor:
    """Elementwise a / b with the denominator clamped away from zero."""
    a, b, tape = _binary(a, b)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeMismatchError(f"divide: {a.shape} vs {b.shape}")
    # keep the sign, push magnitude up to the clamp floor
    signs = np.where(b.value < 0, -1.0, 1.0)
    denom = np.where(np.abs(b.value) < CLAMP_EPS, signs * CLAMP_EPS, b.value)
    out = Tensor(a.value / denom, a.requires_grad or b.requires_grad, tape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g / denom, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g * a.value / (denom * denom), b.value.shape))

    return tape._record(out, backward)


def scalar_multiply(c: float, a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    c = float(c)
    out = Tensor(c * a.value, a.requires_grad, tape)

    def backward(g):
        _accumulate(a, c * g)

    return tape._record(out, backward)


def exp(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    out_value = np.exp(a.value)
    out = Tensor(out_value, a.requires_grad, tape)

    def backward(g):
        _accumulate(a, g * out_value)

    return tape._record(out, backward)


def log(a) -> Tensor:
    """Natural log with inputs clamped at CLAMP_EPS; clamped entries get zero grad."""
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    clamped = np.maximum(a.value, CLAMP_EPS)
    out = Tensor(np.log(clamped), a.requires_grad, tape)
    active = a.value > CLAMP_EPS

    def backward(g):
        _accumulate(a, np.where(active, g / clamped, 0.0))

    return tape._record(out, backward)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    positive = a.value > 0
    out = Tensor(np.where(positive, a.value, slope * a.value), a.requires_grad, tape)

    def backward(g):
        _accumulate(a, np.where(positive, g, slope * g))

    return tape._record(out, backward)


def elu(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    positive = a.value > 0
    expm1 = np.expm1(np.minimum(a.value, 0.0))
    out = Tensor(np.where(positive, a.value, expm1), a.requires_grad, tape)

    def backward(g):
        _accumulate(a, np.where(positive, g, g * (expm1 + 1.0)))

    return tape._record(out, backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_columns(parts: Sequence) -> Tensor:
    tape = _tape_of(*parts)
    tensors = [_as_tensor(p, tape) for p in parts]
    rows = tensors[0].value.shape[0]
    if any(t.value.ndim != 2 or t.value.shape[0] != rows for t in tensors):
        raise ShapeMismatchError("concat_columns: row counts differ")
    widths = [t.value.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=1),
                 any(t.requires_grad for t in tensors), tape)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, lo:hi])

    return tape._record(out, backward)


def slice_columns(a, start: int, stop: int) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    if a.value.ndim != 2 or not (0 <= start <= stop <= a.value.shape[1]):
        raise ShapeMismatchError(f"slice_columns: [{start}:{stop}] of {a.shape}")
    out = Tensor(a.value[:, start:stop].copy(), a.requires_grad, tape)

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accumulate(a, full)

    return tape._record(out, backward)


def gather_rows(a, index, scatter: sp.csr_matrix | None = None) -> Tensor:
    """Select rows by index; backward scatter-adds into the source.

    ``scatter`` optionally supplies the precomputed (rows(a), len(index))
    incidence matrix so the backward runs as one sparse product instead of an
    unbuffered scatter loop.
    """
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.value.shape[0])):
        raise ShapeMismatchError("gather_rows: index out of range")
    out = Tensor(a.value[index], a.requires_grad, tape)

    def backward(g):
        if scatter is not None:
            _accumulate(a, scatter @ g)
        else:
            full = np.zeros_like(a.value)
            np.add.at(full, index, g)
            _accumulate(a, full)

    return tape._record(out, backward)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets; backward gathers."""
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape != (a.value.shape[0],):
        raise ShapeMismatchError("segment_sum: one segment id per row required")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise ShapeMismatchError("segment_sum: segment id out of range")
    out_value = np.zeros((num_segments,) + a.value.shape[1:], dtype=a.value.dtype)
    np.add.at(out_value, segment_ids, a.value)
    out = Tensor(out_value, a.requires_grad, tape)

    def backward(g):
        _accumulate(a, g[segment_ids])

    return tape._record(out, backward)


def multi_head_aggregate(alpha, features, src, dst, reduce_src, reduce_dst) -> Tensor:
    """Per-head attention-weighted neighbourhood sums, all heads at once.

    ``alpha`` is (E, H) edge coefficients and ``features`` (n, H*d) per-head
    column blocks; head h of the output row i is
    ``sum over edges e with src[e]=i of alpha[e, h] * features[dst[e], h*d:(h+1)*d]``.
    ``reduce_src`` / ``reduce_dst`` are the constant (n, E) incidence matrices
    that sum per-edge rows into their source / destination node.
    """
    a, f, tape = _binary(alpha, features)
    count = len(dst)
    if a.value.ndim != 2 or a.value.shape[0] != count or f.value.ndim != 2:
        raise ShapeMismatchError(
            f"multi_head_aggregate: alpha {a.shape}, features {f.shape}")
    heads = a.value.shape[1]
    if f.value.shape[1] % heads:
        raise ShapeMismatchError("feature columns must split evenly across heads")
    head_dim = f.value.shape[1] // heads

    def per_head_scale(edge_rows, coefficients):
        return (coefficients[:, :, None] * edge_rows.reshape(count, heads, head_dim)) \
            .reshape(count, heads * head_dim)

    messages = f.value[dst]
    out = Tensor(reduce_src @ per_head_scale(messages, a.value),
                 a.requires_grad or f.requires_grad, tape)

    def backward(g):
        g_per_edge = g[src]
        if a.requires_grad:
            prod = (g_per_edge * messages).reshape(count, heads, head_dim)
            _accumulate(a, prod.sum(axis=2))
        if f.requires_grad:
            _accumulate(f, reduce_dst @ per_head_scale(g_per_edge, a.value))

    return tape._record(out, backward)


# ---------------------------------------------------------------------------
# reductions and normalisations


def sum_all(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    out = Tensor(np.asarray(a.value.sum()), a.requires_grad, tape)

    def backward(g):
        _accumulate(a, g * np.ones_like(a.value))

    return tape._record(out, backward)


def frobenius_sq(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    out = Tensor(np.asarray((a.value * a.value).sum()), a.requires_grad, tape)

    def backward(g):
        _accumulate(a, 2.0 * g * a.value)

    return tape._record(out, backward)


def row_softmax(a) -> Tensor:
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    if a.value.ndim != 2:
        raise ShapeMismatchError("row_softmax expects a matrix")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_value = e / e.sum(axis=1, keepdims=True)
    out = Tensor(out_value, a.requires_grad, tape)

    def backward(g):
        inner = (g * out_value).sum(axis=1, keepdims=True)
        _accumulate(a, out_value * (g - inner))

    return tape._record(out, backward)


def zscore_columns(a) -> Tensor:
    """Column-wise (x - mean) / (population std + eps), differentiated through both."""
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    if a.value.ndim != 2 or a.value.shape[0] < 2:
        raise ShapeMismatchError("zscore_columns needs a matrix with >= 2 rows")
    n = a.value.shape[0]
    centered = a.value - a.value.mean(axis=0)
    sigma = np.sqrt((centered * centered).mean(axis=0))
    denom = sigma + ZSCORE_EPS
    out = Tensor(centered / denom, a.requires_grad, tape)

    def backward(g):
        # through both mean and std; constant columns (sigma=0) are flat
        scale = n * sigma * denom * denom
        safe = np.where(scale == 0.0, 1.0, scale)
        h = g / denom - centered * ((g * centered).sum(axis=0) / safe)
        _accumulate(a, h - h.mean(axis=0))

    return tape._record(out, backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate``, scale by 1/(1-rate)."""
    tape = _tape_of(a)
    a = _as_tensor(a, tape)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.value.dtype, copy=False)
    out = Tensor(a.value * keep, a.requires_grad, tape)

    def backward(g):
        _accumulate(a, g * keep)

    return tape._record(out, backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def gradient_check(loss_fn, params, eps: float = 1e-5, seed: int = 0,
                   max_coords: int | None = None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` receives a list of freshly created leaf tensors (one per entry
    of ``params``) and must return a scalar Tensor on their tape.  It must be
    deterministic: any randomness inside (dropout masks, augmentations) has to
    be reseeded identically on every call.  Non-determinism is detected by a
    repeated base evaluation and raises :class:`NondeterministicLossError`.

    The error denominator is ``max(|analytic|, |numeric|, 1e-8)`` per
    coordinate.  ``max_coords`` caps how many coordinates per parameter are
    probed (sampled with ``seed``); default probes all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        leaves = [tape.parameter(v) for v in values]
        out = loss_fn(leaves)
        if not isinstance(out, Tensor) or out.value.shape != ():
            raise TypeError("loss_fn must return a scalar Tensor")
        return out, leaves, tape

    out1, leaves, tape = evaluate(base)
    out2, _, _ = evaluate(base)
    if float(out1.value) != float(out2.value):
        raise NondeterministicLossError(
            "loss_fn returned different values for identical inputs; seed its randomness")
    tape.backward(out1)
    analytic = [np.zeros_like(v) if leaf.grad is None else leaf.grad
                for v, leaf in zip(base, leaves)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, value in enumerate(base):
        flat_coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            flat_coords = rng.choice(value.size, size=max_coords, replace=False)
        for flat in flat_coords:
            idx = np.unravel_index(flat, value.shape)
            perturbed = [b if i != pi else b.copy() for i, b in enumerate(base)]
            perturbed[pi][idx] = value[idx] + eps
            f_plus = float(evaluate(perturbed)[0].value)
            perturbed[pi][idx] = value[idx] - eps
            f_minus = float(evaluate(perturbed)[0].value)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(analytic[pi][idx])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
