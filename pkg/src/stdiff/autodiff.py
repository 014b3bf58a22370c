"""Tape-based reverse-mode differentiation for exactly the ops the model uses.

Not a general autodiff: each operation here has a hand-derived backward
pass.  A forward call appends one record to the tape; ``Tape.backward``
replays the records in exact reverse execution order with fixed (row-major)
accumulation, so repeated replays are bit-identical.

Ops accept arbitrary leading batch axes; the documented shapes apply to the
trailing axes.  All arithmetic is double precision.  Set ``STDIFF_DEBUG=1``
to trip on any non-finite intermediate.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError
from .sparse import SparseMatrix

_DEBUG = os.environ.get("STDIFF_DEBUG", "") not in ("", "0")


class Tensor:
    """Dense double-precision value with a lazily allocated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        if _DEBUG and not np.all(np.isfinite(self.value)):
            raise NumericError("non-finite tensor value")
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad


class ParamArray(Tensor):
    """Named trainable tensor; gradient storage always allocated."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._records = []

    def record(self, backward_fn):
        self._records.append(backward_fn)

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        if loss.value.shape != ():
            raise ShapeError("backward starts from a scalar loss")
        loss.ensure_grad()[...] = 1.0
        for fn in reversed(self._records):
            fn()


def _check(t: Tensor) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(t.value)):
        raise NumericError("non-finite op output")
    return t


# -- primitive ops -----------------------------------------------------


def linear(tape: Tape, x: Tensor, theta: Tensor) -> Tensor:
    """Y = X @ Theta on the feature axis; X is (..., r, d_in), Theta (d_in, d_out)."""
    if x.value.ndim < 2 or theta.value.ndim != 2 or x.value.shape[-1] != theta.value.shape[0]:
        raise ShapeError(f"linear shape mismatch {x.shape} @ {theta.shape}")
    out = Tensor(x.value @ theta.value)

    def backward():
        g = out.grad
        x.ensure_grad()
        x.grad += g @ theta.value.T
        theta.ensure_grad()
        theta.grad += x.value.reshape(-1, theta.value.shape[0]).T @ g.reshape(
            -1, theta.value.shape[1])

    tape.record(backward)
    return _check(out)


def _apply_sparse(p: SparseMatrix, arr: np.ndarray) -> np.ndarray:
    """P @ arr over axis -2, preserving leading batch axes."""
    lead = arr.shape[:-2]
    r, d = arr.shape[-2], arr.shape[-1]
    flat = arr.reshape(-1, r, d).transpose(1, 0, 2).reshape(r, -1)
    y = p.matmul_dense(flat)
    return y.reshape(p.rows, -1, d).transpose(1, 0, 2).reshape(lead + (p.rows, d))


def spmm_diff(tape: Tape, p: SparseMatrix, x: Tensor) -> Tensor:
    """Y = P @ X with X (..., rows, d).  P carries no gradient."""
    if x.value.ndim < 2 or x.value.shape[-2] != p.cols:
        raise ShapeError(f"spmm_diff shape mismatch {p.rows}x{p.cols} @ {x.shape}")
    out = Tensor(_apply_sparse(p, x.value))
    pt = p.transpose()

    def backward():
        x.ensure_grad()
        x.grad += _apply_sparse(pt, out.grad)

    tape.record(backward)
    return _check(out)


def layer_norm(tape: Tape, x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last (feature) axis, population variance."""
    d = x.value.shape[-1]
    if scale.value.shape != (d,) or shift.value.shape != (d,):
        raise ShapeError("layer_norm scale/shift must match the feature width")
    mu = x.value.mean(axis=-1, keepdims=True)
    var = ((x.value - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = Tensor(xhat * scale.value + shift.value)

    def backward():
        g = out.grad
        dxhat = g * scale.value
        x.ensure_grad()
        x.grad += (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        axes = tuple(range(g.ndim - 1))
        scale.ensure_grad()
        scale.grad += (g * xhat).sum(axis=axes)
        shift.ensure_grad()
        shift.grad += g.sum(axis=axes)

    tape.record(backward)
    return _check(out)


def temporal_compress(tape: Tape, x: Tensor, kernel: Tensor) -> Tensor:
    """Collapse the snapshot axis: Y[..., i, f] = sum_t X[..., t, i, f] * k[t, f].

    X is (..., m, n, d).  ``kernel`` may have more rows than m (shared kernel
    across iteration tails); only its first m rows participate, and only
    those rows receive gradient.
    """
    if x.value.ndim < 3:
        raise ShapeError("temporal_compress expects (..., m, n, d)")
    m, d = x.value.shape[-3], x.value.shape[-1]
    if kernel.value.ndim != 2 or kernel.value.shape[0] < m or kernel.value.shape[1] != d:
        raise ShapeError(
            f"compression kernel {kernel.shape} incompatible with input {x.shape}"
        )
    k = kernel.value[:m]
    out = Tensor(np.einsum("...tnf,tf->...nf", x.value, k))

    def backward():
        g = out.grad
        x.ensure_grad()
        x.grad += np.einsum("...nf,tf->...tnf", g, k)
        kernel.ensure_grad()
        tail = x.value.shape[-3:]
        kernel.grad[:m] += np.einsum(
            "btnf,bnf->tf", x.value.reshape((-1,) + tail), g.reshape((-1,) + tail[1:]))

    tape.record(backward)
    return _check(out)


def concat_features(tape: Tape, parts: list[Tensor]) -> Tensor:
    """Concatenate along the feature (last) axis; backward splits by offset."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    lead = parts[0].value.shape[:-1]
    for p in parts:
        if p.value.shape[:-1] != lead:
            raise ShapeError("concat parts must agree on all but the last axis")
    widths = [p.value.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=-1))
    offsets = np.cumsum([0] + widths)

    def backward():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.ensure_grad()
            p.grad += g[..., lo:hi]

    tape.record(backward)
    return _check(out)


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.value + b.value)

    def backward():
        a.ensure_grad()
        a.grad += out.grad
        b.ensure_grad()
        b.grad += out.grad

    tape.record(backward)
    return _check(out)


def add_bias(tape: Tape, x: Tensor, b: Tensor) -> Tensor:
    """X + b broadcast over leading axes; b is (d,)."""
    if b.value.shape != (x.value.shape[-1],):
        raise ShapeError("bias width mismatch")
    out = Tensor(x.value + b.value)

    def backward():
        x.ensure_grad()
        x.grad += out.grad
        b.ensure_grad()
        b.grad += out.grad.sum(axis=tuple(range(out.grad.ndim - 1)))

    tape.record(backward)
    return _check(out)


def relu(tape: Tape, x: Tensor) -> Tensor:
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0))

    def backward():
        x.ensure_grad()
        x.grad += np.where(mask, out.grad, 0.0)

    tape.record(backward)
    return _check(out)


def slice_time(tape: Tape, x: Tensor, t0: int, t1: int) -> Tensor:
    """Slice [t0, t1) of the snapshot axis of (..., T, n, d)."""
    if x.value.ndim < 3 or not (0 <= t0 < t1 <= x.value.shape[-3]):
        raise ShapeError(f"bad time slice [{t0}, {t1}) for {x.shape}")
    out = Tensor(x.value[..., t0:t1, :, :].copy())

    def backward():
        x.ensure_grad()
        x.grad[..., t0:t1, :, :] += out.grad

    tape.record(backward)
    return _check(out)


def stack_snapshots(tape: Tape, parts: list[Tensor]) -> Tensor:
    """Stack (..., n, d) tensors into (..., m, n, d) along a new snapshot axis."""
    if not parts:
        raise ShapeError("nothing to stack")
    shape = parts[0].value.shape
    for p in parts:
        if p.value.shape != shape:
            raise ShapeError("stack parts must share one shape")
    out = Tensor(np.stack([p.value for p in parts], axis=-3))

    def backward():
        for t, p in enumerate(parts):
            p.ensure_grad()
            p.grad += out.grad[..., t, :, :]

    tape.record(backward)
    return _check(out)


def concat_time(tape: Tape, parts: list[Tensor]) -> Tensor:
    """Concatenate (..., m_i, n, d) tensors along the snapshot axis."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    tail = parts[0].value.shape[-2:]
    lead = parts[0].value.shape[:-3]
    for p in parts:
        if p.value.ndim < 3 or p.value.shape[-2:] != tail or p.value.shape[:-3] != lead:
            raise ShapeError("concat_time parts must agree on all non-snapshot axes")
    lengths = [p.value.shape[-3] for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=-3))
    offsets = np.cumsum([0] + lengths)

    def backward():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.ensure_grad()
            p.grad += g[..., lo:hi, :, :]

    tape.record(backward)
    return _check(out)


def merge_time(tape: Tape, x: Tensor) -> Tensor:
    """Reshape (..., m, n, d) to the flat (..., m*n, d) vertex layout."""
    if x.value.ndim < 3:
        raise ShapeError("merge_time expects (..., m, n, d)")
    lead = x.value.shape[:-3]
    m, n, d = x.value.shape[-3:]
    out = Tensor(x.value.reshape(lead + (m * n, d)))

    def backward():
        x.ensure_grad()
        x.grad += out.grad.reshape(x.value.shape)

    tape.record(backward)
    return _check(out)


def split_time(tape: Tape, x: Tensor, m: int, n: int) -> Tensor:
    """Inverse of merge_time: (..., m*n, d) to (..., m, n, d)."""
    if x.value.ndim < 2 or x.value.shape[-2] != m * n:
        raise ShapeError(f"cannot split rows {x.shape} into ({m}, {n})")
    lead = x.value.shape[:-2]
    d = x.value.shape[-1]
    out = Tensor(x.value.reshape(lead + (m, n, d)))

    def backward():
        x.ensure_grad()
        x.grad += out.grad.reshape(x.value.shape)

    tape.record(backward)
    return _check(out)


def mlp_decode(
    tape: Tape,
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    horizon: int,
    d_out: int,
) -> Tensor:
    """Two-layer per-vertex MLP emitting all horizons in one pass.

    X is (..., n, d); the feature chain is d -> hidden -> horizon*d_out with a
    positive-part nonlinearity between the layers.  Output is (..., H, n, d_out).
    """
    if w2.value.shape[1] != horizon * d_out:
        raise ShapeError("decoder output layer must emit horizon*d_out features")
    h = relu(tape, add_bias(tape, linear(tape, x, w1), b1))
    o = add_bias(tape, linear(tape, h, w2), b2)
    lead = o.value.shape[:-2]
    n = o.value.shape[-2]
    out = Tensor(
        np.swapaxes(o.value.reshape(lead + (n, horizon, d_out)), -3, -2)
    )

    def backward():
        o.ensure_grad()
        o.grad += np.swapaxes(out.grad, -3, -2).reshape(o.value.shape)

    tape.record(backward)
    return _check(out)


# -- loss --------------------------------------------------------------


def mae_loss(tape: Tape, pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error over all entries; subgradient 0 at exact zeros."""
    target = np.asarray(target, dtype=np.float64)
    if pred.value.shape != target.shape:
        raise ShapeError(f"loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target
    out = Tensor(np.abs(diff).mean())

    def backward():
        pred.ensure_grad()
        pred.grad += out.grad * np.sign(diff) / diff.size

    tape.record(backward)
    return _check(out)


def l2_penalty(tape: Tape, params: list[Tensor], lam: float, *, squared: bool = False) -> Tensor:
    """lam * ||theta||_2 over all entries of all params (or the squared norm)."""
    sq = sum(float((p.value ** 2).sum()) for p in params)
    norm = np.sqrt(sq)
    out = Tensor(lam * (sq if squared else norm))

    def backward():
        g = float(out.grad)
        for p in params:
            p.ensure_grad()
            if squared:
                p.grad += g * lam * 2.0 * p.value
            elif norm > 0.0:
                p.grad += g * lam * p.value / norm

    tape.record(backward)
    return _check(out)


# -- gradient checking -------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_err: float
    entries_checked: int
    passed: bool


def grad_check(
    loss_fn,
    params: list[ParamArray],
    *,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 10000,
    rng: np.random.Generator | None = None,
) -> list[GradCheckReport]:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape) -> Tensor`` must be a pure scalar function of the given
    parameters.  Parameters with more than ``max_entries`` entries are
    subsampled.  Relative error uses a unit floor:
    |a - n| / max(1, |a|, |n|).
    """
    if h <= 0:
        raise ArgumentError("finite-difference step must be positive")
    rng = rng or np.random.default_rng(0)

    def run() -> float:
        val = float(loss_fn(Tape()).value)
        if not np.isfinite(val):
            raise NumericError("non-finite loss during gradient check")
        return val

    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite loss during gradient check")
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    reports = []
    for p in params:
        flat = p.value.reshape(-1)
        n_entries = flat.size
        if n_entries > max_entries:
            idx = rng.choice(n_entries, size=max_entries, replace=False)
        else:
            idx = np.arange(n_entries)
        a_flat = analytic[p.name].reshape(-1)
        max_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = run()
            flat[i] = orig - h
            f_minus = run()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_err = max(max_err, err)
        reports.append(GradCheckReport(p.name, max_err, len(idx), max_err <= tol))
    return reports
