"""Dense float64 kernels with a pinned accumulation order.

All training math runs through these functions. They are pure (fresh output
arrays, no argument is mutated) and their floating-point evaluation order is
fixed, so identical inputs give bit-identical outputs. ``matmul`` in
particular accumulates over the inner dimension in ascending order, one IEEE
add per term, which makes it exactly equal to a naive triple loop -- that
exactness is what lets higher layers assert bitwise equivalence between the
queued runtime and its serial reference.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


ACTIVATION_KINDS = ("relu", "tanh")


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation (bit-stable).

    Equivalent, bit for bit, to ``out[i,j] = sum_k a[i,k]*b[k,j]`` evaluated
    left to right.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below
        for t in range(a.shape[1]):
            out += a[:, t : t + 1] * b[t]
    return check_finite(out, "matmul output")


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "tanh":
        out = np.tanh(x)
    else:
        raise ValueError(f"unknown activation kind: {kind!r}")
    return check_finite(out, f"{kind} output")


def activation_vjp(kind: str, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """upstream * kind'(x), elementwise. relu uses subgradient 0 at x == 0."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ShapeError(f"vjp shape mismatch: x {x.shape}, upstream {upstream.shape}")
    if kind == "relu":
        out = upstream * (x > 0.0)
    elif kind == "tanh":
        t = np.tanh(x)
        out = upstream * (1.0 - t * t)
    else:
        raise ValueError(f"unknown activation kind: {kind!r}")
    return check_finite(out, f"{kind} vjp")


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Stabilized by row-max subtraction. Gradient is (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x C, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels must have shape ({logits.shape[0]},), got {labels.shape}")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].sum() / n)
    grad = ez / denom
    grad[rows, labels] -= 1.0
    grad /= n
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy loss")
    return loss, check_finite(grad, "cross-entropy gradient")


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_f64(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("non-finite function value during finite differencing")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1e-12, max(|a|, |b|)), a scale-free gradient-check metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(1e-12, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale
