"""Dense float32 kernels for a decoder-only transformer forward pass.

All kernels are pure functions over numpy float32 arrays and are
deterministic within one build: matmul accumulates in float64 and rounds
once to float32, so the result is independent of accumulation order for
the dot-product lengths used here. Kernels reject non-finite outputs
instead of propagating NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import FiniteError, ShapeError

F32 = np.float32
F64 = np.float64


def _check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FiniteError(f"{name} produced non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded to float32.

    Supports stacked (batched) operands via the numpy matmul broadcasting
    rules; the inner dimensions must agree exactly (no coercion).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    with np.errstate(invalid="ignore"):
        out = np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))
    return _check_finite("matmul", out.astype(F32))


def softmax_rows(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of scale*x along the last axis.

    Computed in float64 with max subtraction, rounded to float32; output
    rows are non-negative and sum to 1 within 1e-6. Rows that are entirely
    -inf (fully masked) are rejected.
    """
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    z = x.astype(F64) * F64(scale)
    m = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise FiniteError("softmax_rows: row with no finite entries")
    e = np.exp(z - m)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return _check_finite("softmax_rows", out.astype(F32))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match x {x.shape}")
    ms = np.mean(np.square(x.astype(F64)), axis=-1, keepdims=True)
    out = x.astype(F64) / np.sqrt(ms + F64(eps)) * gain.astype(F64)
    return _check_finite("rms_norm", out.astype(F32))


def rope_angles(positions: np.ndarray, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape [len(positions), head_dim/2] in float32.

    Pair i of the head dimension rotates by angle pos * theta^(-2i/head_dim).
    """
    if head_dim % 2 != 0:
        raise ShapeError(f"rope requires an even head_dim, got {head_dim}")
    half = head_dim // 2
    freq = np.power(F64(theta), -2.0 * np.arange(half, dtype=F64) / F64(head_dim))
    ang = np.asarray(positions, dtype=F64)[:, None] * freq[None, :]
    return np.cos(ang).astype(F32), np.sin(ang).astype(F32)


def rope_apply(x: np.ndarray, positions, theta: float) -> np.ndarray:
    """Rotate dimension pairs (2i, 2i+1) of x by pos * theta^(-2i/head_dim).

    x has shape [n_positions, ..., head_dim] with head_dim even; middle axes
    (e.g. heads) broadcast. Position 0 leaves the input unchanged and every
    rotation preserves the per-pair Euclidean norm.
    """
    positions = np.asarray(positions)
    if x.shape[0] != positions.shape[0]:
        raise ShapeError(f"rope_apply: {x.shape[0]} rows vs {positions.shape[0]} positions")
    cos, sin = rope_angles(positions, x.shape[-1], theta)
    # broadcast [t, half] across any middle axes of x
    extra = x.ndim - 2
    shape = (x.shape[0],) + (1,) * extra + (x.shape[-1] // 2,)
    cos = cos.reshape(shape).astype(F64)
    sin = sin.reshape(shape).astype(F64)
    even = x[..., 0::2].astype(F64)
    odd = x[..., 1::2].astype(F64)
    out = np.empty_like(x, dtype=F64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return _check_finite("rope_apply", out.astype(F32))


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), numerically stable, float32 out."""
    z = x.astype(F64)
    out = z * (0.5 * (np.tanh(0.5 * z) + 1.0))
    return _check_finite("silu", out.astype(F32))
