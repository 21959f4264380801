"""Unit vectors, clamped angles and the chain-rule factor d(theta)/dz."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NearSingular, ZeroVector

COS_EPS = 1e-7
MIN_NORM = 1e-30
MIN_SIN = 1e-6


def normalize(v) -> np.ndarray:
    """v / |v|; a vector already unit to rounding comes back unchanged.

    The early return makes normalize bitwise idempotent, which plain
    division is not (about a third of random inputs move by one ulp).
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > MIN_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    if abs(norm - 1.0) <= 4 * v.size * np.finfo(np.float64).eps:
        return v.copy()
    return v / norm


def normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if not np.all(norms > MIN_NORM):
        raise ZeroVector("row with (near) zero norm")
    return m / norms


def clamp_cos(c):
    return np.clip(c, -1.0 + COS_EPS, 1.0 - COS_EPS)


def _check_dims(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape} vs {v.shape}")
    return u, v


def angle(u, v) -> float:
    """Angle between two unit vectors, cosine clamped to [-1+eps, 1-eps]."""
    u, v = _check_dims(u, v)
    return float(np.arccos(clamp_cos(np.dot(u, v))))


def pairwise_angles(za, zb) -> np.ndarray:
    """theta[i, j] = angle(za[i], zb[j]) for row-stacked unit vectors."""
    return np.arccos(clamp_cos(za @ zb.T))


def angle_grad_wrt_embedding(u, v) -> np.ndarray:
    """Tangent-space gradient of angle(u, v) with respect to u.

    Raises NearSingular for (anti)parallel pairs; the caller decides whether
    to skip or damp them.
    """
    u, v = _check_dims(u, v)
    c = float(np.dot(u, v))
    sin = np.sqrt(max(0.0, 1.0 - c * c))
    if sin < MIN_SIN:
        raise NearSingular(f"sin(theta)={sin:.3g} below {MIN_SIN:g}")
    return -(v - c * u) / sin


def pairwise_angle_grads(za, zb):
    """Batched version of angle_grad_wrt_embedding.

    Returns (coef, cos, ok) such that d theta[i, j] / d za[i] equals
    coef[i, j] * (zb[j] - cos[i, j] * za[i]). Pairs with sin below MIN_SIN
    get coef 0 and ok False.
    """
    cos = za @ zb.T
    sin = np.sqrt(np.maximum(0.0, 1.0 - cos * cos))
    ok = sin >= MIN_SIN
    coef = np.zeros_like(cos)
    np.divide(-1.0, sin, out=coef, where=ok)
    return coef, cos, ok
