"""Generalized InfoNCE loss with angular (m1) and subtractive (m2) margins.

Everything works in angle space: a batch is a matrix of angles between
anchors (rows) and candidates (columns) plus a matrix of target
probabilities.  The logits are

    delta_ij = (cos(theta_ij + m1 * p_ij) - m2 * p_ij) / tau

and the per-anchor loss is

    L_i = -sum_j p_ij delta_ij + beta * sum_j p_ij * logsumexp_k(delta_ik).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MarginNCEError


@dataclass(frozen=True)
class MarginParams:
    m1: float = 0.0
    m2: float = 0.0
    tau: float = 0.25
    beta: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise MarginNCEError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.m1 < math.pi:
            raise MarginNCEError(f"m1 must lie in [0, pi), got {self.m1}")
        if not self.m2 >= 0:
            raise MarginNCEError(f"m2 must be >= 0, got {self.m2}")
        if not 0.0 <= self.beta <= 1.0:
            raise MarginNCEError(f"beta must lie in [0, 1], got {self.beta}")

    def without_margins(self) -> "MarginParams":
        return MarginParams(0.0, 0.0, self.tau, self.beta)

    def replace(self, **kw) -> "MarginParams":
        d = dict(m1=self.m1, m2=self.m2, tau=self.tau, beta=self.beta)
        d.update(kw)
        return MarginParams(**d)


def default_mask(targets: np.ndarray) -> np.ndarray:
    """Columns that take part in each anchor's softmax.

    For a square batch the self column (i, i) is dropped unless it is the
    anchor's positive, i.e. unless the batch is laid out as view-a x view-b.
    """
    mask = np.ones(targets.shape, dtype=bool)
    if targets.ndim == 2 and targets.shape[0] == targets.shape[1]:
        diag = np.arange(targets.shape[0])
        mask[diag, diag] = targets[diag, diag] > 0
    return mask


@dataclass(frozen=True)
class BatchAngles:
    """Angles theta[i, j] (anchor i, candidate j) with targets p[i, j].

    ``mask`` marks the columns that belong to each anchor's candidate set;
    it defaults to :func:`default_mask`.
    """

    angles: np.ndarray
    targets: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        angles = np.asarray(self.angles)
        if angles.dtype.kind != "f":
            angles = angles.astype(np.float64)
        targets = np.asarray(self.targets, dtype=angles.dtype)
        if angles.ndim != 2 or angles.shape != targets.shape:
            raise MarginNCEError(
                f"angles {angles.shape} and targets {targets.shape} must be "
                "matching 2-d arrays")
        mask = default_mask(targets) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != angles.shape:
            raise MarginNCEError("mask shape does not match angles")
        if np.any(targets[~mask] != 0):
            raise MarginNCEError("a target lies on a masked-out column")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def one_hot(cls, angles, positives, mask=None) -> "BatchAngles":
        angles = np.asarray(angles, dtype=np.float64)
        targets = np.zeros_like(angles)
        targets[np.arange(angles.shape[0]), np.asarray(positives)] = 1.0
        return cls(angles, targets, mask)

    @property
    def shape(self):
        return self.angles.shape

    def is_one_hot(self) -> bool:
        t = self.targets
        return bool(np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1))

    def positive_index(self) -> np.ndarray:
        """Column of the single positive of each row (requires one-hot)."""
        if not self.is_one_hot():
            raise MarginNCEError("closed-form gradients need exactly one positive per row")
        return np.argmax(self.targets, axis=1)


def logits(batch: BatchAngles, params: MarginParams) -> np.ndarray:
    p = batch.targets
    # theta + m1 may exceed pi; cos is applied as-is
    return (np.cos(batch.angles + params.m1 * p) - params.m2 * p) / params.tau


def _masked(delta, mask):
    if mask is None:
        return delta
    return np.where(mask, delta, -np.inf)


def logsumexp_rows(delta: np.ndarray, mask=None) -> np.ndarray:
    z = _masked(delta, mask)
    top = np.max(z, axis=-1, keepdims=True)
    return top[..., 0] + np.log(np.sum(np.exp(z - top), axis=-1))


def probabilities(delta: np.ndarray, mask=None) -> np.ndarray:
    """Row-wise softmax with max subtraction; masked entries get 0."""
    z = _masked(np.asarray(delta), mask)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_from_logits(delta, targets, beta: float, mask=None) -> np.ndarray:
    targets = np.asarray(targets)
    pos = np.sum(np.where(targets != 0, targets * delta, 0.0), axis=-1)
    lse = logsumexp_rows(delta, mask)
    return -pos + beta * np.sum(targets, axis=-1) * lse


def loss(batch: BatchAngles, params: MarginParams) -> np.ndarray:
    """Per-anchor generalized margin InfoNCE loss."""
    return loss_from_logits(logits(batch, params), batch.targets, params.beta, batch.mask)
