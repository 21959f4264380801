"""Gradient-rescaling schemes built on the stop-gradient logit construction.

Each scheme produces a weight matrix w.  The training logits are

    delta_scaled = sg(delta) + w * (delta - sg(delta))

whose value is exactly delta and whose gradient is w * d(delta).  Since
delta_ij depends on theta_ij alone, the modified angle gradient is simply
w_ij * dL/dtheta_ij with w held constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateWeight
from .gradients import GradientField, grad_theta
from .loss import BatchAngles, MarginParams, logits, probabilities

SCHEMES = ("none", "pos_emphasis", "curvature", "attenuation_I", "attenuation_II")
ATTENUATION = ("attenuation_I", "attenuation_II")


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "none"
    s: float = 1.0
    c: float = math.inf
    alpha: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.s >= 0:
            raise ConfigError(f"s must be >= 0, got {self.s}")
        if not self.c > 0:
            raise ConfigError(f"c must be > 0 or inf, got {self.c}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


def weight_pos_emphasis(targets, s: float) -> np.ndarray:
    p = np.asarray(targets, dtype=np.float64)
    return (1.0 - p) + s * p


def gamma(x, c: float):
    """Curvature profile |(1 - x^c)^(1/c)| on x clamped to [0, 1].

    c = inf is the constant-one limit (0 at x = 1).
    """
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if math.isinf(c):
        out = np.where(x < 1.0, 1.0, 0.0)
    else:
        out = np.abs((1.0 - x ** c) ** (1.0 / c))
    return out if out.ndim else float(out)


def weight_curvature(batch: BatchAngles, s: float, c: float) -> np.ndarray:
    p = batch.targets
    scale = gamma(batch.angles / math.pi, c) * s
    return np.where(p > 0, scale, 1.0)


def alpha_from_m2(m2: float, tau: float) -> float:
    """Attenuation strength equivalent to a subtractive margin m2."""
    return float(-math.expm1(-m2 / tau))


def _row_attenuation(batch, q_tilde, alpha):
    pos_idx = batch.positive_index()
    q_pos = np.asarray(q_tilde)[np.arange(batch.shape[0]), pos_idx]
    denom = 1.0 - alpha * q_pos
    if np.any(denom <= 1e-12):
        raise DegenerateWeight(f"1 - alpha*q~ = {denom.min():.3g} too small")
    return 1.0 / denom


def weight_attenuation_I(batch: BatchAngles, q_tilde, alpha: float) -> np.ndarray:
    """Whole row scaled by 1 / (1 - alpha * q~ of the positive)."""
    row = _row_attenuation(batch, q_tilde, alpha)
    return np.broadcast_to(row[:, None], batch.shape).copy()


def weight_attenuation_II(batch: BatchAngles, q_tilde, alpha: float) -> np.ndarray:
    """Only the positive entry is scaled by 1 / (1 - alpha * q~)."""
    row = _row_attenuation(batch, q_tilde, alpha)
    return np.where(batch.targets > 0, row[:, None], 1.0)


def scheme_weights(batch: BatchAngles, params: MarginParams, config: SchemeConfig) -> np.ndarray:
    scheme = config.scheme
    if scheme == "none":
        return np.ones(batch.shape)
    if scheme == "pos_emphasis":
        return weight_pos_emphasis(batch.targets, config.s)
    if scheme == "curvature":
        return weight_curvature(batch, config.s, config.c)
    if params.beta == 0:
        raise ConfigError("attenuation schemes need negatives (beta > 0)")
    # q~ is margin-free even when the base loss carries margins
    q_tilde = probabilities(logits(batch, params.without_margins()), batch.mask)
    if scheme == "attenuation_I":
        return weight_attenuation_I(batch, q_tilde, config.alpha)
    return weight_attenuation_II(batch, q_tilde, config.alpha)


def modified_grad(batch: BatchAngles, params: MarginParams, config: SchemeConfig) -> GradientField:
    base = grad_theta(batch, params)
    if config.scheme == "none":
        return base
    w = scheme_weights(batch, params, config)
    return GradientField(w * base.grad, "scheme-modified")


def stop_gradient_logits(delta, weights, frozen=None):
    """Value of sg(delta) + w * (delta - sg(delta)).

    ``frozen`` is the value sg(delta) was taken at; by default it is delta
    itself, so the result equals delta exactly.
    """
    delta = np.asarray(delta)
    frozen = delta if frozen is None else np.asarray(frozen)
    return frozen + weights * (delta - frozen)
