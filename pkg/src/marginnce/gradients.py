"""Angle-space gradients of the margin loss and how the margins rescale them.

With one positive per anchor,

    dL_i/dtheta_ij = (p_ij - beta * q_ij) * sin(theta_ij + m1 * p_ij) / tau

and relative to the margin-free gradient this is a product of a
probability term (p - beta q) / (p - beta q~) and a sine term
sin(theta + m1 p) / sin(theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BetaNotOne, NearSingular
from .geometry import MIN_SIN
from .loss import BatchAngles, MarginParams, logits, probabilities


@dataclass(frozen=True)
class GradientField:
    grad: np.ndarray
    kind: str = "plain"  # plain | with-margins | scheme-modified


@dataclass(frozen=True)
class MultiplierDecomposition:
    prob_term: float
    sin_term: float
    neg_prob_term: float


def grad_theta(batch: BatchAngles, params: MarginParams) -> GradientField:
    batch.positive_index()
    p = batch.targets
    q = probabilities(logits(batch, params), batch.mask)
    g = (p - params.beta * q) * np.sin(batch.angles + params.m1 * p) / params.tau
    g = np.where(batch.mask, g, 0.0)
    kind = "plain" if params.m1 == 0 and params.m2 == 0 else "with-margins"
    return GradientField(g, kind)


def _sin_term(theta, m1):
    """sin(theta + m1) / sin(theta); +inf where sin(theta) < MIN_SIN."""
    theta = np.asarray(theta, dtype=np.float64)
    s = np.sin(theta)
    out = np.full(theta.shape, np.inf)
    np.divide(np.sin(theta + m1), s, out=out, where=np.abs(s) >= MIN_SIN)
    return out


def _shift(theta_pos, params: MarginParams):
    """Change of the positive logit caused by both margins."""
    return (np.cos(theta_pos + params.m1) - np.cos(theta_pos)) / params.tau - params.m2 / params.tau


def _prob_terms(q_tilde_pos, shift, beta):
    """(positive term, negative term) from q~ of the positive and the shift."""
    denom = 1.0 + q_tilde_pos * np.expm1(shift)
    neg = 1.0 / denom
    if beta == 1.0:
        return neg, neg
    q_pos = q_tilde_pos * np.exp(shift) / denom
    pos = (1.0 - beta * q_pos) / (1.0 - beta * q_tilde_pos)
    return pos, neg


def multiplier_terms(theta_pos, q_tilde_pos, params: MarginParams):
    """Vectorized (positive prob term, negative prob term, sin term).

    No validation; the sin term is +inf where sin(theta) < MIN_SIN.
    """
    pos, neg = _prob_terms(np.asarray(q_tilde_pos, dtype=np.float64), _shift(theta_pos, params), params.beta)
    return pos, neg, _sin_term(theta_pos, params.m1)


def multiplier_decomposition(theta_pos: float, q_tilde_pos: float,
                             params: MarginParams) -> MultiplierDecomposition:
    if not 0.0 < q_tilde_pos < 1.0:
        raise ValueError(f"q_tilde_pos must lie in (0, 1), got {q_tilde_pos}")
    if abs(math.sin(theta_pos)) < MIN_SIN:
        raise NearSingular(f"sin({theta_pos}) below {MIN_SIN:g}")
    pos, neg, sin = multiplier_terms(theta_pos, q_tilde_pos, params)
    return MultiplierDecomposition(float(pos), float(sin), float(neg))


def margin_multipliers(batch: BatchAngles, params: MarginParams):
    """Entrywise (prob_term, sin_term) matrices for a whole batch.

    Computed from the margin-free probabilities and the positive's logit
    shift only, never from the margin probabilities themselves.
    """
    pos_idx = batch.positive_index()
    rows = np.arange(batch.shape[0])
    q_tilde = probabilities(logits(batch, params.without_margins()), batch.mask)
    theta_pos = batch.angles[rows, pos_idx]
    pos, neg = _prob_terms(q_tilde[rows, pos_idx], _shift(theta_pos, params), params.beta)
    p = batch.targets
    prob = np.where(p > 0, np.asarray(pos)[:, None], np.asarray(neg)[:, None])
    sin = _sin_term(batch.angles, params.m1 * p)
    return prob, sin


def feasible_qtilde_range(theta_pos: float, batch_size: int, tau: float):
    """Open interval of q~ attainable by the positive given B-1 free negatives."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    c = math.cos(theta_pos)
    n = batch_size - 1
    high = 1.0 / (1.0 + n * math.exp((-1.0 - c) / tau))
    low = 1.0 / (1.0 + n * math.exp((1.0 - c) / tau))
    return low, high


def _require_beta_one(params):
    if params.beta != 1.0:
        raise BetaNotOne(f"closed form requires beta == 1, got {params.beta}")


def attenuation_factor(q_pos, m2, tau):
    return 1.0 / (1.0 - (-np.expm1(-m2 / tau)) * q_pos)


def subtractive_closed_form_grad(batch: BatchAngles, params: MarginParams) -> GradientField:
    """Gradient with margins via probabilities that ignore m2.

    The subtractive margin only enters through one row factor
    1 / (1 - (1 - exp(-m2/tau)) q_il), q evaluated without m2.
    """
    _require_beta_one(params)
    pos_idx = batch.positive_index()
    rows = np.arange(batch.shape[0])
    p = batch.targets
    q_hat = probabilities(logits(batch, params.replace(m2=0.0)), batch.mask)
    factor = attenuation_factor(q_hat[rows, pos_idx], params.m2, params.tau)
    g = (p - q_hat) * np.sin(batch.angles + params.m1 * p) / params.tau * factor[:, None]
    return GradientField(np.where(batch.mask, g, 0.0), "with-margins")


def m2_limit_grad(theta_pos: float, params: MarginParams) -> float:
    """Positive-sample gradient in the limit m2 -> infinity."""
    _require_beta_one(params)
    return math.sin(theta_pos + params.m1) / params.tau


def sign_reversal_threshold(m1: float) -> float:
    """Positive angles above this get a gradient that widens them."""
    if not 0.0 <= m1 < math.pi:
        raise ValueError("m1 must lie in [0, pi)")
    return math.pi - m1
