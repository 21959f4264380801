"""Generalized margin InfoNCE: loss, angle-space gradients, gradient schemes, oracles, simulator."""

from .errors import (BetaNotOne, ConfigError, DegenerateWeight, DimensionMismatch, MarginNCEError,
                     NearSingular, ZeroVector)
from .gradients import (GradientField, MultiplierDecomposition, feasible_qtilde_range, grad_theta,
                        m2_limit_grad, margin_multipliers, multiplier_decomposition,
                        sign_reversal_threshold, subtractive_closed_form_grad)
from .loss import BatchAngles, MarginParams, logits, loss, probabilities
from .schemes import SchemeConfig, alpha_from_m2, gamma, modified_grad

__version__ = "0.1.0"
