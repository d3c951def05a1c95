"""Objective functions with analytic gradients.

Every loss reduces by *sum*; callers divide by batch size.  Each function
returns a :class:`LossValue` whose ``grad`` is either one array (gradient
w.r.t. the prediction) or a dict of arrays keyed by argument name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .nn import sigmoid


@dataclass
class LossValue:
    value: float
    grad: np.ndarray | dict


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")
    return arrays


def _check_level(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {alpha}")


def _binary(labels):
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")


def pinball(pred, target, alpha: float) -> LossValue:
    """Check loss sum_i rho_alpha(target_i - pred_i).

    rho_alpha(r) = alpha * r for r > 0 and (1 - alpha) * (-r) otherwise, so the
    loss is nonnegative and its constant minimiser is an alpha-quantile.  The
    subgradient at r = 0 is taken as 0.
    """
    _check_level(alpha)
    pred, target = _same_shape(pred, target)
    r = target - pred
    value = np.where(r > 0, alpha * r, (alpha - 1.0) * r).sum()
    grad = np.where(r > 0, -alpha, np.where(r < 0, 1.0 - alpha, 0.0))
    return LossValue(float(value), grad)


def joint_quantile_loss(preds: Mapping[str, np.ndarray], target, alpha_lo: float,
                        alpha_hi: float) -> LossValue:
    """Sum of two pinball losses for the ``"L"`` and ``"H"`` heads.

    There is no cross term, so each head's gradient depends only on its own
    prediction.
    """
    if not alpha_lo < alpha_hi:
        raise ValueError(f"need alpha_lo < alpha_hi, got {alpha_lo}, {alpha_hi}")
    lo = pinball(preds["L"], target, alpha_lo)
    hi = pinball(preds["H"], target, alpha_hi)
    return LossValue(lo.value + hi.value, {"L": lo.grad, "H": hi.grad})


def gaussian_nll(x, mu, logvar) -> LossValue:
    """Negative Gaussian log-likelihood without the constant term.

    sum_i 0.5 * logvar_i + (x_i - mu_i)^2 / (2 exp(logvar_i)).
    Gradients are returned under ``"mu"`` and ``"logvar"``.
    """
    x, mu, logvar = _same_shape(x, mu, logvar)
    inv_var = np.exp(-logvar)
    r2 = (x - mu) ** 2
    value = 0.5 * (logvar + r2 * inv_var).sum()
    return LossValue(float(value), {"mu": -(x - mu) * inv_var,
                                    "logvar": 0.5 - 0.5 * r2 * inv_var})


def kl_diag_gaussian(mu, logvar) -> LossValue:
    """KL( N(mu, diag(exp(logvar))) || N(0, I) )."""
    mu, logvar = _same_shape(mu, logvar)
    var = np.exp(logvar)
    value = 0.5 * (var + mu ** 2 - 1.0 - logvar).sum()
    return LossValue(float(value), {"mu": mu.copy(), "logvar": 0.5 * (var - 1.0)})


def bqr_objective(logits, labels, tau: float) -> LossValue:
    """Smoothed binary quantile regression, returned as a loss to minimise.

    The maximised objective is sum_i [y_i - (1 - tau)] * sigmoid(f_i); the
    returned value is its negation.  A constant logit is optimally positive
    exactly when the label rate exceeds 1 - tau.
    """
    _check_level(tau)
    logits, labels = _same_shape(logits, labels)
    _binary(labels)
    coef = labels - (1.0 - tau)
    k = sigmoid(logits)
    value = -(coef * k).sum()
    return LossValue(float(value), -coef * k * (1.0 - k))


def _softplus(x):
    return np.logaddexp(0.0, x)


def weighted_bce(logits, labels, weight_pos: float = 1.0) -> LossValue:
    """Binary cross-entropy on logits with the positive class weighted.

    -sum [w * y * log sigmoid(f) + (1 - y) * log(1 - sigmoid(f))]
    """
    if weight_pos <= 0:
        raise ValueError("weight_pos must be positive")
    logits, labels = _same_shape(logits, labels)
    _binary(labels)
    # log sigmoid(f) = -softplus(-f); log(1 - sigmoid(f)) = -softplus(f)
    value = (weight_pos * labels * _softplus(-logits)
             + (1.0 - labels) * _softplus(logits)).sum()
    k = sigmoid(logits)
    grad = -weight_pos * labels * (1.0 - k) + (1.0 - labels) * k
    return LossValue(float(value), grad)
