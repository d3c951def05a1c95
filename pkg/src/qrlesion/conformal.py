"""Split-conformal calibration of quantile intervals (CQR)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConformalCalibration:
    margin: float
    n_cal: int
    alpha: float

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(self.margin):
            d["margin"] = "inf"
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ConformalCalibration":
        margin = float(d["margin"]) if d["margin"] != "inf" else math.inf
        return cls(margin, int(d["n_cal"]), float(d["alpha"]))


def conformity_scores(q_lo, q_hi, y):
    """max(q_lo - y, y - q_hi), elementwise.  Negative inside the interval."""
    q_lo, q_hi, y = (np.asarray(a, dtype=np.float64) for a in (q_lo, q_hi, y))
    if not q_lo.shape == q_hi.shape == y.shape:
        raise ValueError("q_lo, q_hi and y must share a shape")
    return np.maximum(q_lo - y, y - q_hi)


def order_statistic_index(n_cal: int, alpha: float) -> int:
    """1-based rank ceil((n+1)(1-alpha)) of the calibrated margin."""
    # the tolerance absorbs representation error in products like 100 * 0.9
    return math.ceil((n_cal + 1) * (1.0 - alpha) - 1e-9)


def calibrate(scores, alpha: float) -> ConformalCalibration:
    """Margin = ceil((n+1)(1-alpha))-th smallest score; +inf if that rank
    exceeds n (too few calibration points for the requested level)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        raise ValueError("calibration set is empty")
    k = order_statistic_index(n, alpha)
    if k > n:
        return ConformalCalibration(math.inf, n, alpha)
    margin = float(np.partition(scores, k - 1)[k - 1])
    return ConformalCalibration(margin, n, alpha)


def conformalize(q_lo, q_hi, cal: ConformalCalibration):
    """Shift both interval endpoints outward by the calibrated margin."""
    if not math.isfinite(cal.margin):
        raise ValueError("cannot conformalize with an infinite margin")
    return np.asarray(q_lo) - cal.margin, np.asarray(q_hi) + cal.margin


def per_pixel_calibrate(q_lo, q_hi, y, alpha: float) -> np.ndarray:
    """Optional per-pixel margins: calibrate each pixel over the leading
    (sample) axis separately.  Returns an array of margins."""
    s = conformity_scores(q_lo, q_hi, y)
    n = s.shape[0]
    k = order_statistic_index(n, alpha)
    if k > n:
        return np.full(s.shape[1:], np.inf)
    return np.partition(s, k - 1, axis=0)[k - 1]
