"""From quantile maps to detections.

Two pipelines are supported:

* model-free: a pixel is an outlier when it falls outside ``[q_lo, q_hi]``;
* Gaussian: the quantile pair is converted to a pixelwise mean and standard
  deviation, the image is turned into z-scores, median filtered, converted
  to two-sided p-values and thresholded with Benjamini-Hochberg.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage, special

from .conformal import ConformalCalibration, conformity_scores, conformalize

SIGMA_FLOOR = 1e-3


def normal_ppf(p):
    return special.ndtri(p)


class Moments(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray  # bool map of pixels whose quantiles did not order


def quantiles_to_moments(q_med, q_low, alpha_low: float,
                         floor: float = SIGMA_FLOOR) -> Moments:
    """Gaussian mean/std from the median and a lower quantile.

    mu = q_med and sigma = (q_med - q_low) / Phi^{-1}(1 - alpha_low); for
    alpha_low = 0.15 the divisor is 1.0364.  Pixels with q_low >= q_med get
    ``sigma = floor`` and are flagged in ``degenerate``.
    """
    if not 0.0 < alpha_low < 0.5:
        raise ValueError(f"alpha_low must lie in (0, 0.5), got {alpha_low}")
    q_med = np.asarray(q_med, dtype=np.float64)
    q_low = np.asarray(q_low, dtype=np.float64)
    z_star = normal_ppf(1.0 - alpha_low)
    degenerate = q_low >= q_med
    sigma = np.where(degenerate, floor, (q_med - q_low) / z_star)
    return Moments(q_med.copy(), sigma, degenerate)


def quantile_pair_to_moments(q_lo, q_hi, alpha_lo: float, alpha_hi: float,
                             floor: float = SIGMA_FLOOR) -> Moments:
    """Gaussian moments from any two quantiles alpha_lo < alpha_hi."""
    if not 0.0 < alpha_lo < alpha_hi < 1.0:
        raise ValueError("need 0 < alpha_lo < alpha_hi < 1")
    if alpha_hi == 0.5:
        return quantiles_to_moments(q_hi, q_lo, alpha_lo, floor)
    q_lo = np.asarray(q_lo, dtype=np.float64)
    q_hi = np.asarray(q_hi, dtype=np.float64)
    z_lo, z_hi = normal_ppf(alpha_lo), normal_ppf(alpha_hi)
    degenerate = q_lo >= q_hi
    sigma = np.where(degenerate, floor, (q_hi - q_lo) / (z_hi - z_lo))
    mu = np.where(degenerate, 0.5 * (q_lo + q_hi), q_lo - sigma * z_lo)
    return Moments(mu, sigma, degenerate)


def moments_to_quantile(mu, sigma, alpha: float):
    return np.asarray(mu) + np.asarray(sigma) * normal_ppf(alpha)


def zscore(x, mu, sigma):
    return (np.asarray(x, dtype=np.float64) - mu) / sigma


def pvalue(z):
    """Two-sided normal p-value 2 * (1 - Phi(|z|)), evaluated as erfc."""
    z = np.asarray(z, dtype=np.float64)
    return special.erfc(np.abs(z) / np.sqrt(2.0))


def bh_fdr(p, alpha: float = 0.05):
    """Benjamini-Hochberg step-up procedure.

    Returns ``(threshold, mask)``: the largest sorted p-value p_(k) with
    p_(k) <= k * alpha / m (0.0 when nothing is rejected) and the rejection
    mask ``p <= threshold`` in the input's shape.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("bh_fdr needs at least one p-value")
    flat = np.sort(p.ravel())
    m = flat.size
    ranks = np.arange(1, m + 1)
    passed = np.nonzero(flat <= ranks * alpha / m)[0]
    if passed.size == 0:
        return 0.0, np.zeros(p.shape, dtype=bool)
    threshold = float(flat[passed[-1]])
    return threshold, p <= threshold


def median_filter(image, window: int = 7):
    """Per-pixel median over a ``window x window`` patch, edge replicated."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("median_filter expects a 2-D map")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window > min(image.shape):
        raise ValueError(f"window {window} larger than image {image.shape}")
    return ndimage.median_filter(image, size=window, mode="nearest")


def interval_mask(x, q_lo, q_hi):
    """True where x lies strictly outside [q_lo, q_hi]."""
    x, q_lo, q_hi = (np.asarray(a, dtype=np.float64) for a in (x, q_lo, q_hi))
    if not x.shape == q_lo.shape == q_hi.shape:
        raise ValueError("x, q_lo and q_hi must share a shape")
    return (x < q_lo) | (x > q_hi)


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class QuantileMaps:
    lo: np.ndarray
    hi: np.ndarray
    alpha_lo: float
    alpha_hi: float

    def moments(self, floor: float = SIGMA_FLOOR) -> Moments:
        return quantile_pair_to_moments(self.lo, self.hi, self.alpha_lo,
                                        self.alpha_hi, floor)


@dataclass
class GaussianMaps:
    mu: np.ndarray
    sigma: np.ndarray

    def moments(self, floor: float = SIGMA_FLOOR) -> Moments:
        sigma = np.asarray(self.sigma, dtype=np.float64)
        return Moments(np.asarray(self.mu, dtype=np.float64), sigma,
                       np.zeros(sigma.shape, dtype=bool))


@dataclass
class DetectionResult:
    mask: np.ndarray
    z_map: np.ndarray | None = None
    p_map: np.ndarray | None = None
    fdr_threshold: float = float("nan")
    n_degenerate: int = 0

    @property
    def score_map(self):
        """Per-pixel anomaly score used for ROC analysis."""
        if self.z_map is None:
            return self.mask.astype(np.float64)
        return np.abs(self.z_map)


def gaussian_interval(moments: Moments, alpha: float):
    """Central (1 - alpha) interval implied by pixelwise Gaussian moments."""
    half = normal_ppf(1.0 - alpha / 2.0) * moments.sigma
    return moments.mu - half, moments.mu + half


def calibration_scores(y, maps, mode: str, alpha: float):
    """Conformity scores of calibration images for the interval ``detect``
    will adjust: ``[lo, hi]`` in model-free mode, the implied central
    (1 - alpha) Gaussian interval in Gaussian mode."""
    if mode == "model_free":
        return conformity_scores(maps.lo, maps.hi, y)
    if mode == "gaussian":
        return conformity_scores(*gaussian_interval(maps.moments(), alpha), y)
    raise ValueError(f"unknown mode {mode!r}")


def detect(x, maps, mode: str = "gaussian", alpha: float = 0.05,
           use_conformal: bool = False, cal: ConformalCalibration | None = None,
           filter_window: int | None = 7, filter_on: str = "z") -> DetectionResult:
    """Detect anomalous pixels in a single 2-D image.

    ``mode="model_free"`` flags pixels outside the (optionally conformalized)
    quantile interval; ``maps`` must be :class:`QuantileMaps`.

    ``mode="gaussian"`` converts ``maps`` to moments, computes z-scores,
    median filters them (``filter_on="z"``; ``"p"`` filters p-values instead,
    ``None`` or ``filter_window=None`` skips filtering), converts to two-sided
    p-values and thresholds with BH at ``alpha``.  With conformal calibration
    the standard deviation is widened so that the central (1 - cal.alpha)
    interval grows by ``cal.margin`` on each side.
    """
    x = np.asarray(x, dtype=np.float64)
    if use_conformal and cal is None:
        raise ValueError("use_conformal requires a calibration")
    if mode == "model_free":
        if not isinstance(maps, QuantileMaps):
            raise TypeError("model-free detection needs quantile maps")
        lo, hi = maps.lo, maps.hi
        if use_conformal:
            lo, hi = conformalize(lo, hi, cal)
        return DetectionResult(mask=interval_mask(x, lo, hi))
    if mode != "gaussian":
        raise ValueError(f"unknown mode {mode!r}")

    mom = maps.moments()
    sigma = mom.sigma
    if use_conformal:
        if not np.isfinite(cal.margin):
            raise ValueError("cannot conformalize with an infinite margin")
        sigma = sigma + cal.margin / normal_ppf(1.0 - cal.alpha / 2.0)
        sigma = np.maximum(sigma, SIGMA_FLOOR)
    z = zscore(x, mom.mu, sigma)
    if filter_window and filter_on == "z":
        z = median_filter(z, filter_window)
    p = pvalue(z)
    if filter_window and filter_on == "p":
        p = median_filter(p, filter_window)
    threshold, mask = bh_fdr(p, alpha)
    return DetectionResult(mask=mask, z_map=z, p_map=p, fdr_threshold=threshold,
                           n_degenerate=int(mom.degenerate.sum()))
