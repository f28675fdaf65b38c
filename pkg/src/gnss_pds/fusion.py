"""Temporal and cross-source fusion of Gaussian intervals, and the decision rule.

Each source's intervals over the window are averaged with normalized
recency weights into one Gaussian ``Z``.  The per-source ``Z`` are then
multiplied together; a product of Gaussians is a scaled Gaussian
``S * N(mu, sigma**2)``.  The log-likelihood of the equally weighted GNSS
average under that product is the test statistic, thresholded at a level
calibrated on benign data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, InsufficientDataError, InvalidInputError

LOG_2PI = math.log(2.0 * math.pi)


def temporal_weights(offsets, bandwidth: float = 1.0) -> np.ndarray:
    """Gaussian recency weights over window offsets, normalized to sum to 1.

    ``offsets`` are ``t' - t`` (non-positive for past epochs).
    """
    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    offsets = np.asarray(offsets, dtype=float)
    if offsets.size == 0:
        raise InsufficientDataError("empty window")
    u = offsets / bandwidth
    w = np.exp(-(u * u - np.min(u * u)))
    return w / w.sum()


def temporal_fuse(means, variances, weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of independent Gaussians: mean ``sum K m``, variance ``sum K**2 v``.

    Returns the mean and per-axis standard deviation.
    """
    means = np.asarray(means, dtype=float).reshape(-1, 2)
    variances = np.asarray(variances, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float)
    if len(means) == 0:
        raise InsufficientDataError("empty interval window")
    if len(weights) != len(means) or len(variances) != len(means):
        raise InvalidInputError("window lengths differ")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InvalidInputError("temporal weights must be non-negative and sum to 1")
    z_mean = weights @ means
    z_var = (weights * weights) @ variances
    return z_mean, np.sqrt(z_var)


@dataclass(frozen=True)
class FusedGaussian:
    """Per-axis ``S * N(mean, sigma**2)``, with ``log S`` kept per axis."""

    mean: np.ndarray
    sigma: np.ndarray
    log_scale: np.ndarray
    n_sources: int = 1


def categorical_fuse(means, sigmas) -> FusedGaussian:
    """Product of per-source Gaussians, axis by axis.

    Parameters
    ----------
    means, sigmas : array_like, shape (M, 2)
        One row per source.
    """
    means = np.asarray(means, dtype=float).reshape(-1, 2)
    sigmas = np.asarray(sigmas, dtype=float).reshape(-1, 2)
    if len(means) == 0:
        raise InsufficientDataError("no sources to fuse")
    if np.any(~(sigmas > 0)) or not np.all(np.isfinite(sigmas)):
        raise InvalidInputError("every sigma must be positive and finite")
    prec = sigmas ** -2.0
    var = 1.0 / prec.sum(axis=0)
    mu = var * (prec * means).sum(axis=0)
    m = len(means)
    # sum_m mu_m^2 / s_m^2 - mu^2 / s^2, rewritten around mu for stability
    spread = (prec * (means - mu) ** 2).sum(axis=0)
    log_s = -0.5 * (m - 1) * LOG_2PI + 0.5 * np.log(var) - np.log(sigmas).sum(axis=0) - 0.5 * spread
    return FusedGaussian(mu, np.sqrt(var), log_s, m)


def log_likelihood(fused: FusedGaussian, weighted_gnss) -> float:
    """``sum over axes of log S + log N(g; mu, sigma**2)``."""
    g = np.asarray(weighted_gnss, dtype=float).reshape(2)
    z = (g - fused.mean) / fused.sigma
    per_axis = fused.log_scale - 0.5 * LOG_2PI - np.log(fused.sigma) - 0.5 * z * z
    return float(per_axis.sum())


def is_attack(ll: float, gamma: float) -> bool:
    return bool(ll <= gamma)


def calibrate_threshold(benign_lls, p_fp_max: float, min_samples: int = 20) -> float:
    """Threshold whose empirical false-positive rate on ``benign_lls`` is at most ``p_fp_max``.

    With ``k = floor(p_fp_max * n)`` the threshold is the ``k``-th smallest
    benign value, stepped down past ties so that no more than ``k`` samples
    lie at or below it.  When ``k`` is zero it sits just below the minimum.
    """
    lls = np.asarray(benign_lls, dtype=float).ravel()
    if not 0.0 <= p_fp_max < 1.0:
        raise CalibrationError("p_fp_max must lie in [0, 1)")
    if lls.size < min_samples:
        raise CalibrationError(f"need at least {min_samples} benign log-likelihoods, got {lls.size}")
    if np.isnan(lls).any():
        raise CalibrationError("benign log-likelihoods contain NaN")
    v = np.sort(lls)
    n = v.size
    # largest k with k / n <= p_fp_max, decided in the same arithmetic as the rate
    k = int(math.floor(p_fp_max * n))
    while (k + 1) / n <= p_fp_max:
        k += 1
    while k > 0 and k / n > p_fp_max:
        k -= 1
    while k > 0:
        gamma = v[k - 1]
        if np.searchsorted(v, gamma, side="right") <= k:
            return float(gamma)
        k = int(np.searchsorted(v, gamma, side="left"))
    return float(np.nextafter(v[0], -np.inf)) if np.isfinite(v[0]) else -np.inf


def alternative_position(means, sigmas) -> np.ndarray:
    """Precision-weighted combined mean of the given intervals."""
    if len(np.asarray(means).reshape(-1, 2)) == 0:
        raise InsufficientDataError("no source available for an alternative position")
    return categorical_fuse(means, sigmas).mean
