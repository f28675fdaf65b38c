"""Ordinary kriging of regression residuals.

The residual of source ``m`` at time ``t`` is ``x = p_hat(t) - p(t)``, the
gap between the polynomial prediction and the observation.  Residuals are
modeled as a stationary process in time with an RBF covariance plus a
nugget, and the residual at the current epoch is predicted by ordinary
kriging from the recent ones.  Both axes share one covariance, so one set of
weights serves east and north.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

from .errors import InvalidInputError, SingularSystemError
from .regression import PolyFit, predict


@dataclass(frozen=True)
class CovarianceFn:
    """``C(tau) = variance_scale * exp(-(tau / length_scale)**2)`` plus a nugget.

    The nugget is white noise: it enters the covariance of two samples only
    when they are the same sample.
    """

    length_scale: float = 3.0
    variance_scale: float = 1.0
    nugget: float = 1e-6
    kind: str = "RBF"

    def __post_init__(self):
        if self.kind != "RBF":
            raise InvalidInputError(f"unsupported covariance kind {self.kind!r}")
        if not self.length_scale > 0:
            raise InvalidInputError("length_scale must be positive")
        if not self.variance_scale >= 0 or not self.nugget >= 0:
            raise InvalidInputError("variance_scale and nugget must be non-negative")

    @property
    def sill(self) -> float:
        return self.variance_scale + self.nugget

    def correlated(self, tau) -> np.ndarray:
        """Covariance without the nugget."""
        u = np.asarray(tau, dtype=float) / self.length_scale
        return self.variance_scale * np.exp(-u * u)

    def semivariogram(self, tau) -> np.ndarray:
        """``sill - C(tau)`` for ``tau != 0``, else 0; formed without cancellation."""
        tau = np.asarray(tau, dtype=float)
        u = tau / self.length_scale
        gamma = self.nugget - self.variance_scale * np.expm1(-u * u)
        return np.where(tau == 0.0, 0.0, gamma)


@dataclass(frozen=True)
class KrigingWeights:
    weights: np.ndarray
    lagrange: float
    variance: float


@dataclass(frozen=True)
class GaussianInterval:
    t: float
    mean: np.ndarray
    var: np.ndarray
    source: object = None

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.var)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var)


def _solve_saddle(offsets: tuple, cov: CovarianceFn) -> KrigingWeights:
    tau = np.asarray(offsets, dtype=float)
    n = len(tau)
    if cov.sill == 0.0:
        # a process with no variance: every unbiased combination is exact
        return KrigingWeights(np.full(n, 1.0 / n), 0.0, 0.0)
    # distinct samples differ by the nugget even at equal times
    # expm1 keeps sill - C(tau) accurate when C(tau) is close to the sill
    lag = (tau[:, None] - tau[None, :]) / cov.length_scale
    gamma = cov.nugget - cov.variance_scale * np.expm1(-lag * lag)
    np.fill_diagonal(gamma, 0.0)
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = gamma
    a[n, n] = 0.0
    rhs = np.ones(n + 1)
    # the target is a fresh draw of the process, so its own nugget counts
    u = tau / cov.length_scale
    rhs[:n] = cov.nugget - cov.variance_scale * np.expm1(-u * u)
    try:
        if n > 1 and np.linalg.cond(a) > 1e13:
            raise np.linalg.LinAlgError("ill-conditioned")
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"kriging system is singular ({exc})") from None
    lam, mu = sol[:n], sol[n]
    variance = max(float(lam @ rhs[:n] + mu), 0.0)
    return KrigingWeights(lam, float(mu), variance)


@lru_cache(maxsize=4096)
def _cached_saddle(offsets: tuple, cov: CovarianceFn) -> KrigingWeights:
    return _solve_saddle(offsets, cov)


def kriging_weights(times, t: float, cov: CovarianceFn) -> KrigingWeights:
    """Solve ``[Gamma 1; 1' 0] [lambda; mu] = [gamma; 1]``.

    ``Gamma`` and ``gamma`` are semivariogram values between the residual
    times and between residual times and ``t``.  The kriging variance is
    ``lambda' gamma + mu``.

    Raises
    ------
    SingularSystemError
        Duplicate times with a zero nugget, or a numerically singular system.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise InvalidInputError("kriging needs at least one residual")
    # identical window layouts (regular epochs) share one solve; offsets are
    # used exactly, since rounding them perturbs ill-conditioned systems
    offsets = tuple((times - t).tolist())
    if len(set(offsets)) < len(offsets) and cov.nugget == 0.0:
        raise SingularSystemError("duplicate residual times with zero nugget")
    return _cached_saddle(offsets, cov)


def predict_residual(times, residuals, t: float, cov: CovarianceFn) -> tuple[np.ndarray, np.ndarray]:
    """Kriged residual at ``t`` and its per-axis variance."""
    residuals = np.asarray(residuals, dtype=float).reshape(len(times), -1)
    kw = kriging_weights(times, t, cov)
    x_hat = kw.weights @ residuals
    return x_hat, np.full(residuals.shape[1], kw.variance)


def build_interval(fit: PolyFit, times, residuals, t: float, cov: CovarianceFn,
                   source=None) -> GaussianInterval:
    """Gaussian interval for the source's position at ``t``.

    The polynomial prediction is corrected by the kriged residual.  Since
    residuals are prediction minus observation, the correction is subtracted.
    """
    x_hat, var = predict_residual(times, residuals, t, cov)
    return GaussianInterval(float(t), predict(fit, t) - x_hat, var, source)


def empirical_semivariogram(times, residuals, max_lag: float = 20.0, bin_width: float | None = None):
    """Binned ``0.5 * mean((x_i - x_j)**2)`` over lags up to ``max_lag``.

    Returns ``(lags, values, counts)`` for the non-empty bins; values are
    averaged over axes.
    """
    times = np.asarray(times, dtype=float)
    x = np.asarray(residuals, dtype=float).reshape(len(times), -1)
    order = np.argsort(times, kind="stable")
    times, x = times[order], x[order]
    if bin_width is None:
        steps = np.diff(times)
        steps = steps[steps > 0]
        bin_width = float(np.median(steps)) if steps.size else 1.0
    n_bins = max(int(np.ceil(max_lag / bin_width)), 1)
    sums = np.zeros(n_bins + 1)
    counts = np.zeros(n_bins + 1)
    for k in range(1, len(times)):
        lag = times[k:] - times[:-k]
        if lag.size == 0 or lag.min() > max_lag:
            break
        half_sq = 0.5 * ((x[k:] - x[:-k]) ** 2).mean(axis=1)
        idx = np.rint(lag / bin_width).astype(int)
        ok = (lag <= max_lag) & (idx >= 1)
        np.add.at(sums, idx[ok], half_sq[ok])
        np.add.at(counts, idx[ok], 1)
    nz = counts > 0
    centres = np.arange(n_bins + 1) * bin_width
    return centres[nz], sums[nz] / counts[nz], counts[nz]


def fit_covariance(times, residuals, defaults: CovarianceFn | None = None,
                   max_lag: float = 20.0, min_samples: int = 30) -> CovarianceFn:
    """Least-squares RBF-plus-nugget fit to the binned empirical semivariogram.

    Variance scale, length scale and nugget are fitted, with bins weighted
    by their pair counts; the nugget never drops below the default.  Short
    or degenerate histories return ``defaults``.
    """
    defaults = CovarianceFn() if defaults is None else defaults
    times = np.asarray(times, dtype=float)
    if len(times) < min_samples:
        return defaults
    lags, gam, counts = empirical_semivariogram(times, residuals, max_lag)
    if lags.size < 2 or not np.isfinite(gam).all():
        return defaults
    scale = float(np.max(gam))
    if scale <= 1e-12:
        return defaults
    floor = max(defaults.nugget, 1e-12)
    w = np.sqrt(counts / counts.sum())

    def model(theta):
        vs, ls, nug = np.exp(theta)
        return nug + vs * (1.0 - np.exp(-((lags / ls) ** 2)))

    def resid(theta):
        return w * (model(theta) - gam) / scale

    lower = np.log([1e-9 * scale, 1e-3, floor])
    upper = np.log([1e3 * scale, 1e3, max(1e3 * scale, 2 * floor)])
    best = None
    step = float(np.min(lags))
    for ls0 in (0.5 * step, 2.0 * step, 0.25 * max_lag, max_lag):
        for nug_frac in (0.01, 0.5):
            theta0 = np.log([scale, max(ls0, 1e-3), max(nug_frac * gam[0], floor * 1.01)])
            theta0 = np.clip(theta0, lower + 1e-9, upper - 1e-9)
            res = least_squares(resid, theta0, bounds=(lower, upper))
            if best is None or res.cost < best.cost - 1e-15:
                best = res
    vs, ls, nug = np.exp(best.x)
    if not np.all(np.isfinite([vs, ls, nug])) or vs <= 0:
        return defaults
    return CovarianceFn(length_scale=float(ls), variance_scale=float(vs), nugget=float(nug))
