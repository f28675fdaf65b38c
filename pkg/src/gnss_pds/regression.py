"""Motion-constrained local polynomial regression.

Each source's recent positions are fit with a kernel-weighted polynomial in
time.  When a dead-reckoned prediction is available the fitted value at the
fit time is confined to a per-axis box around it.  Because the kernel is a
scalar, the problem separates by axis, and with timestamps shifted so the fit
time is zero the box acts on the intercept alone.  The feasible set per axis
is an interval in one coordinate, so the exact solution is one of three
candidates: the unconstrained optimum, or the optimum with the intercept
clamped to either bound.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .errors import DegenerateFitError, InvalidInputError, MissingStateError
from .geo import MotionSample, propagate_state


class KernelKind(str, enum.Enum):
    RBF = "RBF"
    TRICUBE = "TRICUBE"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.RBF
    bandwidth: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not self.bandwidth > 0:
            raise InvalidInputError("kernel bandwidth must be positive")

    def __call__(self, tau) -> np.ndarray:
        u = np.abs(np.asarray(tau, dtype=float)) / self.bandwidth
        if self.kind is KernelKind.RBF:
            return np.exp(-u * u)
        return np.where(u < 1.0, (1.0 - u**3) ** 3, 0.0)


@dataclass(frozen=True)
class MotionConstraint:
    anchor: np.ndarray
    tolerance: np.ndarray

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=float).reshape(2)
        tol = np.broadcast_to(np.asarray(self.tolerance, dtype=float), (2,)).copy()
        if not np.all(np.isfinite(anchor)) or not np.all(np.isfinite(tol)):
            raise InvalidInputError("constraint must be finite")
        if np.any(tol < 0):
            raise InvalidInputError("constraint tolerance must be non-negative")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "tolerance", tol)

    @classmethod
    def from_slot(cls, anchor, dt: float, eps) -> "MotionConstraint":
        """Box of half-width ``eps * dt`` per axis around ``anchor``."""
        return cls(anchor, np.asarray(eps, dtype=float) * dt)

    @property
    def lower(self) -> np.ndarray:
        return self.anchor - self.tolerance

    @property
    def upper(self) -> np.ndarray:
        return self.anchor + self.tolerance


@dataclass(frozen=True)
class PolyFit:
    """Polynomial in ``t - t_fit``; row ``k`` of ``W`` holds axis ``k``.

    ``multipliers`` are the KKT multipliers of the active box bounds (zero
    when inactive or unconstrained).
    """

    W: np.ndarray
    order: int
    t_fit: float
    window: tuple
    multipliers: np.ndarray = np.zeros(2)
    active: tuple = (0, 0)

    def extrapolates(self, t: float) -> bool:
        lo, hi = self.window
        return not (lo <= t <= hi)


def design(tau: np.ndarray, order: int) -> np.ndarray:
    return np.vander(np.asarray(tau, dtype=float), order + 1, increasing=True)


def predict(fit: PolyFit, t) -> np.ndarray:
    """Evaluate the fit at time(s) ``t``; returns shape (2,) or (len(t), 2)."""
    t = np.asarray(t, dtype=float)
    x = design(np.atleast_1d(t) - fit.t_fit, fit.order)
    out = x @ fit.W.T
    return out[0] if t.ndim == 0 else out


def objective(W: np.ndarray, times, values, t_fit: float, kernel: KernelSpec) -> float:
    """Kernel-weighted squared error summed over both axes."""
    tau = np.asarray(times, dtype=float) - t_fit
    resid = design(tau, W.shape[1] - 1) @ np.asarray(W).T - np.asarray(values, dtype=float)
    return float(kernel(tau) @ (resid**2).sum(axis=1))


def _prepare(times, values, t_fit, order, kernel, available=None):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float).reshape(-1, 2)
    if len(times) != len(values):
        raise InvalidInputError("times and values differ in length")
    keep = np.ones(len(times), bool) if available is None else np.asarray(available, bool).copy()
    keep &= np.isfinite(values).all(axis=1) & np.isfinite(times)
    tau = times[keep] - t_fit
    k = kernel(tau)
    pos = k > 0
    tau, y, k = tau[pos], values[keep][pos], k[pos]
    if len(np.unique(tau)) < order + 1:
        raise DegenerateFitError(
            f"need {order + 1} distinct timestamps for order {order}, got {len(np.unique(tau))}"
        )
    x = design(tau, order)
    return times[keep][pos], x, y, k


def _wls(x: np.ndarray, y: np.ndarray, k: np.ndarray) -> np.ndarray:
    sw = np.sqrt(k)
    a = x * sw[:, None]
    if np.linalg.cond(a) > 1e12:
        raise DegenerateFitError("rank-deficient design matrix")
    coef, *_ = np.linalg.lstsq(a, y * sw[:, None], rcond=None)
    return coef


def fit_unconstrained(times, values, t_fit: float, order: int = 2,
                      kernel: KernelSpec | None = None, available=None) -> PolyFit:
    """Weighted least-squares polynomial fit around ``t_fit``.

    Parameters
    ----------
    times : array_like, shape (N,)
    values : array_like, shape (N, 2)
        East/north observations.
    t_fit : float
        Fit time; the design is built in ``t - t_fit``.
    order : int
    kernel : KernelSpec, optional
    available : array_like of bool, optional
        Samples flagged unavailable are dropped before fitting.
    """
    kernel = KernelSpec() if kernel is None else kernel
    t_used, x, y, k = _prepare(times, values, t_fit, order, kernel, available)
    coef = _wls(x, y, k)
    return PolyFit(coef.T.copy(), order, float(t_fit), (float(t_used.min()), float(t_fit)))


def fit_constrained(times, values, t_fit: float, order: int = 2, kernel: KernelSpec | None = None,
                    constraint: MotionConstraint | None = None, available=None) -> PolyFit:
    """Same objective with ``|p_hat(t_fit) - anchor| <= tolerance`` per axis."""
    kernel = KernelSpec() if kernel is None else kernel
    if constraint is None:
        return fit_unconstrained(times, values, t_fit, order, kernel, available)
    t_used, x, y, k = _prepare(times, values, t_fit, order, kernel, available)
    coef = _wls(x, y, k)
    intercept = coef[0]
    lo, hi = constraint.lower, constraint.upper
    W = coef.T.copy()
    mult = np.zeros(2)
    active = [0, 0]
    for axis in range(2):
        b0 = intercept[axis]
        if lo[axis] <= b0 <= hi[axis]:
            continue
        # the objective is convex in the intercept once the other
        # coefficients are profiled out, so the violated bound is optimal
        c = lo[axis] if b0 < lo[axis] else hi[axis]
        w_axis = np.zeros(order + 1)
        w_axis[0] = c
        if order > 0:
            w_axis[1:] = _wls(x[:, 1:], (y[:, axis] - c)[:, None], k)[:, 0]
        g0 = 2.0 * k @ (x @ w_axis - y[:, axis])
        # a bound hit only by rounding has a multiplier of order -1e-14
        if b0 < lo[axis]:
            mult[axis], active[axis] = max(g0, 0.0), -1
        else:
            mult[axis], active[axis] = max(-g0, 0.0), 1
        W[axis] = w_axis
    return PolyFit(W, order, float(t_fit), (float(t_used.min()), float(t_fit)), mult, tuple(active))


def dead_reckon_anchor(last_state, t_prime: float, accel_history=None) -> np.ndarray:
    """Dead-reckoned position at ``t_prime`` from ``(position, MotionSample)``.

    A missing speed channel is replaced by the trapezoidal integral of the
    acceleration history ``(times, accel)`` up to the sample time; with no
    history the platform is taken to start from rest.  A missing
    acceleration channel means uniform motion.
    """
    if last_state is None:
        raise MissingStateError("no prior state to dead-reckon from")
    p, m = last_state
    if p is None or m is None:
        raise MissingStateError("no prior state to dead-reckon from")
    dt = t_prime - m.t
    if not dt > 0:
        raise InvalidInputError(f"t' must follow the last state, got dt={dt}")
    v = m.v
    if v is None:
        v = np.zeros(3)
        if accel_history is not None:
            ht, ha = accel_history
            ht = np.asarray(ht, dtype=float)
            ha = np.asarray(ha, dtype=float).reshape(len(ht), 3)
            sel = ht <= m.t
            if sel.sum() >= 2:
                v = trapezoid(ha[sel], ht[sel], axis=0)
        m = MotionSample(m.t, v, m.a, m.attitude)
    p_new, _ = propagate_state(p, m, dt)
    return p_new
