"""Asymptotic diagnostics: tail-index fits and convergence tables.

These wrap the deterministic solvers into the quantities the limit statements
are about: the decay index of the weighted extinction norm, the normalized
survival probability against its mass target, and the rescaled cumulant
surface against the closed-form limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cumulant import SolverOptions, _yaglom_batch, solve_extinction
from .limitlaw import g_closed
from .model import eta

__all__ = [
    "RVEstimate",
    "rv_index_fit",
    "KolmogorovTable",
    "kolmogorov_table",
    "YaglomTable",
    "yaglom_table",
    "MixtureTable",
    "mixture_rv_check",
]

ALPHA_TIE_TOL = 1e-12


@dataclass(frozen=True)
class RVEstimate:
    """OLS slope of log value against log time over the fitted window."""

    slope: float
    intercept: float
    stderr: float
    window: tuple
    point_count: int

    def __post_init__(self):
        if self.point_count < 3:
            raise ValueError("need at least three points for a slope estimate")
        if not self.window[0] < self.window[1]:
            raise ValueError("invalid fit window")


def rv_index_fit(times, values, window=None):
    """Least-squares log-log slope with its standard error.

    The default window keeps the top two decades of the supplied grid: the
    decay index is a tail property and early transients bias the slope.
    Pass window=(tmin, tmax) to override.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape:
        raise ValueError("times and values must be matching 1-d arrays")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if np.any(times <= 0) or np.any(values <= 0):
        raise ValueError("log-log fit needs strictly positive inputs")
    if window is None:
        window = (times[-1] / 100.0, times[-1])
    sel = (times >= window[0]) & (times <= window[1])
    if sel.sum() < 3:
        raise ValueError("fewer than three points in the fit window")
    x = np.log(times[sel])
    y = np.log(values[sel])
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - intercept - slope * x
    sigma2 = float((resid**2).sum() / max(n - 2, 1))
    return RVEstimate(
        slope=slope,
        intercept=intercept,
        stderr=float(np.sqrt(sigma2 / sxx)),
        window=(float(window[0]), float(window[1])),
        point_count=int(n),
    )


@dataclass
class KolmogorovTable:
    """Normalized survival probability against its mass target per time."""

    times: np.ndarray
    normalized: np.ndarray  # survival / eta_t
    target: float  # <mu, phi>
    monotone: bool

    @property
    def ratio(self):
        return self.normalized / self.target

    def rows(self):
        return [
            (float(t), float(n), self.target)
            for t, n in zip(self.times, self.normalized)
        ]


def kolmogorov_table(model, mu, times, opts=None):
    """Tabulate eta_t^-1 (1 - exp(-<mu, v_t>)) against mu(phi).

    One extinction solve covers the whole grid.  The monotone flag records
    whether |ratio - 1| is nonincreasing along the grid.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (model.d,) or np.any(mu < 0) or mu.sum() == 0:
        raise ValueError("mu must be a nonnegative, nontrivial density vector")
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    curve = solve_extinction(model, times, opts)
    mu_v = curve.values @ (mu * model.m)
    survival = -np.expm1(-mu_v)
    normalized = survival / eta(model, times)
    target = model.mu_pairing(mu, model.phi)
    dev = np.abs(normalized / target - 1.0)
    monotone = bool(np.all(np.diff(dev) <= 1e-12))
    return KolmogorovTable(
        times=times, normalized=normalized, target=target, monotone=monotone
    )


@dataclass
class YaglomTable:
    """Rescaled cumulant surface against the closed-form limit per theta."""

    theta: np.ndarray
    surface: np.ndarray  # g(T, theta, x), shape (n_theta, d)
    limit: np.ndarray  # G(theta)
    horizon: float

    @property
    def sup_error(self):
        return np.abs(self.surface - self.limit[:, None]).max(axis=1)


def yaglom_table(model, f, theta_grid, T, opts=None):
    """Join the rescaled cumulant surface with its limit over a theta grid.

    Requires <f, phi_star>_m = 1.  All thetas are solved in one batched run.
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    surface = _yaglom_batch(model, f, theta_grid, T, opts)
    limit = g_closed(model.gamma0, theta_grid)
    return YaglomTable(
        theta=theta_grid,
        surface=surface,
        limit=np.atleast_1d(limit),
        horizon=float(T),
    )


@dataclass
class MixtureTable:
    """Power-mixture ratio against its minimal-index term on a small-t grid."""

    t: np.ndarray
    ratio: np.ndarray
    alpha0: float
    minimal_mass: float


def mixture_rv_check(alpha, rho, t_grid):
    """Tabulate sum_x rho_x t^alpha(x) / (rho{alpha = alpha0} t^alpha0).

    rho is interpreted as the vector of atom masses.  The minimal index is
    taken over sites carrying positive mass, with ties within ALPHA_TIE_TOL.
    The ratio converges to 1 as t -> 0.
    """
    alpha = np.asarray(alpha, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if alpha.shape != rho.shape or alpha.ndim != 1:
        raise ValueError("alpha and rho must be matching 1-d arrays")
    if np.any(rho < 0) or rho.sum() == 0:
        raise ValueError("rho must be nonnegative and nontrivial")
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid <= 0):
        raise ValueError("t grid must be strictly positive")
    carried = rho > 0
    alpha0 = float(alpha[carried].min())
    tied = carried & (alpha <= alpha0 + ALPHA_TIE_TOL)
    mass0 = float(rho[tied].sum())
    if mass0 <= 0:
        raise ValueError("empty minimal-index set")
    num = (rho[None, :] * np.power(t_grid[:, None], alpha[None, :])).sum(axis=1)
    ratio = num / (mass0 * np.power(t_grid, alpha0))
    return MixtureTable(t=t_grid, ratio=ratio, alpha0=alpha0, minimal_mass=mass0)
