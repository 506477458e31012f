"""Deterministic evolution of the log-Laplace functional and extinction curves.

On a finite site space the integral equation for the log-Laplace functional
V_t f is equivalent to the site-wise ODE

    du/dt = A u - kappa * u^gamma,      u(0) = f,

with A the calibrated mean generator.  The extinction cumulant v_t (the
infinite-initial-condition limit) is started analytically: over a vanishing
initial window the motion is negligible and each site evolves as the scalar
stable branching flow, giving v(t0, x) = (kappa(x) (gamma(x)-1) t0)^(-1/(gamma(x)-1)).
The warm start is certified by halving t0 and bounding the induced change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._ivp import OdeSolution, SolverError, SolverReport, solve_branching_ode
from .model import eta

__all__ = [
    "SolverOptions",
    "CumulantCurve",
    "CertificationError",
    "solve_cumulant",
    "solve_extinction",
    "survival_probability",
    "weighted_extinction_norm",
    "yaglom_surface",
    "uniform_equivalence_gap",
    "conservation_residual",
]


class CertificationError(SolverError):
    """Warm-start certification failed: t0 too large for the requested accuracy."""


@dataclass(frozen=True)
class SolverOptions:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = np.inf
    warm_start_time: float = 1e-8

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol < 0:
            raise ValueError("tolerances must be positive (abs_tol may be zero)")
        if self.max_step <= 0 or self.warm_start_time <= 0:
            raise ValueError("max_step and warm_start_time must be positive")


@dataclass
class CumulantCurve:
    """Time-gridded solution per site, with dense-output access.

    values[i, x] is the solution at times[i], site x; nonnegative throughout.
    For the extinction curve (initial == "infinity") each site trace is
    nonincreasing in t.
    """

    times: np.ndarray
    values: np.ndarray
    initial: str
    solver_report: SolverReport
    _dense: OdeSolution

    def evaluate(self, t):
        """Dense-output values at arbitrary t inside the solved span."""
        return self._dense(t)

    @property
    def t_start(self):
        return self._dense.t_start

    @property
    def t_end(self):
        return self._dense.t_end


def _check_times(times, minimum=0.0):
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a nonempty 1-d grid")
    if np.any(np.diff(t) < 0):
        raise ValueError("times must be nondecreasing")
    if t[0] < minimum:
        raise ValueError(f"times must start at or above {minimum}")
    return t


def solve_cumulant(model, f, times, opts=None):
    """Evolve the log-Laplace functional from initial field f over the grid.

    f must be nonnegative.  The returned curve satisfies the weighted
    conservation identity (see conservation_residual) to quadrature accuracy
    and is dominated by the linear mean flow.
    """
    opts = opts or SolverOptions()
    f = np.asarray(f, dtype=float)
    if f.shape != (model.d,):
        raise ValueError(f"f must have shape ({model.d},)")
    if np.any(f < 0):
        raise ValueError("initial field must be nonnegative")
    times = _check_times(times)
    sol = solve_branching_ode(
        model.A,
        model.mechanism.kappa,
        model.mechanism.gamma,
        f,
        (0.0, float(times[-1])),
        rtol=opts.rel_tol,
        atol=opts.abs_tol,
        max_step=opts.max_step,
        stiff_start=True,  # engages only for enormous initial fields
    )
    return CumulantCurve(
        times=times,
        values=sol(times),
        initial=f"field({np.array2string(f, precision=6, max_line_width=200)})",
        solver_report=sol.report,
        _dense=sol,
    )


def _warm_start(model, t0):
    """Short-time profile of the infinite-initial-condition solution at t0.

    Base value per site: the scalar stable flow (kappa (gamma-1) t0)^(-1/(gamma-1)).
    Sites whose index exceeds the minimum are slaved to the inflow from
    faster-blowing neighbours, so the scalar value is corrected by balance
    sweeps kappa w^gamma = (scalar)^gamma + inflow until self-consistent; the
    correction vanishes for homogeneous gamma and is certified downstream by
    the t0-halving check.
    """
    kappa = model.mechanism.kappa
    gamma = model.mechanism.gamma
    g1 = gamma - 1.0
    scalar = (kappa * g1 * t0) ** (-1.0 / g1)
    off = model.A - np.diag(np.diag(model.A))
    w = scalar.copy()
    scalar_pow = kappa * scalar**gamma
    for _ in range(model.d + 1):
        w_new = ((scalar_pow + np.clip(off @ w, 0.0, None)) / kappa) ** (1.0 / gamma)
        if np.allclose(w_new, w, rtol=1e-12):
            w = w_new
            break
        w = w_new
    return w


def _extinction_solution(model, t0, t_max, opts, rtol=None):
    return solve_branching_ode(
        model.A,
        model.mechanism.kappa,
        model.mechanism.gamma,
        _warm_start(model, t0),
        (t0, t_max),
        rtol=rtol if rtol is not None else opts.rel_tol,
        atol=0.0,  # values traverse many decades; control is purely relative
        max_step=opts.max_step,
        stiff_start=True,
    )


def solve_extinction(model, times, opts=None):
    """Extinction cumulant on the grid, certified by warm-start halving.

    Requires min(times) >= 10 * warm_start_time.  Certification: a second run
    from t0/2 is compared against the t0 run on a geometric grid between
    10*t0 and the first requested time; the warm-start discrepancy decays
    like t0/t along the contracting flow, so the earliest comparison point
    dominates all later ones.  A relative change above 10 * rel_tol raises
    CertificationError.  The t0/2 run is returned.
    """
    opts = opts or SolverOptions()
    t0 = opts.warm_start_time
    times = _check_times(times, minimum=10.0 * t0)
    t_max = float(times[-1])
    t_first = float(times[0])
    threshold = 10.0 * opts.rel_tol

    # Certification sub-runs integrate 30x tighter than the claimed tolerance
    # so the measured change isolates the warm-start effect from integrator
    # noise.  The halving discrepancy decays like t0/t along the contracting
    # flow; when the first reported time lies beyond the measured window the
    # bound is transported with the 1/t law, which must itself be visible in
    # the measurement (or the signal must already sit at the noise floor).
    cert_rtol = opts.rel_tol / 30.0
    t_cert_end = min(100.0 * t0, t_first)
    coarse = _extinction_solution(model, t0, t_cert_end, opts, rtol=cert_rtol)
    halved = _extinction_solution(model, t0 / 2.0, t_cert_end, opts, rtol=cert_rtol)

    def rel_diff(t):
        va, vb = coarse(t), halved(t)
        return float(np.max(np.abs(va - vb) / np.maximum(vb, 1e-300)))

    if t_first <= 100.0 * t0:
        measured = max(rel_diff(t) for t in np.geomspace(10.0 * t0, t_cert_end, 5))
        bound = measured
    else:
        d_early = rel_diff(10.0 * t0)
        d_late = rel_diff(t_cert_end)
        noise_floor = 50.0 * cert_rtol
        decay_seen = d_late <= 0.5 * d_early or d_late <= noise_floor
        if not decay_seen:
            raise CertificationError(
                f"warm-start discrepancy not decaying ({d_early:.3e} -> {d_late:.3e}); "
                "decrease warm_start_time"
            )
        bound = d_late * (t_cert_end / t_first)
    if bound > threshold:
        raise CertificationError(
            f"warm-start certification failed: projected relative change {bound:.3e} "
            f"at t={t_first:g} exceeds {threshold:.1e}; decrease warm_start_time"
        )
    fine = _extinction_solution(model, t0 / 2.0, t_max, opts)
    return CumulantCurve(
        times=times,
        values=fine(times),
        initial="infinity",
        solver_report=fine.report,
        _dense=fine,
    )


def survival_probability(model, mu, t, opts=None):
    """P(mass alive at t) = 1 - exp(-<mu, v_t>) for start density mu against m."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (model.d,) or np.any(mu < 0) or mu.sum() == 0:
        raise ValueError("mu must be a nonnegative, nontrivial density vector")
    if t <= 0:
        raise ValueError("survival probability requires t > 0")
    curve = solve_extinction(model, [t], opts)
    x = model.mu_pairing(mu, curve.values[0])
    return float(-np.expm1(-x))


def weighted_extinction_norm(model, t, opts=None):
    """<v_t, phi_star>_m; scalar t gives a float, array t a vector (one solve)."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr <= 0):
        raise ValueError("requires t > 0")
    curve = solve_extinction(model, np.sort(t_arr), opts)
    v = curve.evaluate(t_arr)
    out = v @ (model.phi_star * model.m)
    return float(out[0]) if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def uniform_equivalence_gap(model, t, opts=None):
    """sup_x | (v_t/phi)(x) / <v_t,phi_star>_m - 1 |; accepts scalar or array t."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr <= 0):
        raise ValueError("requires t > 0")
    curve = solve_extinction(model, np.sort(t_arr), opts)
    v = curve.evaluate(t_arr)
    norms = v @ (model.phi_star * model.m)
    gaps = np.abs((v / model.phi[None, :]) / norms[:, None] - 1.0).max(axis=1)
    return float(gaps[0]) if np.isscalar(t) or np.asarray(t).ndim == 0 else gaps


def _yaglom_batch(model, f, thetas, T, opts):
    """g(T, theta, x) for all thetas at once via the rescaled flow.

    With w := u / (theta * eta_T) the evolution of u = V(theta eta_T f) maps to
    w' = A w - kappa (theta eta_T)^(gamma-1) w^gamma, w(0) = f, which keeps the
    state O(1) even when eta_T underflows the absolute tolerance.
    """
    opts = opts or SolverOptions()
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    if np.any(thetas < 0):
        raise ValueError("theta must be nonnegative")
    if T <= 0:
        raise ValueError("horizon must be positive")
    f = np.asarray(f, dtype=float)
    norm = model.inner_m(f, model.phi_star)
    if abs(norm - 1.0) > 1e-10:
        raise ValueError(
            f"<f, phi_star>_m = {norm!r} must equal 1 (rescale f before calling)"
        )
    eta_T = eta(model, T)
    gamma = model.mechanism.gamma
    kappa_eff = model.mechanism.kappa[None, :] * np.power(
        thetas[:, None] * eta_T, gamma[None, :] - 1.0
    )
    u0 = np.broadcast_to(f, (thetas.size, model.d)).copy()
    sol = solve_branching_ode(
        model.A,
        kappa_eff,
        gamma,
        u0,
        (0.0, float(T)),
        rtol=opts.rel_tol,
        atol=opts.abs_tol,
        max_step=opts.max_step,
    )
    w_T = sol(float(T))
    return thetas[:, None] * w_T / model.phi[None, :]


def yaglom_surface(model, f, theta, T, opts=None):
    """x -> V_T(theta eta_T f)(x) / (eta_T phi(x)) for a phi_star-normalized f."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    return _yaglom_batch(model, f, [theta], T, opts)[0]


def _adaptive_simpson(fun, a, b, tol, max_depth=40):
    def simpson(fa, fm, fb, a_, b_):
        return (b_ - a_) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a_, b_, fa, fm, fb, whole, depth):
        m = 0.5 * (a_ + b_)
        lm, rm = 0.5 * (a_ + m), 0.5 * (m + b_)
        flm, frm = fun(lm), fun(rm)
        left = simpson(fa, flm, fm, a_, m)
        right = simpson(fm, frm, fb, m, b_)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return recurse(a_, m, fa, flm, fm, left, depth + 1) + recurse(
            m, b_, fm, frm, fb, right, depth + 1
        )

    fa, fb = fun(a), fun(b)
    fm = fun(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), 0)


def conservation_residual(model, curve, s, t, quad_tol=1e-9):
    """Residual of the weighted balance between grid times s < t.

    | <V_t, phi*>_m + integral_s^t <kappa V_r^gamma, phi*>_m dr - <V_s, phi*>_m |
    should vanish to quadrature accuracy for every solved curve.
    """
    if not (curve.t_start <= s < t <= curve.t_end):
        raise ValueError("need t_start <= s < t <= t_end of the solved span")
    w = model.phi_star * model.m
    kappa, gamma = model.mechanism.kappa, model.mechanism.gamma

    def integrand(r):
        v = curve.evaluate(r)
        return float(np.sum(kappa * np.power(v, gamma) * w))

    integral = _adaptive_simpson(integrand, s, t, quad_tol)
    lhs = float(curve.evaluate(t) @ w) + integral
    rhs = float(curve.evaluate(s) @ w)
    return abs(lhs - rhs)
