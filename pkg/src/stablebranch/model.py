"""Finite-state model: spatial motion, branching mechanism, spectral calibration.

The spatial motion is an irreducible continuous-time Markov chain on d sites
with rate matrix Q, carrying a strictly positive reference weight vector m.
The branching mechanism is site-indexed, psi(x, z) = -beta(x) z + kappa(x) z**gamma(x)
with 1 < gamma(x) < 2.  The mean evolution of the resulting measure-valued
process is driven by the weighted semigroup exp(t*A) with A = Q + diag(beta);
calibration shifts beta so that the principal eigenvalue of A is zero.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.sparse import csgraph, csr_matrix

__all__ = [
    "StateSpace",
    "MotionGenerator",
    "BranchingMechanism",
    "EigenData",
    "CriticalModel",
    "ReducibleMatrixError",
    "EigenSolverError",
    "build_feynman_kac_matrix",
    "principal_eigen",
    "calibrate_critical",
    "eta",
    "semigroup_apply",
    "uniform_mixing_gap",
    "load_model",
    "save_model",
    "load_calibrated_model",
    "save_calibrated_model",
    "model_hash",
]

# Sites with gamma(x) - gamma0 below this count toward the minimal-index set
# when assembling the front constant; exact float equality on user input is fragile.
GAMMA_TIE_TOL = 1e-12

# Relative residual bound on |lambda| after the rank-one calibration shift.
CRITICALITY_RTOL = 1e-12

# Unit-normalized right/left principal vectors with m-inner product below this
# are flagged: the joint normalization is then badly conditioned.
NEAR_ORTHOGONAL_WARN = 1e-8

DENSE_EIGEN_MAX_DIM = 512


class ReducibleMatrixError(ValueError):
    """Raised when the positive off-diagonal graph is not strongly connected."""


class EigenSolverError(RuntimeError):
    """Raised when the principal-eigenpair computation fails to converge."""


def _as_vector(values, d=None, name="values"):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {d}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class StateSpace:
    """d sites with strictly positive reference weights m."""

    d: int
    m: np.ndarray = None

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError("state space needs at least one site")
        object.__setattr__(self, "d", int(self.d))
        m = np.ones(self.d) if self.m is None else _as_vector(self.m, self.d, "m")
        if np.any(m <= 0):
            raise ValueError("reference weights m must be strictly positive")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)


@dataclass(frozen=True)
class MotionGenerator:
    """Rate matrix Q of the spatial chain over a StateSpace.

    Off-diagonal entries are nonnegative; row sums may be negative (killing,
    i.e. finite lifetime) but never positive.  The positive off-diagonal graph
    must be strongly connected.
    """

    space: StateSpace
    Q: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        d = self.space.d
        if Q.shape != (d, d):
            raise ValueError(f"Q has shape {Q.shape}, expected {(d, d)}")
        if not np.all(np.isfinite(Q)):
            raise ValueError("Q contains non-finite entries")
        off = Q - np.diag(np.diag(Q))
        scale = max(1.0, float(np.abs(Q).max()))
        if off.min() < -1e-12 * scale:
            raise ValueError("off-diagonal rates must be nonnegative")
        rows = Q.sum(axis=1)
        if rows.max() > 1e-10 * scale:
            raise ValueError("row sums must be <= 0 (killing allowed, creation not)")
        _require_irreducible(Q)
        Q = Q.copy()
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)

    @property
    def d(self):
        return self.space.d

    @property
    def m(self):
        return self.space.m


@dataclass(frozen=True)
class BranchingMechanism:
    """Site-indexed (beta, kappa, gamma) for psi(x,z) = -beta x z + kappa x z^gamma(x)."""

    beta: np.ndarray
    kappa: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        beta = _as_vector(self.beta, None, "beta")
        d = beta.shape[0]
        kappa = _as_vector(self.kappa, d, "kappa")
        gamma = _as_vector(self.gamma, d, "gamma")
        if np.any(kappa <= 0):
            raise ValueError("kappa must be strictly positive")
        if np.any(gamma <= 1) or np.any(gamma >= 2):
            raise ValueError("gamma must lie in the open interval (1, 2)")
        for arr in (beta, kappa, gamma):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "gamma", gamma)

    @property
    def d(self):
        return self.beta.shape[0]

    @property
    def gamma0(self):
        return float(self.gamma.min())

    @property
    def kappa0(self):
        return float(self.kappa.min())

    def shifted(self, delta):
        """New mechanism with beta uniformly shifted by -delta."""
        return BranchingMechanism(self.beta - delta, self.kappa, self.gamma)


@dataclass(frozen=True)
class EigenData:
    """Principal triple (lambda, phi, phi_star) of A = Q + diag(beta).

    phi solves A phi = lambda phi; phi_star solves the m-adjoint problem,
    equivalently A^T (m*phi_star) = lambda (m*phi_star).  Normalization:
    sum(phi^2 m) = 1 and sum(phi phi_star m) = 1; both vectors strictly positive.
    """

    lam: float
    phi: np.ndarray
    phi_star: np.ndarray

    def __post_init__(self):
        phi = _as_vector(self.phi, None, "phi")
        phi_star = _as_vector(self.phi_star, phi.shape[0], "phi_star")
        if phi.min() <= 0 or phi_star.min() <= 0:
            raise ValueError("principal eigenvectors must be strictly positive")
        phi.setflags(write=False)
        phi_star.setflags(write=False)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "phi_star", phi_star)


@dataclass(frozen=True)
class CriticalModel:
    """Calibrated model: motion + mechanism + certified spectral data.

    Invariants: |lam| <= CRITICALITY_RTOL * max(1, ||A||); c_x > 0 is the
    front constant sum over the minimal-gamma site set.
    """

    motion: MotionGenerator
    mechanism: BranchingMechanism
    eigen: EigenData
    c_x: float
    gamma0: float

    def __post_init__(self):
        if self.motion.d != self.mechanism.d:
            raise ValueError("motion and mechanism dimensions disagree")
        if self.c_x <= 0:
            raise ValueError("front constant must be strictly positive")
        object.__setattr__(self, "c_x", float(self.c_x))
        object.__setattr__(self, "gamma0", float(self.gamma0))

    @property
    def d(self):
        return self.motion.d

    @property
    def m(self):
        return self.motion.m

    @property
    def phi(self):
        return self.eigen.phi

    @property
    def phi_star(self):
        return self.eigen.phi_star

    @cached_property
    def A(self):
        A = build_feynman_kac_matrix(self.motion, self.mechanism)
        A.setflags(write=False)
        return A

    @cached_property
    def mean_adjoint(self):
        """Matrix of the m-adjoint of A, acting on density vectors: diag(1/m) A^T diag(m)."""
        m = self.m
        M = (self.A.T * m[None, :]) / m[:, None]
        M.setflags(write=False)
        return M

    def inner_m(self, f, g):
        """Weighted inner product sum(f * g * m)."""
        return float(np.sum(np.asarray(f, float) * np.asarray(g, float) * self.m))

    def mu_pairing(self, masses, f):
        """Integral of f against the measure with density `masses` w.r.t. m."""
        return float(np.sum(np.asarray(masses, float) * np.asarray(f, float) * self.m))


def _require_irreducible(Q):
    graph = csr_matrix((np.abs(Q) > 0) & ~np.eye(Q.shape[0], dtype=bool))
    n, _ = csgraph.connected_components(graph, directed=True, connection="strong")
    if Q.shape[0] > 1 and n != 1:
        raise ReducibleMatrixError(
            "positive off-diagonal graph is not strongly connected"
        )


def build_feynman_kac_matrix(motion, mech):
    """Generator of the weighted mean semigroup: A = Q + diag(beta)."""
    if motion.d != mech.d:
        raise ValueError(
            f"dimension mismatch: motion has {motion.d} sites, mechanism {mech.d}"
        )
    return motion.Q + np.diag(mech.beta)


def _dense_principal(A):
    w, vl, vr = scipy.linalg.eig(A, left=True, right=True)
    i = int(np.argmax(w.real))
    lam = w[i]
    scale = max(1.0, float(np.abs(A).max()))
    if abs(lam.imag) > 1e-9 * scale:
        raise EigenSolverError(f"principal eigenvalue not real: {lam}")
    phi = vr[:, i]
    left = vl[:, i]
    if np.abs(phi.imag).max() > 1e-9 or np.abs(left.imag).max() > 1e-9:
        raise EigenSolverError("principal eigenvectors have non-negligible imaginary parts")
    return float(lam.real), phi.real.copy(), left.real.copy()


def _power_principal(A, max_iter=200_000, tol=1e-13):
    # Shift to a nonnegative matrix so plain power iteration targets the Perron root.
    d = A.shape[0]
    shift = max(0.0, -float(np.diag(A).min())) + 1.0
    B = A + shift * np.eye(d)

    def iterate(M):
        x = np.full(d, 1.0 / np.sqrt(d))
        lam_old = np.inf
        for _ in range(max_iter):
            y = M @ x
            lam = float(x @ y)
            x = y / np.linalg.norm(y)
            if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
                resid = np.linalg.norm(M @ x - lam * x)
                if resid <= 100 * tol * max(1.0, abs(lam)):
                    return lam, x
            lam_old = lam
        raise EigenSolverError("power iteration did not converge")

    lam_r, phi = iterate(B)
    lam_l, left = iterate(B.T)
    if abs(lam_r - lam_l) > 1e-10 * max(1.0, abs(lam_r)):
        raise EigenSolverError("left/right principal eigenvalues disagree")
    return lam_r - shift, phi, left


def principal_eigen(A, m, method="auto"):
    """Principal triple of an irreducible Metzler matrix under m-weighting.

    Returns EigenData with the normalization sum(phi^2 m) = 1 and
    sum(phi phi_star m) = 1.  phi_star is the left Perron vector rescaled by 1/m,
    so that it is the principal eigenvector of the m-adjoint of A.

    Raises ReducibleMatrixError when A is reducible (no unique positive pair) and
    EigenSolverError on solver failure.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    d = A.shape[0]
    m = _as_vector(m, d, "m")
    off = A - np.diag(np.diag(A))
    if off.min() < -1e-12 * max(1.0, float(np.abs(A).max())):
        raise ValueError("A must have nonnegative off-diagonal entries")
    _require_irreducible(A)

    if method == "dense" or (method == "auto" and d <= DENSE_EIGEN_MAX_DIM):
        lam, phi, left = _dense_principal(A)
    elif method in ("auto", "power"):
        lam, phi, left = _power_principal(A)
    else:
        raise ValueError(f"unknown method {method!r}")

    # The Perron vector is positive up to a global sign; flip and verify.
    for vec in (phi, left):
        if vec.sum() < 0:
            vec *= -1.0
    floor = 1e-12 * max(np.abs(phi).max(), 1e-300)
    if phi.min() <= floor or left.min() <= 1e-12 * max(np.abs(left).max(), 1e-300):
        raise ReducibleMatrixError(
            "principal eigenvector is not strictly positive; matrix is numerically reducible"
        )

    phi_star = left / m
    phi_unit = phi / np.sqrt(np.sum(phi**2 * m))
    star_unit = phi_star / np.sqrt(np.sum(phi_star**2 * m))
    overlap = float(np.sum(phi_unit * star_unit * m))
    if overlap < NEAR_ORTHOGONAL_WARN:
        warnings.warn(
            f"right/left principal vectors nearly m-orthogonal (overlap {overlap:.3e}); "
            "joint normalization is ill-conditioned",
            RuntimeWarning,
            stacklevel=2,
        )
    phi = phi_unit
    phi_star = phi_star / np.sum(phi * phi_star * m)
    return EigenData(lam=lam, phi=phi, phi_star=phi_star)


def calibrate_critical(motion, mech, method="auto"):
    """Shift beta so the principal eigenvalue vanishes; return the CriticalModel.

    The shift beta -> beta - lambda0 is exact (rank-one), so the residual
    eigenvalue is eigensolver error only; it is asserted against
    CRITICALITY_RTOL relative to ||A||.
    """
    A0 = build_feynman_kac_matrix(motion, mech)
    lam0 = principal_eigen(A0, motion.m, method=method).lam
    mech_crit = mech.shifted(lam0)
    A = build_feynman_kac_matrix(motion, mech_crit)
    eigen = principal_eigen(A, motion.m, method=method)
    scale = max(1.0, float(np.abs(A).max()))
    if abs(eigen.lam) > CRITICALITY_RTOL * scale:
        raise EigenSolverError(
            f"calibration residual |lambda| = {abs(eigen.lam):.3e} exceeds tolerance"
        )
    gamma0 = mech_crit.gamma0
    tied = mech_crit.gamma <= gamma0 + GAMMA_TIE_TOL
    c_x = float(
        np.sum(
            mech_crit.kappa[tied]
            * eigen.phi[tied] ** gamma0
            * eigen.phi_star[tied]
            * motion.m[tied]
        )
    )
    return CriticalModel(
        motion=motion, mechanism=mech_crit, eigen=eigen, c_x=c_x, gamma0=gamma0
    )


def eta(model, t):
    """Survival normalization (c_x (gamma0 - 1) t) ** (-1 / (gamma0 - 1)).

    Accepts scalar or array t; every entry must be strictly positive.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise ValueError("eta requires t > 0")
    g1 = model.gamma0 - 1.0
    out = (model.c_x * g1 * t_arr) ** (-1.0 / g1)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def semigroup_apply(model, t, f):
    """Apply the mean semigroup: exp(t A) f."""
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    f = _as_vector(f, model.d, "f")
    if t == 0:
        return f.copy()
    return scipy.linalg.expm(t * model.A) @ f


def uniform_mixing_gap(model, t):
    """Sup over (x, y) of |p_t(x,y) / (phi(x) phi_star(y)) - 1|.

    p_t is exp(t A) expressed as a density against m.  Decays exponentially
    for irreducible finite chains.
    """
    if t <= 0:
        raise ValueError("mixing gap requires t > 0")
    P = scipy.linalg.expm(t * model.A) / model.m[None, :]
    ratio = P / np.outer(model.phi, model.phi_star)
    return float(np.abs(ratio - 1.0).max())


# ---------------------------------------------------------------------------
# File schema
# ---------------------------------------------------------------------------

_BASE_KEYS = ("d", "m", "Q", "beta", "kappa", "gamma")
_CALIBRATED_KEYS = _BASE_KEYS + ("lambda", "phi", "phiStar", "C_X", "gamma0")


def _motion_mechanism_from_dict(data):
    d = int(data["d"])
    space = StateSpace(d=d, m=np.asarray(data["m"], float))
    motion = MotionGenerator(space=space, Q=np.asarray(data["Q"], float))
    mech = BranchingMechanism(
        beta=np.asarray(data["beta"], float),
        kappa=np.asarray(data["kappa"], float),
        gamma=np.asarray(data["gamma"], float),
    )
    if mech.d != d:
        raise ValueError("mechanism length disagrees with d")
    return motion, mech


def model_to_dict(motion, mech, model=None):
    data = {
        "d": motion.d,
        "m": motion.m.tolist(),
        "Q": motion.Q.tolist(),
        "beta": mech.beta.tolist(),
        "kappa": mech.kappa.tolist(),
        "gamma": mech.gamma.tolist(),
    }
    if model is not None:
        data.update(
            {
                "lambda": model.eigen.lam,
                "phi": model.phi.tolist(),
                "phiStar": model.phi_star.tolist(),
                "C_X": model.c_x,
                "gamma0": model.gamma0,
            }
        )
    return data


def model_hash(data):
    """Stable sha256 over the canonical JSON encoding of a model dict."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_model(path, motion, mech):
    _atomic_write_text(path, json.dumps(model_to_dict(motion, mech), indent=2))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    missing = [k for k in _BASE_KEYS if k not in data]
    if missing:
        raise ValueError(f"model file missing keys: {missing}")
    return _motion_mechanism_from_dict(data)


def save_calibrated_model(path, model):
    data = model_to_dict(model.motion, model.mechanism, model)
    _atomic_write_text(path, json.dumps(data, indent=2))


def load_calibrated_model(path):
    """Reload a calibrated model exactly as saved (no recomputation)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    missing = [k for k in _CALIBRATED_KEYS if k not in data]
    if missing:
        raise ValueError(f"calibrated model file missing keys: {missing}")
    motion, mech = _motion_mechanism_from_dict(data)
    eigen = EigenData(
        lam=float(data["lambda"]),
        phi=np.asarray(data["phi"], float),
        phi_star=np.asarray(data["phiStar"], float),
    )
    return CriticalModel(
        motion=motion,
        mechanism=mech,
        eigen=eigen,
        c_x=float(data["C_X"]),
        gamma0=float(data["gamma0"]),
    )
