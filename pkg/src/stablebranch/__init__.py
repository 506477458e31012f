"""Numerical laboratory for critical multitype branching with stable reproduction.

Modules
-------
model     : finite-state motion + mechanism, spectral calibration, semigroup ops
cumulant  : log-Laplace / extinction ODE engine and derived probabilities
limitlaw  : limit-law transform, delay-equation solver, diagnostics
simulate  : Monte Carlo path engine with exact extinction thinning
spine     : h-transformed chain and Feynman-Kac path checks
analysis  : tail-index fits and convergence tables
cli       : configuration-driven experiment runner
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    StateSpace,
    MotionGenerator,
    BranchingMechanism,
    EigenData,
    CriticalModel,
    build_feynman_kac_matrix,
    principal_eigen,
    calibrate_critical,
    eta,
    semigroup_apply,
    uniform_mixing_gap,
)
from .cumulant import (  # noqa: F401
    SolverOptions,
    CumulantCurve,
    solve_cumulant,
    solve_extinction,
    survival_probability,
    weighted_extinction_norm,
    yaglom_surface,
    uniform_equivalence_gap,
    conservation_residual,
)
from .limitlaw import (  # noqa: F401
    ZolotarevLaw,
    laplace,
    laplace_complement,
    g_closed,
    DelayEquationProblem,
    solve_delay_equation,
    mean_diagnostic,
)
from .simulate import (  # noqa: F401
    SimConfig,
    PathStats,
    sample_positive_stable,
    step_euler,
    simulate_paths,
    conditional_laplace_estimate,
)
from .spine import (  # noqa: F401
    SpineChain,
    SpinePath,
    spine_generator,
    simulate_spine,
    feynman_kac_estimate,
    ergodic_average_check,
)
from .analysis import (  # noqa: F401
    RVEstimate,
    rv_index_fit,
    kolmogorov_table,
    yaglom_table,
    mixture_rv_check,
)
