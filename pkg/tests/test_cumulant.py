import numpy as np
import pytest

from stablebranch.cumulant import (
    CertificationError,
    SolverOptions,
    conservation_residual,
    solve_cumulant,
    solve_extinction,
    survival_probability,
    uniform_equivalence_gap,
    weighted_extinction_norm,
    yaglom_surface,
)
from stablebranch.limitlaw import g_closed
from stablebranch.model import (
    BranchingMechanism,
    MotionGenerator,
    StateSpace,
    calibrate_critical,
    semigroup_apply,
)

from conftest import normalized_ones


def scalar_closed_form(c, kappa, gamma, t):
    return (c ** -(gamma - 1.0) + kappa * (gamma - 1.0) * t) ** (-1.0 / (gamma - 1.0))


def make_scalar(kappa, gamma):
    space = StateSpace(d=1)
    motion = MotionGenerator(space=space, Q=[[0.0]])
    return calibrate_critical(
        motion, BranchingMechanism(beta=[0.0], kappa=[kappa], gamma=[gamma])
    )


class TestSolveCumulant:
    @pytest.mark.parametrize("kappa,gamma,c", [(1.0, 1.5, 1.0), (0.7, 1.3, 2.5), (2.0, 1.8, 0.2)])
    def test_scalar_closed_form(self, kappa, gamma, c):
        model = make_scalar(kappa, gamma)
        times = np.logspace(-3, 3, 25)
        # late-time values decay far below any absolute floor: control purely
        # relatively so the closed form is matched at solver tolerance
        opts = SolverOptions(rel_tol=1e-10, abs_tol=0.0)
        curve = solve_cumulant(model, np.array([c]), times, opts)
        exact = scalar_closed_form(c, kappa, gamma, times)
        assert np.abs(curve.values[:, 0] / exact - 1.0).max() <= 1e-9

    def test_zero_fixed_point(self, two_site_model):
        curve = solve_cumulant(two_site_model, np.zeros(2), [0.5, 1.0, 5.0])
        assert np.all(curve.values == 0.0)

    def test_unit_value_at_one(self, scalar_model):
        curve = solve_cumulant(scalar_model, np.array([1.0]), [1.0])
        assert curve.values[0, 0] == pytest.approx((1.5) ** -2, rel=1e-9)

    def test_monotone_in_initial_data(self, two_site_model):
        rng = np.random.default_rng(4)
        times = np.linspace(0.0, 3.0, 7)
        for _ in range(4):
            f = rng.uniform(0.0, 2.0, 2)
            g = f + rng.uniform(0.0, 1.5, 2)
            vf = solve_cumulant(two_site_model, f, times).values
            vg = solve_cumulant(two_site_model, g, times).values
            assert np.all(vf <= vg + 1e-9)

    def test_dominated_by_mean_flow(self, three_site_model):
        rng = np.random.default_rng(5)
        f = rng.uniform(0.2, 3.0, 3)
        for t in (0.1, 1.0, 4.0):
            vt = solve_cumulant(three_site_model, f, [t]).values[0]
            mean = semigroup_apply(three_site_model, t, f)
            assert np.all(vt <= mean + 1e-10)

    def test_conservation_identity(self, two_site_model):
        f = np.array([0.8, 1.9])
        curve = solve_cumulant(two_site_model, f, np.linspace(0.0, 4.0, 9))
        for s, t in ((0.0, 4.0), (0.5, 2.0), (1.0, 3.5)):
            assert conservation_residual(two_site_model, curve, s, t) <= 1e-8

    def test_rejects_negative_field(self, two_site_model):
        with pytest.raises(ValueError):
            solve_cumulant(two_site_model, np.array([-0.1, 1.0]), [1.0])


class TestSolveExtinction:
    def test_scalar_values(self, scalar_model):
        curve = solve_extinction(scalar_model, [1.0, 100.0])
        assert curve.values[0, 0] == pytest.approx(4.0, rel=1e-8)
        assert curve.values[1, 0] == pytest.approx(4e-4, rel=1e-8)

    def test_scalar_profile(self, scalar_model):
        times = np.logspace(-2, 3, 61)
        curve = solve_extinction(scalar_model, times)
        exact = (0.5 * times) ** -2
        assert np.abs(curve.values[:, 0] / exact - 1.0).max() <= 1e-8

    def test_nonincreasing_per_site(self, three_site_model, loose_opts):
        times = np.geomspace(0.01, 100.0, 40)
        curve = solve_extinction(three_site_model, times, loose_opts)
        assert np.all(np.diff(curve.values, axis=0) <= 0.0)
        assert np.all(curve.values > 0.0)

    def test_matches_large_lambda_solve(self, two_site_model):
        # independent route: the finite-lambda cumulant from a huge constant
        # field approaches the warm-start curve at the lambda^-(gamma0-1) rate
        opts = SolverOptions(rel_tol=1e-8)
        v1 = solve_extinction(two_site_model, [1.0], opts).values[0]
        big = solve_cumulant(two_site_model, np.full(2, 1e30), [1.0], opts).values[0]
        assert np.abs(big / v1 - 1.0).max() < 2e-4
        assert np.all(big <= v1 * (1 + 1e-12))

    def test_certification_raises_for_coarse_warm_start(self):
        space = StateSpace(d=2)
        motion = MotionGenerator(space=space, Q=[[-100.0, 100.0], [100.0, -100.0]])
        mech = BranchingMechanism(beta=[0.0, 0.0], kappa=[1.0, 1.0], gamma=[1.2, 1.8])
        model = calibrate_critical(motion, mech)
        with pytest.raises(CertificationError):
            solve_extinction(model, [1e-7, 1e-6])  # early report with default t0

    def test_min_time_precondition(self, scalar_model):
        with pytest.raises(ValueError):
            solve_extinction(scalar_model, [1e-8])


class TestSurvival:
    def test_scalar_values(self, scalar_model):
        assert survival_probability(scalar_model, np.array([1.0]), 1.0) == pytest.approx(
            1.0 - np.exp(-4.0), rel=1e-8
        )
        assert survival_probability(scalar_model, np.array([1.0]), 100.0) == pytest.approx(
            -np.expm1(-4e-4), rel=1e-8
        )

    def test_vanishing_start(self, scalar_model):
        tiny = survival_probability(scalar_model, np.array([1e-12]), 1.0)
        assert tiny == pytest.approx(4e-12, rel=1e-6)

    def test_rejects_trivial_start(self, scalar_model):
        with pytest.raises(ValueError):
            survival_probability(scalar_model, np.array([0.0]), 1.0)


class TestWeightedNorm:
    def test_scalar_equals_extinction(self, scalar_model):
        val = weighted_extinction_norm(scalar_model, 10.0)
        assert val == pytest.approx((0.5 * 10.0) ** -2, rel=1e-8)

    def test_ratio_trend_to_one(self, two_site_model, loose_opts):
        from stablebranch.model import eta

        ts = np.array([1e2, 1e3, 1e4])
        norms = weighted_extinction_norm(two_site_model, ts, loose_opts)
        ratios = norms / eta(two_site_model, ts)
        devs = np.abs(ratios - 1.0)
        assert np.all(np.diff(devs) < 0)

    def test_strictly_decreasing(self, three_site_model, loose_opts):
        ts = np.geomspace(0.1, 1e3, 25)
        norms = weighted_extinction_norm(three_site_model, ts, loose_opts)
        assert np.all(np.diff(norms) < 0)


class TestYaglomSurface:
    def test_scalar_exactness(self, scalar_model):
        f = normalized_ones(scalar_model)
        for T in (1.0, 10.0, 100.0):
            for theta in (0.3, 1.0, 5.0):
                g = yaglom_surface(scalar_model, f, theta, T)
                assert g[0] == pytest.approx(g_closed(1.5, theta), abs=1e-9)

    def test_zero_theta(self, two_site_model):
        f = normalized_ones(two_site_model)
        assert np.all(yaglom_surface(two_site_model, f, 0.0, 10.0) == 0.0)

    def test_unnormalized_rejected(self, two_site_model):
        with pytest.raises(ValueError, match="phi_star"):
            yaglom_surface(two_site_model, np.ones(2), 1.0, 10.0)

    def test_linear_bound(self, two_site_model, loose_opts):
        f = normalized_ones(two_site_model)
        c_f = np.max(f / two_site_model.phi)
        for theta in (0.2, 1.0, 4.0):
            g = yaglom_surface(two_site_model, f, theta, 100.0, loose_opts)
            assert np.all(g <= c_f * theta + 1e-9)


class TestEquivalenceGap:
    def test_scalar_zero(self, scalar_model):
        assert uniform_equivalence_gap(scalar_model, 5.0) <= 1e-8

    def test_decreasing_with_time(self, three_site_model, loose_opts):
        gaps = uniform_equivalence_gap(
            three_site_model, np.array([10.0, 1e3]), loose_opts
        )
        assert gaps[1] < gaps[0]

    def test_vanishing_along_decades(self, two_site_model, loose_opts):
        gaps = uniform_equivalence_gap(
            two_site_model, np.array([10.0, 1e2, 1e3, 1e4]), loose_opts
        )
        assert np.all(np.diff(gaps) < 0)
        assert gaps[-1] < 5e-3
