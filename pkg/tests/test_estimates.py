import math

import mpmath
import numpy as np
import pytest

from kinetic.collision import make_scheme
from kinetic.errors import ConfigurationError, DomainError, UnsupportedModeError
from kinetic.estimates import (
    EstimateReport,
    GaussianMixture,
    InequalityId,
    MollifierSpec,
    SmoothedBump,
    cancellation_constant_S,
    cancellation_lemma_check,
    coercivity_report,
    commutator_mollifier_report,
    commutator_weight_report,
    interpolation_report,
    mollifier_apply,
    mollifier_profile,
    pdo_commutator_report,
    refine,
    sample_test_functions,
    upper_bound_report,
    weight_difference_check,
)
from kinetic.grid import make_grid, maxwellian
from kinetic.kernel import CrossSection


def oracle_S(s, K=1.0, dim=3, theta_max=math.pi / 2):
    mpmath.mp.dps = 30
    sphere = 2 * mpmath.pi if dim == 3 else 2

    def integrand(theta):
        return K * theta ** (-1 - 2 * s) * (mpmath.cos(theta / 2) ** (-dim) - 1)

    return float(sphere * mpmath.quad(integrand, [0, theta_max]))


class TestCancellationConstant:
    @pytest.mark.parametrize("s", [0.1, 0.3, 0.5, 0.8])
    def test_matches_high_precision_oracle(self, s):
        assert cancellation_constant_S(CrossSection(s=s)) == pytest.approx(oracle_S(s), rel=1e-9)

    def test_two_dimensional_and_narrow_support(self):
        cs = CrossSection(s=0.4, K=2.0, theta_max=math.pi / 4)
        expected = oracle_S(0.4, K=2.0, dim=2, theta_max=math.pi / 4)
        assert cancellation_constant_S(cs, dim=2) == pytest.approx(expected, rel=1e-9)

    def test_cutoff_constant_converges_to_limit(self):
        cs = CrossSection(s=0.3)
        limit = cancellation_constant_S(cs)
        gaps = [abs(cancellation_constant_S(cs.with_cutoff(eps)) - limit) for eps in (0.2, 0.05, 0.01)]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_rejects_dimension(self):
        with pytest.raises(ConfigurationError):
            cancellation_constant_S(CrossSection(s=0.3), dim=4)


class TestCancellationCheck:
    def setup_method(self):
        self.grid = make_grid(64, 8.0, dim=2)
        self.F = maxwellian(1.0, [0.0], 1.0, self.grid)

    def test_lattice_sum_matches_constant(self):
        report = cancellation_lemma_check(self.F, CrossSection(s=0.3, eps_cutoff=0.2), tolerance=1e-2)
        assert report.inequality_id == InequalityId.CANCELLATION
        assert report.orientation == "eq"
        assert report.rhs_factors["mass"] == pytest.approx(1.0, rel=1e-10)
        assert report.feasible, report.fitted_constants

    def test_requires_maxwell_molecules_and_cutoff(self):
        with pytest.raises(UnsupportedModeError):
            cancellation_lemma_check(self.F, CrossSection(s=0.3, gamma=1.0, eps_cutoff=0.2))
        with pytest.raises(ConfigurationError):
            cancellation_lemma_check(self.F, CrossSection(s=0.3))


class TestEnsembles:
    def test_seeded_ensemble_is_reproducible(self):
        a = sample_test_functions(7, 10, 2, 6.0)
        b = sample_test_functions(7, 10, 2, 6.0)
        grid = make_grid(12, 6.0, dim=2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.sample(grid).values, y.sample(grid).values)

    def test_bump_fraction(self):
        members = sample_test_functions(1, 10, 3, 8.0, bump_fraction=0.2)
        assert sum(isinstance(m, SmoothedBump) for m in members) == 2
        assert isinstance(members[0], GaussianMixture)

    def test_members_are_grid_independent(self):
        member = sample_test_functions(3, 1, 2, 6.0)[0]
        coarse = member.sample(make_grid(12, 6.0, dim=2))
        fine = member.sample(make_grid(24, 6.0, dim=2))
        np.testing.assert_allclose(coarse.values, fine.values[::2, ::2])


class TestMollifier:
    def test_profile_shape(self):
        values = mollifier_profile(np.array([0.0, 1.0, 1.5, 2.0, 5.0]))
        np.testing.assert_allclose(values, [1.0, 1.0, 0.5, 0.0, 0.0])

    def test_coarse_level_is_identity_on_small_lattice(self):
        grid = make_grid(12, 6.0, dim=2)
        f = maxwellian(1.0, [0.0], 1.0, grid)
        np.testing.assert_array_equal(mollifier_apply(f, MollifierSpec(N=3)).values, f.values)

    def test_low_level_damps_high_frequencies(self):
        grid = make_grid(16, 4.0, dim=2)
        f = maxwellian(1.0, [0.0], 0.2, grid)
        smoothed = mollifier_apply(f, MollifierSpec(N=0))
        assert np.linalg.norm(smoothed.values) < np.linalg.norm(f.values)

    def test_x_axis_needs_spatial_field(self):
        grid = make_grid(12, 6.0, dim=2)
        with pytest.raises(ConfigurationError):
            mollifier_apply(maxwellian(1.0, [0.0], 1.0, grid), MollifierSpec(N=0), axis="x")


class TestCollisionEstimates:
    def setup_method(self):
        self.grid = make_grid(12, 6.0, dim=2)
        self.cs = CrossSection(s=0.3)
        self.scheme = make_scheme(self.cs, self.grid, 8, 8, interp="cubic")
        self.ensemble = [m.sample(self.grid) for m in sample_test_functions(11, 3, 2, 6.0, bump_fraction=0.0)]
        self.g = maxwellian(1.0, [0.0], 1.0, self.grid)

    def test_coercivity_fit(self):
        report = coercivity_report(self.g, self.ensemble, self.cs, self.cs.s, self.scheme)
        assert report.orientation == "ge"
        assert report.feasible
        assert report.fitted_constants["C_g"] > 0.0
        assert report.fitted_constants["C"] <= 1e6
        assert all(row["dissipation"] >= 0.0 for row in report.metadata["members"])
        assert set(report.metadata["g_norms"]) == {"gtilde_L1", "gtilde_L1_1", "gtilde_LlogL", "g_L1_lower_order"}

    def test_coercivity_needs_nonnegative_g(self):
        with pytest.raises(DomainError):
            coercivity_report(self.g.with_values(-self.g.values), self.ensemble, self.cs, 0.3, self.scheme)
        with pytest.raises(ConfigurationError):
            coercivity_report(self.g, [], self.cs, 0.3, self.scheme)

    def test_upper_bound_ratios_finite(self):
        pairs = list(zip(self.ensemble, self.ensemble[1:] + self.ensemble[:1]))
        report = upper_bound_report(pairs, 0.0, 0.0, self.cs, self.scheme)
        assert report.feasible
        assert report.ensemble_size == 3
        assert report.fitted_constants["max_ratio"] >= report.fitted_constants["min_ratio"] > 0.0

    def test_weight_commutator_vanishes_for_trivial_weight(self):
        report = commutator_weight_report(self.ensemble, self.g, 0, self.cs, self.scheme)
        assert report.lhs == 0.0

    def test_weight_commutator_branch_guard(self):
        strong = CrossSection(s=0.7)
        scheme = make_scheme(strong, self.grid, 8, 8, interp="cubic")
        with pytest.raises(ConfigurationError):
            commutator_weight_report(self.ensemble, self.g, 1, strong, scheme)

    def test_mollifier_commutator_trace(self):
        report = commutator_mollifier_report(self.ensemble[:2], self.g, [0, 1, 3], self.cs, self.scheme)
        assert [n for n, _ in report.refinement_trace] == [0.0, 1.0, 3.0]
        # level 3 is the identity on this lattice
        assert report.refinement_trace[-1][1] == 0.0
        assert report.stable

    def test_pdo_commutator_with_zero_order_vanishes(self):
        report = pdo_commutator_report(self.ensemble[:2], self.g, 0.0, self.cs, self.scheme)
        assert report.lhs == 0.0
        assert report.rhs_factors["lambda"] == 0.0


class TestInterpolation:
    def test_unweighted_ratio_is_bounded_by_cauchy_schwarz(self):
        grid = make_grid(16, 6.0, dim=2)
        ensemble = [m.sample(grid) for m in sample_test_functions(5, 6, 2, 6.0)]
        report = interpolation_report(ensemble, 1.0, 0.0, 0.5)
        assert report.fitted_constants["max_ratio"] <= 1.0 + 1e-12

    def test_rejects_bad_parameters(self):
        grid = make_grid(12, 6.0, dim=2)
        f = maxwellian(1.0, [0.0], 1.0, grid)
        with pytest.raises(DomainError):
            interpolation_report([f], 1.0, 0.0, 0.0)
        with pytest.raises(ConfigurationError):
            interpolation_report([], 1.0, 0.0, 0.5)


class TestWeightDifference:
    def test_constants_are_finite_and_reproducible(self):
        a = weight_difference_check(2, 4000, dim=3, seed=3)
        b = weight_difference_check(2, 4000, dim=3, seed=3)
        assert a.fitted_constants == b.fitted_constants
        assert a.feasible
        assert a.ensemble_size == 8000
        assert a.refinement_trace[1][1] >= a.refinement_trace[0][1]

    def test_zero_weight_difference_vanishes(self):
        report = weight_difference_check(0, 1000, dim=2)
        assert report.fitted_constants["C_sum"] == 0.0
        assert report.stable

    def test_rejects_negative_order(self):
        with pytest.raises(DomainError):
            weight_difference_check(-1, 10)


class TestRefine:
    @staticmethod
    def fake(values):
        def build(grid):
            return EstimateReport(
                inequality_id=InequalityId.INTERPOLATION,
                lhs=values[grid.n],
                fitted_constants={"max_ratio": values[grid.n]},
                ensemble_size=1,
                grid_signature=grid.signature,
                feasible=True,
            )

        return build

    def test_stable_constant(self):
        report = refine(self.fake({8: 1.0, 12: 1.05}), [8, 12], 4.0, 2)
        assert report.stable
        assert report.refinement_trace == [(8.0, 1.0), (12.0, 1.05)]
        assert report.grid_signature == make_grid(12, 4.0, 2).signature

    def test_unstable_constant(self):
        report = refine(self.fake({8: 1.0, 12: 3.0}), [8, 12], 4.0, 2)
        assert report.stable is False
        assert not report.passed

    def test_growth_only_accepts_decrease(self):
        report = refine(self.fake({8: 3.0, 12: 1.0}), [8, 12], 4.0, 2, growth_only=True)
        assert report.stable

    def test_needs_resolutions(self):
        with pytest.raises(ConfigurationError):
            refine(self.fake({}), [], 4.0, 2)
