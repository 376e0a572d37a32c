import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import quad

import kinetic.solver as solver
from kinetic.errors import ConfigurationError, DivergenceError, DomainError, StabilityError
from kinetic.collision import cutoff_section, scheme_from_config
from kinetic.grid import Distribution, SpatialLattice, apply_multiplier, make_grid, maxwellian
from kinetic.kernel import CrossSection
from kinetic.solver import (
    SolverConfig,
    SpatialSpec,
    check_transformed,
    continue_solution,
    kolmogorov_damping,
    kolmogorov_exact_solve,
    kolmogorov_history,
    local_existence_time,
    picard_solve,
    rk4_solve,
    strang_solve,
    strang_step,
    time_grid,
    transform_to_f,
    transform_to_g,
    transformed_residual,
    triple_norm,
)


def picard_setup():
    grid = make_grid(12, 6.0, dim=2)
    cfg = SolverConfig(
        rho=0.25, kappa=0.05, eps=0.2, dt=0.05, horizon=0.2, interp="cubic", n_theta=8, picard_tol=1e-7, picard_max_iters=40
    )
    cs = CrossSection(s=0.3, K=0.2)
    f0 = maxwellian(1.0, [0.0], 1.0, grid)
    return grid, cfg, cs, transform_to_g(f0, 0.0, cfg)


class TestSolverConfig:
    def test_horizon_within_transform_window(self):
        with pytest.raises(ValidationError, match="T0"):
            SolverConfig(rho=1.0, kappa=0.5, horizon=1.5)
        assert SolverConfig(rho=1.0, kappa=0.5, horizon=1.0).t0 == 1.0

    def test_zero_kappa_has_unbounded_window(self):
        assert SolverConfig(kappa=0.0, horizon=100.0).t0 == math.inf

    def test_monitored_norms_are_deduplicated(self):
        assert [n.key for n in SolverConfig().monitored_norms()] == ["H0_0"]
        keys = [n.key for n in SolverConfig(k_reg=1.0, l_wt=2.0).monitored_norms()]
        assert keys == ["H1_2", "H0_2", "H0_0"]

    def test_time_grid_covers_window(self):
        times = time_grid(SolverConfig(dt=0.03, horizon=0.1))
        assert times[0] == 0.0 and times[-1] == pytest.approx(0.1)
        assert len(times) == 5
        with pytest.raises(DomainError):
            time_grid(SolverConfig(), t_start=0.5, t_end=0.5)

    def test_kappa_zero_only_without_hard_potential(self):
        cfg = SolverConfig(kappa=0.0)
        check_transformed(cfg, CrossSection(s=0.3, gamma=-1.0))
        with pytest.raises(ConfigurationError):
            check_transformed(cfg, CrossSection(s=0.3, gamma=1.0))


class TestTransform:
    def setup_method(self):
        self.grid = make_grid(16, 8.0, dim=2)
        self.f = maxwellian(1.0, [0.0], 1.0, self.grid)

    def test_round_trip(self):
        cfg = SolverConfig(rho=0.25, kappa=0.05)
        g = transform_to_g(self.f, 0.3, cfg)
        np.testing.assert_allclose(transform_to_f(g, 0.3, cfg).values, self.f.values, rtol=1e-12)

    def test_underflow_is_masked_not_divided(self):
        cfg = SolverConfig(rho=10.0, kappa=0.0)
        g = transform_to_g(self.f, 0.0, cfg)
        assert np.all(np.isfinite(g.values))
        assert g.values[0, 0] == 0.0
        with pytest.raises(DomainError):
            transform_to_g(self.f, 0.0, cfg, strict=True)


class TestPicard:
    def test_converges_and_keeps_sign(self):
        grid, cfg, cs, g0 = picard_setup()
        history = picard_solve(g0, cfg, cs)
        assert history.kind == "g"
        assert history.converged
        assert history.picard_differences[-1] < cfg.picard_tol
        assert history.picard_differences[-1] < history.picard_differences[0]
        assert len(history.times) == 5
        np.testing.assert_array_equal(history.iterate[0], g0.values)
        assert all(np.min(u) >= 0.0 for u in history.iterate)
        assert {"g_mass", "g_energy", "mass", "energy"} <= set(history.moment_series)
        assert history.eps_tag == 0.2

    def test_maxwellian_follows_the_transformed_equilibrium(self):
        grid = make_grid(32, 6.0, dim=2)
        cfg = SolverConfig(
            rho=0.25, kappa=0.05, eps=0.2, dt=0.05, horizon=0.2, interp="cubic", n_theta=4, vstar_stride=2,
            picard_tol=1e-10, picard_max_iters=40,
        )
        cs = CrossSection(s=0.3, K=0.05)
        f0 = maxwellian(1.0, [0.0], 1.0, grid)
        history = picard_solve(transform_to_g(f0, 0.0, cfg), cfg, cs)
        assert history.converged
        for t, u in zip(history.times, history.iterate):
            exact = transform_to_g(f0, float(t), cfg).values
            assert np.linalg.norm(u - exact) < 1e-4 * np.linalg.norm(exact)

    def test_residual_of_converged_iterate_is_small(self):
        grid, cfg, cs, g0 = picard_setup()
        history = picard_solve(g0, cfg, cs)
        residual = transformed_residual(history, cfg, cs)
        assert residual.shape == (3,)
        assert np.max(residual) < 0.1 * history.norm_series["H0_0"][0]

    def test_warm_start_needs_fewer_sweeps(self):
        grid, cfg, cs, g0 = picard_setup()
        cold = picard_solve(g0, cfg, cs)
        warm = picard_solve(g0, cfg.model_copy(update={"eps": 0.15}), cs, initial_guess=cold)
        fresh = picard_solve(g0, cfg.model_copy(update={"eps": 0.15}), cs)
        assert len(warm.picard_differences) <= len(fresh.picard_differences)

    def test_divergence_is_reported_with_partial_history(self, monkeypatch):
        grid, cfg, cs, g0 = picard_setup()
        monkeypatch.setattr(solver, "gain_gamma", lambda u, v, t, *args: u.with_values(100.0 * u.values, time_tag=t))
        monkeypatch.setattr(solver, "loss_L_eps", lambda u, t, *args: u.with_values(np.zeros_like(u.values), time_tag=t))
        with pytest.raises(DivergenceError) as info:
            picard_solve(g0, cfg, cs)
        partial = info.value.history
        assert partial.converged is False
        assert all(c >= 1.0 for c in partial.picard_contraction[-3:])

    def test_requires_cutoff_and_nonnegative_data(self):
        grid, cfg, cs, g0 = picard_setup()
        with pytest.raises(ConfigurationError):
            picard_solve(g0, cfg.model_copy(update={"eps": None}), cs)
        with pytest.raises(DomainError):
            picard_solve(g0.with_values(-g0.values), cfg, cs)


class TestContinuation:
    def test_existence_time(self):
        assert local_existence_time(0.0, 1.0) == pytest.approx(math.log(4.0))
        assert local_existence_time(1.0, 2.0) == pytest.approx(0.5 * math.log(1.6))
        with pytest.raises(DomainError):
            local_existence_time(1.0, 0.0)

    def test_windows_reach_horizon(self):
        grid, cfg, cs, g0 = picard_setup()
        first = picard_solve(g0, cfg.model_copy(update={"horizon": 0.1}), cs)
        extended = continue_solution(first, cfg, cs, c_const=9.0, horizon=0.2)
        assert extended.times[-1] == pytest.approx(0.2)
        assert np.all(np.diff(extended.times) > 0.0)
        assert len(extended.iterate) == len(extended.times)
        assert triple_norm(extended) >= extended.norm_series["H0_0"].max()

    def test_horizon_beyond_transform_window(self):
        grid, cfg, cs, g0 = picard_setup()
        first = picard_solve(g0, cfg, cs)
        with pytest.raises(DomainError):
            continue_solution(first, cfg, cs, c_const=1.0, horizon=10.0)


class TestRk4:
    def setup_method(self):
        self.grid = make_grid(12, 6.0, dim=2)
        self.cs = CrossSection(s=0.3, K=0.2, eps_cutoff=0.2)
        self.cfg = SolverConfig(kappa=0.0, dt=0.05, horizon=0.2, interp="cubic", n_theta=8, method="rk4")

    def test_conserves_collision_invariants(self):
        left = maxwellian(0.5, [-1.5], 0.6, self.grid).values
        right = maxwellian(0.5, [1.5], 0.6, self.grid).values
        f0 = Distribution(grid=self.grid, values=left + right)
        history = rk4_solve(f0, self.cfg, self.cs)
        assert history.kind == "f"
        for key in ("mass", "momentum_1", "momentum_2", "energy"):
            series = history.moment_series[key]
            assert np.max(np.abs(series - series[0])) < 1e-10 * max(1.0, abs(series[0]))

    def test_negative_density_stops_the_run(self, monkeypatch):
        monkeypatch.setattr(solver, "_collision_rhs", lambda *args: (lambda values: -10.0 * np.ones_like(values)))
        f0 = maxwellian(1.0, [0.0], 1.0, self.grid)
        with pytest.raises(StabilityError) as info:
            rk4_solve(f0, self.cfg, self.cs)
        assert info.value.min_value < 0.0


class TestCrossSolver:
    def test_picard_matches_rk4_on_the_physical_unknown(self):
        grid = make_grid(16, 6.0, dim=2)
        cs = CrossSection(s=0.25, K=0.1)
        cfg = SolverConfig(
            rho=0.25, kappa=0.05, eps=0.2, dt=0.05, horizon=0.5, interp="cubic", n_theta=4, vstar_stride=2,
            picard_tol=1e-11, picard_max_iters=40,
        )
        left = maxwellian(0.5, [-1.0], 0.8, grid).values
        right = maxwellian(0.5, [1.0], 0.8, grid).values
        f0 = Distribution(grid=grid, values=left + right)
        # both solvers step the same raw discrete operator
        scheme = scheme_from_config(cfg, cutoff_section(cs, cfg), grid)
        picard = picard_solve(transform_to_g(f0, 0.0, cfg), cfg, cs, scheme=scheme)
        rk4 = rk4_solve(f0, cfg, cs, scheme=scheme)
        assert picard.converged
        assert picard.times[-1] == pytest.approx(0.5)
        physical = transform_to_f(picard.final, 0.5, cfg).values
        reference = rk4.final.values
        assert np.linalg.norm(physical - reference) < 1e-3 * np.linalg.norm(reference)


class TestStrang:
    def setup_method(self):
        self.grid = make_grid(12, 6.0, dim=2)
        self.lattice = SpatialLattice(n_x=8, length=2.0 * math.pi)
        self.cs = CrossSection(s=0.3, K=0.2, eps_cutoff=0.2)
        self.cfg = SolverConfig(
            kappa=0.0, dt=0.05, horizon=0.2, method="strang", spatial=SpatialSpec(n_x=8, L_x=2.0 * math.pi), collisions=False
        )

    def field(self, amplitude):
        base = maxwellian(1.0, [0.0], 1.0, self.grid).values
        profile = 1.0 + amplitude * np.cos(self.lattice.nodes)
        return Distribution(grid=self.grid, values=profile[:, None, None] * base[None], spatial=self.lattice)

    def test_uniform_data_is_stationary_under_transport(self):
        f0 = self.field(0.0)
        step = strang_step(f0, 0.05, self.cfg, self.cs)
        np.testing.assert_allclose(step.values, f0.values, atol=1e-14)

    def test_transport_preserves_mass_and_l2(self):
        f0 = self.field(0.5)
        history = strang_solve(f0, self.cfg, self.cs)
        mass = history.moment_series["mass"]
        np.testing.assert_allclose(mass, mass[0], rtol=1e-12)
        l2 = history.norm_series["H0_0"]
        np.testing.assert_allclose(l2, l2[0], rtol=1e-10)

    def test_needs_spatial_axis(self):
        with pytest.raises(ConfigurationError):
            strang_solve(maxwellian(1.0, [0.0], 1.0, self.grid), self.cfg, self.cs)


class TestKolmogorov:
    def setup_method(self):
        self.grid = make_grid(16, 6.0, dim=2)
        self.lattice = SpatialLattice(n_x=8, length=2.0 * math.pi)
        base = maxwellian(1.0, [0.0], 1.0, self.grid).values
        self.base = base

    def field(self, amplitude):
        profile = 1.0 + amplitude * np.cos(self.lattice.nodes)
        return Distribution(grid=self.grid, values=profile[:, None, None] * self.base[None], spatial=self.lattice)

    def test_zero_time_is_identity(self):
        f0 = self.field(0.3)
        np.testing.assert_array_equal(kolmogorov_exact_solve(f0, 0.5, 0.0).values, f0.values)

    def test_uniform_data_follows_fractional_heat_flow(self):
        f0 = self.field(0.0)
        t, s = 0.4, 0.5
        solved = kolmogorov_exact_solve(f0, s, t)
        expected = apply_multiplier(f0.slice_x(0), np.exp(-t * self.grid.xi_sq**s))
        for i in range(self.lattice.n_x):
            np.testing.assert_allclose(solved.values[i], expected.values, atol=1e-10)

    def test_damping_closed_form_matches_quadrature(self):
        damping = kolmogorov_damping(self.grid, self.lattice, 0.3, 0.7)
        k = self.lattice.wavenumbers[1]
        eta = self.grid.wavenumbers[3]
        direct, _ = quad(lambda tau: abs(eta + k * tau) ** 0.6, 0.0, 0.7)
        assert damping[1, 3, 0] == pytest.approx(direct, rel=1e-8)
        eta_perp = self.grid.wavenumbers[2]
        direct, _ = quad(lambda tau: ((eta + k * tau) ** 2 + eta_perp**2) ** 0.3, 0.0, 0.7)
        assert damping[1, 3, 2] == pytest.approx(direct, rel=1e-8)

    def test_l2_norm_decays(self):
        history = kolmogorov_history(self.field(0.5), 0.5, [0.0, 0.2, 0.5, 1.0])
        l2 = history.norm_series["H0_0"]
        assert np.all(np.diff(l2) < 0.0)
        assert history.method == "kolmogorov"
        assert len(history.snapshots) == 4

    def test_rejects_bad_order(self):
        with pytest.raises(DomainError):
            kolmogorov_exact_solve(self.field(0.1), 1.0, 0.1)

    def test_nonzero_x_mode_is_shifted_and_damped(self):
        f0 = self.field(0.3)
        t, s = 0.5, 0.5
        solved = kolmogorov_exact_solve(f0, s, t)
        eta, nodes = self.grid.wavenumbers, self.grid.axis

        def transform(values, shift):
            along_v1 = np.exp(-1j * np.outer(eta + shift, nodes))
            along_v2 = np.exp(-1j * np.outer(eta, nodes))
            return along_v1 @ values @ along_v2.T

        k = self.lattice.wavenumbers[1]
        initial = np.fft.fft(f0.values, axis=0)[1]
        expected = transform(initial, t * k) * np.exp(-kolmogorov_damping(self.grid, self.lattice, s, t)[1])
        actual = transform(np.fft.fft(solved.values, axis=0)[1], 0.0)
        # the v_1 Nyquist column has no conjugate partner on the lattice
        keep = np.ones(expected.shape, dtype=bool)
        keep[self.grid.n // 2, :] = False
        assert np.max(np.abs(expected[keep])) > 1e-3
        np.testing.assert_allclose(actual[keep], expected[keep], atol=1e-10 * np.max(np.abs(expected)))
