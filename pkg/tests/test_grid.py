import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetic.errors import ConfigurationError, DomainError
from kinetic.grid import (
    Distribution,
    NormSpec,
    SpatialLattice,
    apply_multiplier,
    bessel_derivative,
    bessel_multiplier,
    entropy_h,
    lebesgue_weighted_norm,
    make_grid,
    maxwellian,
    moments,
    mu_weight,
    spectral_energy,
    transform_horizon,
    weight_multiply,
    weighted_sobolev_norm,
)


class TestVelocityGrid:
    def setup_method(self):
        self.grid = make_grid(16, 8.0, dim=2)

    def test_lattice_layout(self):
        assert self.grid.spacing == 1.0
        assert self.grid.shape == (16, 16)
        assert self.grid.axis[0] == -8.0
        assert self.grid.axis[-1] == pytest.approx(7.0)
        assert self.grid.xi_max == pytest.approx(math.pi)
        assert self.grid.flat_velocities.shape == (256, 2)

    def test_wavenumbers_span_dual_lattice(self):
        k = np.sort(self.grid.wavenumbers)
        assert k[0] == pytest.approx(-math.pi)
        assert k[-1] < math.pi

    @pytest.mark.parametrize("n,radius,dim", [(7, 8.0, 2), (6, 8.0, 2), (16, 0.0, 2), (16, 8.0, 1)])
    def test_rejects_bad_lattice(self, n, radius, dim):
        with pytest.raises(ConfigurationError):
            make_grid(n, radius, dim)

    def test_continuous_transform_of_gaussian(self):
        grid = make_grid(64, 8.0, dim=2)
        f = np.exp(-0.5 * grid.speed_sq)
        spectrum = grid.continuous_transform(f)
        expected = 2.0 * math.pi * np.exp(-0.5 * grid.xi_sq)
        np.testing.assert_allclose(spectrum.real, expected, atol=1e-10)
        np.testing.assert_allclose(grid.from_continuous(spectrum), f, atol=1e-12)

    def test_weight(self):
        np.testing.assert_allclose(self.grid.weight(2.0), 1.0 + self.grid.speed_sq)


class TestDistribution:
    def setup_method(self):
        self.grid = make_grid(16, 8.0, dim=2)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            Distribution(grid=self.grid, values=np.zeros((16, 8)))

    def test_non_finite_values(self):
        values = np.zeros(self.grid.shape)
        values[0, 0] = np.nan
        with pytest.raises(DomainError):
            Distribution(grid=self.grid, values=values)

    def test_spatial_layout_and_slice(self):
        lattice = SpatialLattice(n_x=4, length=2.0)
        f = Distribution(grid=self.grid, values=np.ones((4, 16, 16)), spatial=lattice)
        assert f.is_spatial
        assert f.slice_x(2).values.shape == (16, 16)
        with pytest.raises(ConfigurationError):
            Distribution(grid=self.grid, values=np.ones((16, 16))).slice_x(0)

    def test_nonnegativity_tolerance(self):
        values = np.ones(self.grid.shape)
        values[3, 3] = -1e-14
        assert Distribution(grid=self.grid, values=values).is_nonnegative()
        values[3, 3] = -1e-3
        assert not Distribution(grid=self.grid, values=values).is_nonnegative()


class TestNorms:
    def setup_method(self):
        self.grid = make_grid(32, 8.0, dim=2)
        self.f = maxwellian(1.0, [0.5, -0.25], 1.2, self.grid)

    def test_norm_keys(self):
        assert NormSpec().key == "H0_0"
        assert NormSpec(m=1, l=2).key == "H1_2"
        assert NormSpec(p=1, l=2).key == "L1_2"
        assert NormSpec(m=0.5, l=1.5).key == "H0.5_1.5"

    def test_parseval(self):
        spectral = weighted_sobolev_norm(self.f, NormSpec(m=0, l=0))
        direct = lebesgue_weighted_norm(self.f, NormSpec(l=0))
        assert spectral == pytest.approx(direct, rel=1e-12)
        assert spectral_energy(self.f) == pytest.approx(direct**2, rel=1e-12)

    def test_weight_then_derivative(self):
        ns = NormSpec(m=1.0, l=2.0)
        composed = bessel_derivative(weight_multiply(self.f, 2.0), 1.0)
        assert weighted_sobolev_norm(self.f, ns) == pytest.approx(lebesgue_weighted_norm(composed, NormSpec()), rel=1e-10)

    def test_sobolev_norm_of_gaussian(self):
        f = maxwellian(1.0, [0.0], 1.0, self.grid)
        # f^(xi) = exp(-|xi|^2 / 2) in dim 2
        expected = math.sqrt(1.0 / (4.0 * math.pi**2) * 2.0 * math.pi * 0.5 * (1.0 + 1.0))
        assert weighted_sobolev_norm(f, NormSpec(m=1.0)) == pytest.approx(expected, rel=1e-8)

    def test_l1_norm_of_maxwellian_is_mass(self):
        assert lebesgue_weighted_norm(self.f, NormSpec(p=1)) == pytest.approx(1.0, rel=1e-12)

    def test_sobolev_rejects_l1(self):
        with pytest.raises(ConfigurationError):
            weighted_sobolev_norm(self.f, NormSpec(p=1))

    def test_high_frequency_energy_is_small(self):
        assert spectral_energy(self.f, xi_c=0.75 * self.grid.xi_max) < 1e-6 * spectral_energy(self.f)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=-2.0, max_value=2.0), st.floats(min_value=0.0, max_value=2.0))
    def test_bessel_multiplier_group_property(self, a, b):
        product = bessel_multiplier(self.grid, a) * bessel_multiplier(self.grid, b)
        np.testing.assert_allclose(product, bessel_multiplier(self.grid, a + b), rtol=1e-12)

    def test_identity_multiplier(self):
        same = apply_multiplier(self.f, np.ones(self.grid.shape))
        np.testing.assert_allclose(same.values, self.f.values, atol=1e-15)


class TestMomentsAndEntropy:
    def setup_method(self):
        self.grid = make_grid(32, 8.0, dim=2)

    def test_maxwellian_moments(self):
        f = maxwellian(2.0, [0.5, -0.25], 1.2, self.grid)
        m = moments(f)
        assert m.mass == pytest.approx(2.0, rel=1e-12)
        np.testing.assert_allclose(m.momentum, [1.0, -0.5], rtol=1e-10)
        assert m.energy == pytest.approx(2.0 * (2 * 1.2 + 0.25 + 0.0625), rel=1e-10)

    def test_maxwellian_entropy(self):
        f = maxwellian(1.0, [0.0], 1.0, self.grid)
        assert entropy_h(f) == pytest.approx(-math.log(2.0 * math.pi) - 1.0, rel=1e-8)

    def test_spatial_moments_integrate_over_x(self):
        lattice = SpatialLattice(n_x=4, length=2.0)
        base = maxwellian(1.0, [0.0], 1.0, self.grid).values
        f = Distribution(grid=self.grid, values=np.stack([base] * 4), spatial=lattice)
        assert moments(f).mass == pytest.approx(2.0, rel=1e-12)

    def test_maxwellian_rejects_bad_parameters(self):
        with pytest.raises(DomainError):
            maxwellian(1.0, [0.0], -1.0, self.grid)
        with pytest.raises(ConfigurationError):
            maxwellian(1.0, [0.0, 0.0, 0.0], 1.0, self.grid)


class TestMuWeight:
    def test_horizon(self):
        assert transform_horizon(1.0, 0.25) == 2.0
        assert transform_horizon(1.0, 0.0) == math.inf

    def test_values_and_domain(self):
        grid = make_grid(16, 4.0, dim=2)
        mu = mu_weight(1.0, 1.0, 0.25, grid)
        np.testing.assert_allclose(mu.values, np.exp(-0.75 * (1.0 + grid.speed_sq)))
        with pytest.raises(DomainError):
            mu_weight(2.5, 1.0, 0.25, grid)
