from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
import scipy.fft as sfft
from pydantic import BaseModel, ConfigDict

from kinetic.errors import ConfigurationError, DomainError

ENTROPY_FLOOR = 1e-30


@dataclass(frozen=True)
class VelocityGrid:
    """Periodic lattice v_j = -R + j h on [-R, R)^dim with spectral tables."""

    n: int
    radius: float
    dim: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        """Velocity axes as negative indices, valid with or without a spatial axis."""
        return tuple(range(-self.dim, 0))

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.radius + self.spacing * np.arange(self.n)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Dual lattice in FFT order, spanning [-pi n/(2R), pi n/(2R))."""
        return 2.0 * math.pi * sfft.fftfreq(self.n, d=self.spacing)

    @cached_property
    def velocities(self) -> np.ndarray:
        return np.stack(np.meshgrid(*([self.axis] * self.dim), indexing="ij"))

    @cached_property
    def speed_sq(self) -> np.ndarray:
        return np.sum(self.velocities**2, axis=0)

    @cached_property
    def xi(self) -> np.ndarray:
        return np.stack(np.meshgrid(*([self.wavenumbers] * self.dim), indexing="ij"))

    @cached_property
    def xi_sq(self) -> np.ndarray:
        return np.sum(self.xi**2, axis=0)

    @cached_property
    def xi_max(self) -> float:
        return math.pi / self.spacing

    @cached_property
    def flat_velocities(self) -> np.ndarray:
        """(size, dim) lattice velocities in C order."""
        return self.velocities.reshape(self.dim, -1).T.copy()

    @cached_property
    def fourier_phase(self) -> np.ndarray:
        """(-1)^{k_1 + ... + k_d}: continuous-transform phase of the shifted lattice."""
        k = np.rint(self.xi * self.radius / math.pi).astype(np.int64)
        return np.where(np.sum(k, axis=0) % 2 == 0, 1.0, -1.0)

    def forward(self, values: np.ndarray) -> np.ndarray:
        return sfft.fftn(values, axes=self.axes)

    def inverse(self, spectrum: np.ndarray) -> np.ndarray:
        return sfft.ifftn(spectrum, axes=self.axes)

    def continuous_transform(self, values: np.ndarray) -> np.ndarray:
        """h^d sum_j f_j exp(-i xi_k . v_j) on the dual lattice."""
        return self.cell_volume * self.fourier_phase * self.forward(values)

    def from_continuous(self, spectrum: np.ndarray) -> np.ndarray:
        return np.real(self.inverse(self.fourier_phase * spectrum)) / self.cell_volume

    def weight(self, l: float) -> np.ndarray:
        """W_l(v) = (1 + |v|^2)^{l/2}."""
        return (1.0 + self.speed_sq) ** (0.5 * l)

    @property
    def signature(self) -> str:
        return f"v{self.dim}d-n{self.n}-R{self.radius!r}"


@dataclass(frozen=True)
class SpatialLattice:
    """Periodic 1D x lattice of n_x points on [0, L_x)."""

    n_x: int
    length: float

    @property
    def spacing(self) -> float:
        return self.length / self.n_x

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.spacing * np.arange(self.n_x)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * math.pi * sfft.fftfreq(self.n_x, d=self.spacing)


@dataclass
class Distribution:
    """Real field on a VelocityGrid, optionally indexed first by an x lattice."""

    grid: VelocityGrid
    values: np.ndarray
    time_tag: float = 0.0
    spatial: Optional[SpatialLattice] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = self.grid.shape if self.spatial is None else (self.spatial.n_x, *self.grid.shape)
        if self.values.shape != expected:
            raise ConfigurationError(f"values shape {self.values.shape} does not match lattice {expected}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("distribution values must be finite")

    @property
    def is_spatial(self) -> bool:
        return self.spatial is not None

    def with_values(self, values: np.ndarray, time_tag: Optional[float] = None) -> "Distribution":
        return Distribution(
            grid=self.grid,
            values=values,
            time_tag=self.time_tag if time_tag is None else time_tag,
            spatial=self.spatial,
        )

    def copy(self) -> "Distribution":
        return self.with_values(self.values.copy())

    def is_nonnegative(self, rel_tol: float = 1e-12) -> bool:
        scale = float(np.max(np.abs(self.values))) if self.values.size else 0.0
        return bool(np.min(self.values) >= -rel_tol * scale)

    def slice_x(self, index: int) -> "Distribution":
        if self.spatial is None:
            raise ConfigurationError("distribution has no spatial axis")
        return Distribution(grid=self.grid, values=self.values[index], time_tag=self.time_tag)

    def _measure(self) -> float:
        dx = 1.0 if self.spatial is None else self.spatial.spacing
        return dx * self.grid.cell_volume


class NormSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    m: float = 0.0
    l: float = 0.0
    p: Literal[1, 2] = 2

    @property
    def key(self) -> str:
        if self.p == 1:
            return f"L1_{self.l:g}"
        return f"H{self.m:g}_{self.l:g}"


class Moments(NamedTuple):
    mass: float
    momentum: np.ndarray
    energy: float


def make_grid(n: int, radius: float, dim: int = 3) -> VelocityGrid:
    """Validated lattice. Even n >= 8; powers of two remain the usual choice."""
    if not isinstance(n, (int, np.integer)) or n < 8 or n % 2:
        raise ConfigurationError(f"n must be an even integer >= 8, got {n!r}")
    if not radius > 0.0:
        raise ConfigurationError(f"radius must be positive, got {radius!r}")
    if dim not in (2, 3):
        raise ConfigurationError(f"dim must be 2 or 3, got {dim!r}")
    grid = VelocityGrid(n=int(n), radius=float(radius), dim=int(dim))
    # build the transform tables eagerly so the grid is shareable read-only
    _ = grid.velocities, grid.xi, grid.speed_sq, grid.xi_sq, grid.fourier_phase
    return grid


def weight_multiply(f: Distribution, l: float) -> Distribution:
    if l == 0:
        return f.copy()
    return f.with_values(f.values * f.grid.weight(l))


def apply_multiplier(f: Distribution, multiplier: np.ndarray) -> Distribution:
    spectrum = f.grid.forward(f.values) * multiplier
    return f.with_values(np.real(f.grid.inverse(spectrum)))


def bessel_multiplier(grid: VelocityGrid, m: float) -> np.ndarray:
    return (1.0 + grid.xi_sq) ** (0.5 * m)


def bessel_derivative(f: Distribution, m: float) -> Distribution:
    """Lambda^m f with Lambda = (1 + |D_v|^2)^{1/2}."""
    if m == 0:
        return f.copy()
    return apply_multiplier(f, bessel_multiplier(f.grid, m))


def _velocity_power_sum(f: Distribution, spectrum_weight: np.ndarray, spectrum: np.ndarray) -> float:
    # discrete Parseval: sum |u_j|^2 = (1/N) sum |U_k|^2
    energy = np.sum(spectrum_weight * np.abs(spectrum) ** 2) / f.grid.size
    return float(energy) * f._measure()


def weighted_sobolev_norm(f: Distribution, ns: NormSpec) -> float:
    """||Lambda^m (W_l f)||_{L^2}, weight applied before the derivative."""
    if ns.p != 2:
        raise ConfigurationError("weighted Sobolev norms are defined for p = 2")
    u = f.values * f.grid.weight(ns.l) if ns.l != 0 else f.values
    spectrum = f.grid.forward(u)
    return math.sqrt(_velocity_power_sum(f, (1.0 + f.grid.xi_sq) ** ns.m, spectrum))


def lebesgue_weighted_norm(f: Distribution, ns: NormSpec) -> float:
    """||W_l f||_{L^p} by the lattice midpoint rule."""
    u = np.abs(f.values * f.grid.weight(ns.l)) if ns.l != 0 else np.abs(f.values)
    if ns.p == 1:
        return float(np.sum(u)) * f._measure()
    return math.sqrt(float(np.sum(u * u)) * f._measure())


def spectral_energy(f: Distribution, xi_c: float = 0.0) -> float:
    """sum over |xi| > xi_c of |f^|^2, normalised so xi_c = 0 gives ||f||_{L^2}^2."""
    spectrum = f.grid.forward(f.values)
    mask = (f.grid.xi_sq > xi_c * xi_c).astype(float)
    return _velocity_power_sum(f, mask, spectrum)


def moments(f: Distribution) -> Moments:
    grid = f.grid
    values = f.values if f.spatial is None else f.values.sum(axis=0)
    measure = f._measure()
    mass = float(np.sum(values)) * measure
    momentum = np.array([float(np.sum(values * grid.velocities[a])) * measure for a in range(grid.dim)])
    energy = float(np.sum(values * grid.speed_sq)) * measure
    return Moments(mass=mass, momentum=momentum, energy=energy)


def entropy_h(f: Distribution, floor: float = ENTROPY_FLOOR) -> float:
    """H = sum max(f, floor) log max(f, floor) over the lattice."""
    clipped = np.maximum(f.values, floor)
    return float(np.sum(clipped * np.log(clipped))) * f._measure()


def maxwellian(rho: float, u: Sequence[float], T: float, grid: VelocityGrid, time_tag: float = 0.0) -> Distribution:
    if rho <= 0.0 or T <= 0.0:
        raise DomainError(f"maxwellian needs rho > 0 and T > 0, got rho={rho}, T={T}")
    shift = np.asarray(u, dtype=float).reshape(-1)
    if shift.size == 1 and grid.dim > 1:
        shift = np.concatenate([shift, np.zeros(grid.dim - 1)])
    if shift.size != grid.dim:
        raise ConfigurationError(f"mean velocity needs {grid.dim} components")
    dist_sq = np.sum((grid.velocities - shift.reshape((-1,) + (1,) * grid.dim)) ** 2, axis=0)
    values = rho * (2.0 * math.pi * T) ** (-0.5 * grid.dim) * np.exp(-dist_sq / (2.0 * T))
    return Distribution(grid=grid, values=values, time_tag=time_tag)


def transform_horizon(rho: float, kappa: float) -> float:
    """T0 = rho / (2 kappa); unbounded when kappa = 0."""
    return math.inf if kappa == 0.0 else rho / (2.0 * kappa)


def mu_weight(t: float, rho: float, kappa: float, grid: VelocityGrid) -> Distribution:
    """mu(t, v) = exp(-(rho - kappa t)(1 + |v|^2)) for 0 <= t <= T0."""
    t0 = transform_horizon(rho, kappa)
    slack = 1e-12 * (t0 if math.isfinite(t0) else 1.0)
    if t < -slack or t > t0 + slack:
        raise DomainError(f"t={t} outside [0, T0] with T0 = rho/(2*kappa) = {t0}")
    exponent = (rho - kappa * t) * (1.0 + grid.speed_sq)
    return Distribution(grid=grid, values=np.exp(-exponent), time_tag=t)
