from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Callable, Literal, Optional

import numpy as np
from loguru import logger
from scipy import ndimage
from scipy.signal import fftconvolve

from infra.settings import get_settings
from kinetic.errors import ConfigurationError, DomainError, UnsupportedModeError
from kinetic.grid import Distribution, VelocityGrid, mu_weight
from kinetic.kernel import AngularQuadrature, CrossSection, build_angular_quadrature, kinetic_factor_phi
from kinetic.cache import tabulation_cache

if TYPE_CHECKING:
    from kinetic.solver import SolverConfig

Mode = Literal["direct", "spectral-maxwell"]
Interp = Literal["trilinear", "cubic", "spectral-shift"]
Extension = Literal["periodic", "zero"]

_MODES = ("direct", "spectral-maxwell")
_INTERPS = ("trilinear", "cubic", "spectral-shift")
MU_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class CollisionScheme:
    """How Q is discretised: angular rule, v_* subsampling, off-lattice interpolation."""

    quad: AngularQuadrature
    mode: Mode = "direct"
    vstar_stride: int = 1
    interp: Interp = "trilinear"
    conservative: bool = True
    chunk_points: int = field(default_factory=lambda: get_settings().SCHEME_CHUNK_POINTS)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise ConfigurationError(f"unknown collision mode {self.mode!r}")
        if self.interp not in _INTERPS:
            raise ConfigurationError(f"unknown interpolation {self.interp!r}")
        if self.vstar_stride < 1:
            raise ConfigurationError("vstar_stride must be >= 1")
        if self.chunk_points < 1 or self.workers < 1:
            raise ConfigurationError("chunk_points and workers must be positive")

    def replace(self, **changes) -> "CollisionScheme":
        return dataclasses.replace(self, **changes)

    def check(self, cs: CrossSection, grid: VelocityGrid) -> None:
        if self.quad.dim != grid.dim:
            raise ConfigurationError(f"quadrature built for dim={self.quad.dim}, grid has dim={grid.dim}")
        if self.quad.eps_cutoff != cs.eps_cutoff:
            raise ConfigurationError(
                f"quadrature built for eps={self.quad.eps_cutoff}, cross-section has eps={cs.eps_cutoff}"
            )
        if self.mode == "spectral-maxwell" and cs.gamma != 0.0:
            raise UnsupportedModeError("spectral-maxwell mode requires gamma = 0")
        if not cs.has_cutoff:
            if not self.quad.paired:
                raise ConfigurationError("non-cutoff kernel needs a reflection-paired quadrature")
            if self.interp == "trilinear" and cs.s >= 0.5:
                raise ConfigurationError(
                    "trilinear interpolation has a kink at lattice points; non-cutoff kernels with s >= 1/2 need cubic or spectral-shift"
                )

    @property
    def signature(self) -> str:
        return (
            f"{self.mode}-{self.interp}-stride{self.vstar_stride}"
            f"-{'cons' if self.conservative else 'raw'}-{self.quad.signature}"
        )

    def metadata(self) -> dict:
        return {
            "mode": self.mode,
            "interp": self.interp,
            "vstar_stride": self.vstar_stride,
            "conservative": self.conservative,
            "quadrature": self.quad.signature,
        }


def make_scheme(
    cs: CrossSection,
    grid: VelocityGrid,
    n_theta: int = 16,
    n_phi: int = 8,
    **options,
) -> CollisionScheme:
    quad = build_angular_quadrature(cs, n_theta, n_phi, dim=grid.dim)
    scheme = CollisionScheme(quad=quad, **options)
    scheme.check(cs, grid)
    return scheme


@lru_cache(maxsize=32)
def _cached_scheme(cs: CrossSection, grid: VelocityGrid, n_theta: int, n_phi: int, interp: str, stride: int) -> CollisionScheme:
    return make_scheme(cs, grid, n_theta, n_phi, interp=interp, vstar_stride=stride, conservative=False)


def scheme_from_config(cfg: "SolverConfig", cs: CrossSection, grid: VelocityGrid) -> CollisionScheme:
    """Scheme for the transformed operators; no conservative projection."""
    return _cached_scheme(cs, grid, cfg.n_theta, cfg.n_phi, cfg.interp, cfg.vstar_stride)


def cutoff_section(cs: CrossSection, cfg: "SolverConfig") -> CrossSection:
    if cfg.eps is None or cfg.eps == cs.eps_cutoff:
        return cs
    return cs.with_cutoff(cfg.eps)


@dataclass(frozen=True)
class SigmaPair:
    v: np.ndarray
    v_star: np.ndarray
    sigma: np.ndarray
    v_prime: np.ndarray
    v_star_prime: np.ndarray


def sigma_map(v, v_star, sigma) -> SigmaPair:
    """v' = (v+v_*)/2 + |v-v_*| sigma/2, v_*' = (v+v_*)/2 - |v-v_*| sigma/2 (last axis = components)."""
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(np.abs(np.linalg.norm(sigma, axis=-1) - 1.0) > 1e-12):
        raise DomainError("sigma must be a unit vector")
    center = 0.5 * (v + v_star)
    half = 0.5 * np.linalg.norm(v - v_star, axis=-1, keepdims=True)
    return SigmaPair(v=v, v_star=v_star, sigma=sigma, v_prime=center + half * sigma, v_star_prime=center - half * sigma)


# off-lattice evaluation


def _separable_sum(coeffs: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    """sum_k coeffs[k_1..k_d] prod_a factors[a][p, k_a] for every point p."""
    n = coeffs.shape[0]
    acc = factors[0] @ coeffs.reshape(n, -1)
    for factor in factors[1:-1]:
        acc = np.einsum("pkr,pk->pr", acc.reshape(acc.shape[0], n, -1), factor)
    return np.sum(acc * factors[-1], axis=1)


class FieldInterpolant:
    """Interpolation of a lattice field at physical points (dim, ...).

    extension="zero" treats the field as vanishing outside the box, the same
    truncation the continuous transform assumes; "periodic" wraps it, which
    keeps constants exact for test functions. Spectral-shift is always periodic.
    """

    _BATCH = 1 << 14

    def __init__(self, grid: VelocityGrid, values: np.ndarray, method: Interp, extension: Extension = "periodic"):
        self.grid = grid
        self.method = method
        if extension not in ("periodic", "zero"):
            raise ConfigurationError(f"unknown extension {extension!r}")
        self._mode = "grid-wrap" if extension == "periodic" else "grid-constant"
        if method == "cubic":
            self._data = ndimage.spline_filter(values, order=3, mode=self._mode)
        elif method == "trilinear":
            self._data = values
        elif method == "spectral-shift":
            self._data = grid.forward(values) / grid.size
        else:
            raise ConfigurationError(f"unknown interpolation {method!r}")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        grid = self.grid
        shape = points.shape[1:]
        flat = points.reshape(grid.dim, -1)
        if self.method == "spectral-shift":
            out = np.empty(flat.shape[1])
            for start in range(0, flat.shape[1], self._BATCH):
                part = flat[:, start : start + self._BATCH] + grid.radius
                factors = [np.exp(1j * np.outer(part[a], grid.wavenumbers)) for a in range(grid.dim)]
                out[start : start + self._BATCH] = np.real(_separable_sum(self._data, factors))
            return out.reshape(shape)
        coords = (flat + grid.radius) / grid.spacing
        order = 3 if self.method == "cubic" else 1
        out = ndimage.map_coordinates(self._data, coords, order=order, mode=self._mode, cval=0.0, prefilter=False)
        return out.reshape(shape)


class SpectrumInterpolant:
    """Continuous transform of a lattice field at off-lattice frequencies."""

    _BATCH = 1 << 13

    def __init__(self, grid: VelocityGrid, values: np.ndarray, method: Interp):
        self.grid = grid
        self.method = method
        self.values = values
        if method != "spectral-shift":
            shifted = np.fft.fftshift(grid.continuous_transform(values))
            if method == "cubic":
                self._re = ndimage.spline_filter(shifted.real, order=3, mode="grid-constant")
                self._im = ndimage.spline_filter(shifted.imag, order=3, mode="grid-constant")
            else:
                self._re, self._im = shifted.real, shifted.imag

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        grid = self.grid
        shape = xi.shape[1:]
        flat = xi.reshape(grid.dim, -1)
        if self.method == "spectral-shift":
            out = np.empty(flat.shape[1], dtype=complex)
            for start in range(0, flat.shape[1], self._BATCH):
                part = flat[:, start : start + self._BATCH]
                factors = [np.exp(-1j * np.outer(part[a], grid.axis)) for a in range(grid.dim)]
                out[start : start + self._BATCH] = grid.cell_volume * _separable_sum(self.values, factors)
            return out.reshape(shape)
        coords = (flat + grid.xi_max) / (math.pi / grid.radius)
        order = 3 if self.method == "cubic" else 1
        kw = dict(order=order, mode="grid-constant", cval=0.0, prefilter=False)
        re = ndimage.map_coordinates(self._re, coords, **kw)
        im = ndimage.map_coordinates(self._im, coords, **kw)
        return (re + 1j * im).reshape(shape)


# direct sigma-representation engine


def _orthonormal_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray], np.ndarray]:
    """Unit axis k = u/|u| and transverse basis; zero vectors get an arbitrary frame."""
    dim = u.shape[0]
    norm = np.sqrt(np.sum(u * u, axis=0))
    safe = np.where(norm > 0.0, norm, 1.0)
    k = u / safe
    if dim == 2:
        k = np.where(norm > 0.0, k, np.array([1.0, 0.0]).reshape((2,) + (1,) * (u.ndim - 1)))
        e1 = np.stack([-k[1], k[0]])
        return k, e1, None, norm
    k = np.where(norm > 0.0, k, np.array([1.0, 0.0, 0.0]).reshape((3,) + (1,) * (u.ndim - 1)))
    use_x = np.abs(k[2]) > 0.9
    helper = np.stack([use_x.astype(float), np.zeros_like(k[0]), (~use_x).astype(float)])
    e1 = helper - np.sum(helper * k, axis=0) * k
    e1 = e1 / np.sqrt(np.sum(e1 * e1, axis=0))
    e2 = np.cross(k, e1, axis=0)
    return k, e1, e2, norm


@dataclass
class _Block:
    rows: np.ndarray
    cols: np.ndarray
    center: np.ndarray
    half: np.ndarray
    k: np.ndarray
    e1: np.ndarray
    e2: Optional[np.ndarray]
    phi_kin: np.ndarray

    def post(self, cos_t: float, sin_t: float, cos_p: float, sin_p: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(v'+, v_*'+, v'-, v_*'-) for sigma and its reflection phi -> phi + pi."""
        trans = cos_p * self.e1 if self.e2 is None else cos_p * self.e1 + sin_p * self.e2
        base = self.center + (self.half * cos_t) * self.k
        off = (self.half * sin_t) * trans
        vp_plus, vp_minus = base + off, base - off
        twice = 2.0 * self.center
        return vp_plus, twice - vp_plus, vp_minus, twice - vp_minus


NodeTerm = Callable[[_Block, np.ndarray, np.ndarray], np.ndarray]
LossTerm = Callable[[_Block], np.ndarray]


def _strided_indices(grid: VelocityGrid, stride: int) -> np.ndarray:
    picks = np.arange(0, grid.n, stride)
    mesh = np.meshgrid(*([picks] * grid.dim), indexing="ij")
    return np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape)


class _DirectEngine:
    """Sum over v_* and sigma nodes of Phi b w [gain - loss] for every lattice v.

    Each output block covers a fixed set of rows against all v_* columns, so the
    reduction order does not depend on the worker count.
    """

    def __init__(
        self,
        grid: VelocityGrid,
        cs: CrossSection,
        scheme: CollisionScheme,
        cols: Optional[np.ndarray] = None,
        col_weight: Optional[float] = None,
    ):
        self.grid = grid
        self.cs = cs
        self.scheme = scheme
        quad = scheme.quad
        self.kw = quad.kernel_weights(cs)
        self.cos_t = np.cos(quad.theta_nodes)
        self.sin_t = np.sin(quad.theta_nodes)
        self.groups = self._phi_groups(quad)
        stride = scheme.vstar_stride
        self.cols = _strided_indices(grid, stride) if cols is None else np.asarray(cols)
        self.col_weight = grid.cell_volume * stride**grid.dim if col_weight is None else col_weight
        self.vel = grid.flat_velocities

    @staticmethod
    def _phi_groups(quad: AngularQuadrature) -> list[tuple[float, float, float, bool]]:
        """(cos phi, sin phi, weight, paired) per azimuthal group."""
        phi, w = quad.phi_nodes, quad.phi_weights
        if quad.paired:
            half = quad.half_phi
            return [(math.cos(phi[j]), math.sin(phi[j]), float(w[j]), True) for j in range(half)]
        return [(math.cos(p), math.sin(p), float(wj), False) for p, wj in zip(phi, w)]

    def _blocks(self) -> list[np.ndarray]:
        per_block = max(1, self.scheme.chunk_points // len(self.cols))
        return [np.arange(start, min(self.grid.size, start + per_block)) for start in range(0, self.grid.size, per_block)]

    def _block(self, rows: np.ndarray) -> _Block:
        v = self.vel[rows].T[:, :, None]
        vs = self.vel[self.cols].T[:, None, :]
        u = v - vs
        k, e1, e2, norm = _orthonormal_frame(u)
        return _Block(
            rows=rows,
            cols=self.cols,
            center=0.5 * (v + vs),
            half=0.5 * norm,
            k=k,
            e1=e1,
            e2=e2,
            phi_kin=kinetic_factor_phi(norm, self.cs.gamma),
        )

    def _reduce(self, rows: np.ndarray, node_term: NodeTerm, loss_term: Optional[LossTerm], col_factor: Optional[np.ndarray]) -> np.ndarray:
        block = self._block(rows)
        acc = np.zeros(block.half.shape)
        loss = loss_term(block) if loss_term is not None else None
        for i in range(len(self.kw)):
            if self.kw[i] == 0.0:
                continue
            for cos_p, sin_p, w_phi, paired in self.groups:
                vp_a, vsp_a, vp_b, vsp_b = block.post(self.cos_t[i], self.sin_t[i], cos_p, sin_p)
                weight = self.kw[i] * w_phi
                if paired:
                    term = node_term(block, vp_a, vsp_a) + node_term(block, vp_b, vsp_b)
                    if loss is not None:
                        term = term - 2.0 * loss
                else:
                    term = node_term(block, vp_a, vsp_a)
                    if loss is not None:
                        term = term - loss
                acc += weight * term
        acc *= block.phi_kin
        if col_factor is not None:
            acc *= col_factor[None, :]
        return acc.sum(axis=1) * self.col_weight

    def run(
        self,
        node_term: NodeTerm,
        loss_term: Optional[LossTerm] = None,
        col_factor: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        blocks = self._blocks()
        factor = None if col_factor is None else np.asarray(col_factor)[self.cols]
        if self.scheme.workers > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(max_workers=self.scheme.workers) as pool:
                parts = list(pool.map(lambda rows: self._reduce(rows, node_term, loss_term, factor), blocks))
        else:
            parts = [self._reduce(rows, node_term, loss_term, factor) for rows in blocks]
        out = np.empty(self.grid.size)
        for rows, part in zip(blocks, parts):
            out[rows] = part
        return out


def _check_pair(g: Distribution, f: Distribution) -> VelocityGrid:
    if g.grid != f.grid:
        raise ConfigurationError("collision arguments must share a grid")
    if g.is_spatial or f.is_spatial:
        raise ConfigurationError("collision operators act on velocity-only fields; slice the spatial axis first")
    return f.grid


def conservative_projection(q: np.ndarray, g: Distribution, f: Distribution, symmetric: bool) -> np.ndarray:
    """Smallest envelope-weighted correction making the discrete invariants of q vanish.

    Mass is always projected; momentum and energy only when both arguments are
    the same field, since Q(g, f) conserves them only after symmetrisation.
    """
    grid = f.grid
    flat = q.ravel()
    vel = grid.flat_velocities
    rows = [np.ones(grid.size)]
    if symmetric:
        rows.extend(vel[:, a] for a in range(grid.dim))
        rows.append(np.sum(vel * vel, axis=1))
    phi = np.stack(rows)
    envelope = np.abs(g.values.ravel()) + np.abs(f.values.ravel())
    peak = float(envelope.max())
    if peak == 0.0 or not np.any(flat):
        return q
    envelope = envelope / peak
    gram = (phi * envelope) @ phi.T
    residual = phi @ flat
    try:
        lam = np.linalg.solve(gram, residual)
    except np.linalg.LinAlgError:
        lam = np.linalg.lstsq(gram, residual, rcond=None)[0]
    return (flat - envelope * (phi.T @ lam)).reshape(q.shape)


def q_direct(g: Distribution, f: Distribution, cs: CrossSection, scheme: CollisionScheme) -> Distribution:
    """Q(g, f) by lattice quadrature over v_* and reflection-paired sigma nodes."""
    grid = _check_pair(g, f)
    scheme.check(cs, grid)
    g_at = FieldInterpolant(grid, g.values, scheme.interp, "zero")
    f_at = g_at if g is f else FieldInterpolant(grid, f.values, scheme.interp, "zero")
    g_flat, f_flat = g.values.ravel(), f.values.ravel()

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return g_at(vsp) * f_at(vp)

    def loss(block: _Block) -> np.ndarray:
        return f_flat[block.rows][:, None] * g_flat[block.cols][None, :]

    q = _DirectEngine(grid, cs, scheme).run(gain, loss).reshape(grid.shape)
    if scheme.conservative:
        symmetric = g is f or np.array_equal(g.values, f.values)
        q = conservative_projection(q, g, f, symmetric)
    return Distribution(grid=grid, values=q, time_tag=f.time_tag)


def q_spectral_maxwell(g: Distribution, f: Distribution, cs: CrossSection, scheme: CollisionScheme) -> Distribution:
    """Bobylev evaluation F[Q](xi) = int b(xi^.sigma)[g^(xi-) f^(xi+) - g^(0) f^(xi)] dsigma."""
    if cs.gamma != 0.0:
        raise UnsupportedModeError(f"Bobylev evaluation needs gamma = 0, got {cs.gamma}")
    if not cs.has_cutoff:
        raise UnsupportedModeError("spectral values are defined only for eps > 0; take the eps -> 0 limit explicitly")
    grid = _check_pair(g, f)
    scheme.check(cs, grid)
    quad = scheme.quad
    g_hat = SpectrumInterpolant(grid, g.values, scheme.interp)
    f_hat = f.grid.continuous_transform(f.values)
    f_at = SpectrumInterpolant(grid, f.values, scheme.interp)
    g0 = grid.cell_volume * float(np.sum(g.values))

    kw = quad.kernel_weights(cs)
    groups = _DirectEngine._phi_groups(quad)
    xi_flat = grid.xi.reshape(grid.dim, -1)
    nonzero = np.flatnonzero(grid.xi_sq.ravel() > 0.0)
    fq = np.zeros(grid.size, dtype=complex)
    batch = max(1, scheme.chunk_points // max(1, quad.n_phi))

    for start in range(0, len(nonzero), batch):
        idx = nonzero[start : start + batch]
        xi = xi_flat[:, idx]
        k, e1, e2, norm = _orthonormal_frame(xi)
        half = 0.5 * norm
        loss = g0 * f_hat.ravel()[idx]
        acc = np.zeros(len(idx), dtype=complex)
        for i in range(len(kw)):
            if kw[i] == 0.0:
                continue
            ct, st = math.cos(quad.theta_nodes[i]), math.sin(quad.theta_nodes[i])
            for cos_p, sin_p, w_phi, paired in groups:
                trans = cos_p * e1 if e2 is None else cos_p * e1 + sin_p * e2
                sig_plus = ct * k + st * trans
                terms = []
                for sig in ((sig_plus, ct * k - st * trans) if paired else (sig_plus,)):
                    xi_plus = 0.5 * xi + half * sig
                    xi_minus = xi - xi_plus
                    terms.append(g_hat(xi_minus) * f_at(xi_plus) - loss)
                acc += kw[i] * w_phi * sum(terms)
        fq[idx] = acc

    q = grid.from_continuous(fq.reshape(grid.shape))
    if scheme.conservative:
        symmetric = g is f or np.array_equal(g.values, f.values)
        q = conservative_projection(q, g, f, symmetric)
    return Distribution(grid=grid, values=q, time_tag=f.time_tag)


def apply_collision(g: Distribution, f: Distribution, cs: CrossSection, scheme: CollisionScheme) -> Distribution:
    if scheme.mode == "spectral-maxwell":
        return q_spectral_maxwell(g, f, cs, scheme)
    return q_direct(g, f, cs, scheme)


# transformed operators


def _transformed_setup(U: Distribution, t: float, cfg: "SolverConfig", cs: CrossSection, scheme: Optional[CollisionScheme]):
    cs_eps = cutoff_section(cs, cfg)
    grid = U.grid
    scheme = scheme or scheme_from_config(cfg, cs_eps, grid)
    scheme.check(cs_eps, grid)
    mu = mu_weight(t, cfg.rho, cfg.kappa, grid).values.ravel()
    return cs_eps, grid, scheme, mu


def _weighted_interpolant(grid: VelocityGrid, values: np.ndarray, mu: np.ndarray, interp: Interp) -> FieldInterpolant:
    return FieldInterpolant(grid, mu.reshape(grid.shape) * values, interp, "zero")


def gamma_t(
    U: Distribution,
    V: Distribution,
    t: float,
    cfg: "SolverConfig",
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> Distribution:
    """int int B_eps mu_*(t) (U'_* V' - U_* V) dv_* dsigma.

    The gain interpolates mu U and mu V and divides by mu(v), so that
    mu Gamma^t(U, V) is exactly q_direct(mu U, mu V) on the lattice.
    """
    _check_pair(U, V)
    cs_eps, grid, scheme, mu = _transformed_setup(U, t, cfg, cs, scheme)
    u_at = _weighted_interpolant(grid, U.values, mu, scheme.interp)
    v_at = u_at if U is V else _weighted_interpolant(grid, V.values, mu, scheme.interp)
    inv_mu = 1.0 / np.maximum(mu, MU_FLOOR)
    mu_u, v_flat = mu * U.values.ravel(), V.values.ravel()

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return u_at(vsp) * v_at(vp) * inv_mu[block.rows][:, None]

    def loss(block: _Block) -> np.ndarray:
        return v_flat[block.rows][:, None] * mu_u[block.cols][None, :]

    out = _DirectEngine(grid, cs_eps, scheme).run(gain, loss)
    return Distribution(grid=grid, values=out.reshape(grid.shape), time_tag=t)


def _require_cutoff(cs_eps: CrossSection) -> None:
    if not cs_eps.has_cutoff:
        raise ConfigurationError("gain/loss splitting needs a cutoff: the loss integral diverges without eps")


def gain_gamma(
    g: Distribution,
    h: Distribution,
    t: float,
    cfg: "SolverConfig",
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> Distribution:
    """Gamma^{t,+}(g, h) = int int B_eps mu_* g'_* h', discretised like gamma_t."""
    _check_pair(g, h)
    cs_eps, grid, scheme, mu = _transformed_setup(g, t, cfg, cs, scheme)
    _require_cutoff(cs_eps)
    g_at = _weighted_interpolant(grid, g.values, mu, scheme.interp)
    h_at = g_at if g is h else _weighted_interpolant(grid, h.values, mu, scheme.interp)
    inv_mu = 1.0 / np.maximum(mu, MU_FLOOR)

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return g_at(vsp) * h_at(vp) * inv_mu[block.rows][:, None]

    out = _DirectEngine(grid, cs_eps, scheme).run(gain)
    return Distribution(grid=grid, values=out.reshape(grid.shape), time_tag=t)


def _loss_table(grid: VelocityGrid, cs_eps: CrossSection, scheme: CollisionScheme) -> np.ndarray:
    """A_eps h^d Phi(|w|) on the (2n-1)^d offset lattice, A_eps = discrete int of b_eps."""
    mass = scheme.quad.kernel_mass(cs_eps)
    key = {
        "table": "loss",
        "grid": grid.signature,
        "gamma": cs_eps.gamma,
        "kernel": cs_eps.signature,
        "quadrature": scheme.quad.signature,
    }

    def build() -> np.ndarray:
        offsets = grid.spacing * np.arange(-(grid.n - 1), grid.n)
        mesh = np.meshgrid(*([offsets] * grid.dim), indexing="ij")
        r = np.sqrt(sum(m * m for m in mesh))
        logger.debug(f"tabulating loss kernel for {grid.signature} {cs_eps.signature}")
        return mass * grid.cell_volume * kinetic_factor_phi(r, cs_eps.gamma)

    return tabulation_cache().get_or_build(key, build)


def loss_L_eps(
    g: Distribution,
    t: float,
    cfg: "SolverConfig",
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> Distribution:
    """L_eps(g)(v) = int int B_eps mu(t, v_*) g_*, by lattice convolution.

    Only the v_* nodes the direct engine visits contribute, with the same
    stride^d weight, so gain_gamma - loss_gamma equals gamma_t.
    """
    cs_eps, grid, scheme, mu = _transformed_setup(g, t, cfg, cs, scheme)
    _require_cutoff(cs_eps)
    if g.is_spatial:
        raise ConfigurationError("loss operator acts on velocity-only fields")
    table = _loss_table(grid, cs_eps, scheme)
    source = mu.reshape(grid.shape) * g.values
    stride = scheme.vstar_stride
    if stride > 1:
        kept = np.zeros(grid.shape)
        kept[(slice(None, None, stride),) * grid.dim] = float(stride**grid.dim)
        source = source * kept
    out = fftconvolve(source, table, mode="same")
    return Distribution(grid=grid, values=out, time_tag=t)


def loss_gamma(g: Distribution, h: Distribution, t: float, cfg: "SolverConfig", cs: CrossSection, scheme: Optional[CollisionScheme] = None) -> Distribution:
    """Gamma^{t,-}(g, h) = h L_eps(g)."""
    loss = loss_L_eps(g, t, cfg, cs, scheme)
    return h.with_values(h.values * loss.values, time_tag=t)


# weak forms


def trilinear_weak_form(f: Distribution, g: Distribution, h: Distribution, cs: CrossSection, scheme: CollisionScheme) -> float:
    """(Q(f, g), h) = sum B f(v_*) g(v) [h(v') - h(v)] with the difference formed per node pair."""
    grid = _check_pair(f, g)
    _check_pair(g, h)
    scheme.check(cs, grid)
    h_at = FieldInterpolant(grid, h.values, scheme.interp)
    h_flat = h.values.ravel()

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return h_at(vp)

    def loss(block: _Block) -> np.ndarray:
        return np.broadcast_to(h_flat[block.rows][:, None], (len(block.rows), len(block.cols)))

    per_v = _DirectEngine(grid, cs, scheme).run(gain, loss, col_factor=f.values.ravel())
    return float(np.sum(per_v * g.values.ravel())) * grid.cell_volume


def dissipation_functional(g: Distribution, f: Distribution, cs: CrossSection, scheme: CollisionScheme) -> float:
    """1/2 sum B g(v_*) (f(v') - f(v))^2, the nonnegative part of -(Q(g, f), f)."""
    grid = _check_pair(g, f)
    scheme.check(cs, grid)
    f_at = FieldInterpolant(grid, f.values, scheme.interp, "zero")
    f_flat = f.values.ravel()

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return (f_at(vp) - f_flat[block.rows][:, None]) ** 2

    per_v = _DirectEngine(grid, cs, scheme).run(gain, None, col_factor=g.values.ravel())
    return 0.5 * float(np.sum(per_v)) * grid.cell_volume


def entropy_dissipation(f: Distribution, cs: CrossSection, scheme: CollisionScheme, floor: float = 1e-30) -> float:
    """D = -(Q(f, f), log f); nonnegative for positive f."""
    q = apply_collision(f, f, cs, scheme)
    return -float(np.sum(q.values * np.log(np.maximum(f.values, floor)))) * f.grid.cell_volume


def origin_engine_sum(F: Distribution, cs: CrossSection, scheme: CollisionScheme) -> float:
    """sum_v sum_sigma b w [F(v') - F(v)] h^d with v_* fixed at the origin."""
    grid = F.grid
    scheme.check(cs, grid)
    origin = np.ravel_multi_index(tuple([grid.n // 2] * grid.dim), grid.shape)
    F_at = FieldInterpolant(grid, F.values, scheme.interp)
    F_flat = F.values.ravel()

    def gain(block: _Block, vp: np.ndarray, vsp: np.ndarray) -> np.ndarray:
        return F_at(vp)

    def loss(block: _Block) -> np.ndarray:
        return F_flat[block.rows][:, None]

    engine = _DirectEngine(grid, cs, scheme, cols=np.array([origin]), col_weight=1.0)
    return float(np.sum(engine.run(gain, loss))) * grid.cell_volume
