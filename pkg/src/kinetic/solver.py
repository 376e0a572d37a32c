from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import numpy as np
import scipy.fft as sfft
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import quad_vec, trapezoid

from kinetic.collision import (
    CollisionScheme,
    Interp,
    MU_FLOOR,
    apply_collision,
    cutoff_section,
    gain_gamma,
    gamma_t,
    loss_L_eps,
    make_scheme,
    scheme_from_config,
)
from kinetic.errors import ConfigurationError, DivergenceError, DomainError, StabilityError
from kinetic.grid import (
    Distribution,
    NormSpec,
    SpatialLattice,
    VelocityGrid,
    entropy_h,
    moments,
    mu_weight,
    transform_horizon,
    weighted_sobolev_norm,
)
from kinetic.kernel import CrossSection
from kinetic import storage

NEGATIVITY_TOL = 1e-6
DIVERGENCE_STREAK = 3


class SpatialSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_x: int = Field(ge=2)
    L_x: float = Field(gt=0.0)

    def lattice(self) -> SpatialLattice:
        return SpatialLattice(n_x=self.n_x, length=self.L_x)


class SolverConfig(BaseModel):
    """Time stepping, transform weight and Picard controls for one run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    rho: float = Field(default=1.0, gt=0.0)
    kappa: float = Field(default=0.25, ge=0.0)
    eps: Optional[float] = Field(default=None, gt=0.0)
    dt: float = Field(default=0.01, gt=0.0)
    horizon: float = Field(default=0.5, gt=0.0)
    picard_max_iters: int = Field(default=30, ge=1)
    picard_tol: float = Field(default=1e-8, gt=0.0)  # absolute, on the L^inf_t H^k_l sweep difference
    k_reg: float = Field(default=0.0, ge=0.0)
    l_wt: float = 0.0
    spatial: Optional[SpatialSpec] = None
    n_theta: int = Field(default=16, ge=4)
    n_phi: int = Field(default=8, ge=4)
    interp: Interp = "trilinear"
    vstar_stride: int = Field(default=1, ge=1)
    snapshot_every: int = Field(default=10, ge=1)
    method: Literal["picard", "rk4", "strang"] = "picard"
    collisions: bool = True

    @model_validator(mode="after")
    def _horizon_within_transform(self) -> "SolverConfig":
        t0 = transform_horizon(self.rho, self.kappa)
        if self.horizon > t0 * (1.0 + 1e-12):
            raise ValueError(f"horizon {self.horizon} exceeds T0 = rho/(2*kappa) = {t0}")
        return self

    @property
    def t0(self) -> float:
        return transform_horizon(self.rho, self.kappa)

    def monitored_norms(self) -> list[NormSpec]:
        specs = [NormSpec(m=self.k_reg, l=self.l_wt), NormSpec(l=self.l_wt), NormSpec()]
        return list({spec.key: spec for spec in specs}.values())


def time_grid(cfg: SolverConfig, t_start: float = 0.0, t_end: Optional[float] = None) -> np.ndarray:
    end = cfg.horizon if t_end is None else t_end
    if not end > t_start:
        raise DomainError(f"time window [{t_start}, {end}] is empty")
    steps = max(1, math.ceil((end - t_start) / cfg.dt - 1e-9))
    return np.linspace(t_start, end, steps + 1)


def check_transformed(cfg: SolverConfig, cs: CrossSection) -> None:
    if cfg.kappa == 0.0 and cs.gamma > 0.0:
        raise ConfigurationError("kappa = 0 is admissible only for gamma <= 0")


@dataclass
class RunHistory:
    """Time series of one run. kind 'g' holds the transformed unknown, 'f' the physical one.

    Moments and entropy are always those of f (f = mu g for transformed runs).
    """

    kind: Literal["f", "g"]
    method: str
    grid: VelocityGrid
    times: np.ndarray
    snapshots: list[Distribution]
    snapshot_times: list[float]
    norm_series: dict[str, np.ndarray]
    moment_series: dict[str, np.ndarray]
    entropy_series: np.ndarray
    rho: float = 0.0
    kappa: float = 0.0
    eps_tag: Optional[float] = None
    picard_contraction: list[float] = field(default_factory=list)
    picard_differences: list[float] = field(default_factory=list)
    moment_gain: Optional[float] = None
    converged: Optional[bool] = None
    masked_points: int = 0
    spatial: Optional[SpatialLattice] = None
    iterate: Optional[list[np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0.0):
            raise ConfigurationError("history times must be strictly increasing")
        for name, series in [*self.norm_series.items(), *self.moment_series.items(), ("entropy", self.entropy_series)]:
            if len(series) != len(self.times):
                raise ConfigurationError(f"series {name} has {len(series)} entries for {len(self.times)} times")

    @property
    def final(self) -> Distribution:
        if self.iterate:
            return self.field_at(len(self.times) - 1)
        return self.snapshots[-1]

    def field_at(self, index: int) -> Distribution:
        if not self.iterate:
            raise ConfigurationError("history carries no full trajectory")
        return Distribution(grid=self.grid, values=self.iterate[index], time_tag=float(self.times[index]), spatial=self.spatial)

    def f_snapshots(self) -> list[Distribution]:
        if self.kind == "f":
            return list(self.snapshots)
        return [_to_f(g, g.time_tag, self.rho, self.kappa) for g in self.snapshots]

    def extend(self, other: "RunHistory") -> "RunHistory":
        """Append a continuation window that starts at this history's last time."""
        if other.kind != self.kind or not math.isclose(other.times[0], self.times[-1], abs_tol=1e-12):
            raise ConfigurationError("continuation window must start where the history ends")
        seam = float(self.times[-1])
        gain = None
        if self.moment_gain is not None and other.moment_gain is not None:
            gain = math.hypot(self.moment_gain, other.moment_gain)
        snaps = [(t, s) for t, s in zip(other.snapshot_times, other.snapshots) if t > seam + 1e-12]
        return RunHistory(
            kind=self.kind,
            method=self.method,
            grid=self.grid,
            times=np.concatenate([self.times, other.times[1:]]),
            snapshots=self.snapshots + [s for _, s in snaps],
            snapshot_times=self.snapshot_times + [t for t, _ in snaps],
            norm_series={k: np.concatenate([v, other.norm_series[k][1:]]) for k, v in self.norm_series.items()},
            moment_series={k: np.concatenate([v, other.moment_series[k][1:]]) for k, v in self.moment_series.items()},
            entropy_series=np.concatenate([self.entropy_series, other.entropy_series[1:]]),
            rho=self.rho,
            kappa=self.kappa,
            eps_tag=self.eps_tag,
            picard_contraction=self.picard_contraction + other.picard_contraction,
            picard_differences=self.picard_differences + other.picard_differences,
            moment_gain=gain,
            converged=bool(self.converged) and bool(other.converged) if self.converged is not None else other.converged,
            masked_points=max(self.masked_points, other.masked_points),
            spatial=self.spatial,
            iterate=None if self.iterate is None or other.iterate is None else self.iterate + other.iterate[1:],
        )

    def save(self, directory: Path) -> list[Path]:
        """One CSV per series, one binary per snapshot, history.json as index."""
        written = [
            storage.write_series(directory / "norms.csv", self.times, self.norm_series),
            storage.write_series(directory / "moments.csv", self.times, self.moment_series),
            storage.write_series(directory / "entropy.csv", self.times, {"H": self.entropy_series}),
        ]
        if self.picard_differences:
            rows = zip(range(1, len(self.picard_differences) + 1), self.picard_differences, [math.nan, *self.picard_contraction])
            written.append(storage.write_csv(directory / "picard.csv", ["sweep", "difference", "contraction"], rows))
        names = []
        for index, snap in enumerate(self.snapshots):
            name = f"snap_{index:04d}.bin"
            written.append(storage.write_distribution(directory / "snapshots" / name, snap))
            names.append(name)
        index = {
            "kind": self.kind,
            "method": self.method,
            "grid": {"n": self.grid.n, "radius": self.grid.radius, "dim": self.grid.dim},
            "spatial": None if self.spatial is None else {"n_x": self.spatial.n_x, "L_x": self.spatial.length},
            "rho": self.rho,
            "kappa": self.kappa,
            "eps_tag": self.eps_tag,
            "moment_gain": self.moment_gain,
            "converged": self.converged,
            "masked_points": self.masked_points,
            "snapshot_times": [storage.format_float(t) for t in self.snapshot_times],
            "snapshots": names,
        }
        written.append(storage.write_json(directory / "history.json", index))
        return written

    @classmethod
    def load(cls, directory: Path) -> "RunHistory":
        index = storage.read_json(directory / "history.json")
        grid = VelocityGrid(**index["grid"])
        spatial = None if index["spatial"] is None else SpatialLattice(index["spatial"]["n_x"], index["spatial"]["L_x"])

        def columns(name: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
            header, data = storage.read_csv(directory / name)
            return data[:, 0], {key: data[:, i] for i, key in enumerate(header) if i > 0}

        times, norms = columns("norms.csv")
        _, moment_cols = columns("moments.csv")
        _, entropy = columns("entropy.csv")
        differences: list[float] = []
        contraction: list[float] = []
        if (directory / "picard.csv").exists():
            _, picard = storage.read_csv(directory / "picard.csv")
            differences = picard[:, 1].tolist()
            contraction = picard[1:, 2].tolist()
        return cls(
            kind=index["kind"],
            method=index["method"],
            grid=grid,
            times=times,
            snapshots=[storage.read_distribution(directory / "snapshots" / name) for name in index["snapshots"]],
            snapshot_times=[float(t) for t in index["snapshot_times"]],
            norm_series=norms,
            moment_series=moment_cols,
            entropy_series=entropy["H"],
            rho=index["rho"],
            kappa=index["kappa"],
            eps_tag=index["eps_tag"],
            picard_contraction=contraction,
            picard_differences=differences,
            moment_gain=index["moment_gain"],
            converged=index["converged"],
            masked_points=index["masked_points"],
            spatial=spatial,
        )


# transform


def _mu(t: float, rho: float, kappa: float, like: Distribution) -> np.ndarray:
    mu = mu_weight(t, rho, kappa, like.grid).values
    return mu if like.spatial is None else mu[None, ...]


def _to_f(g: Distribution, t: float, rho: float, kappa: float) -> Distribution:
    return g.with_values(_mu(t, rho, kappa, g) * g.values, time_tag=t)


def underflow_mask(t: float, cfg: SolverConfig, grid: VelocityGrid) -> np.ndarray:
    return mu_weight(t, cfg.rho, cfg.kappa, grid).values < MU_FLOOR


def transform_to_g(f: Distribution, t: float, cfg: SolverConfig, strict: bool = False) -> Distribution:
    """g = f / mu(t); points where mu underflows are zeroed and reported, never divided."""
    mu = _mu(t, cfg.rho, cfg.kappa, f)
    mask = np.broadcast_to(mu < MU_FLOOR, f.values.shape)
    if np.any(mask):
        count = int(np.count_nonzero(underflow_mask(t, cfg, f.grid)))
        if strict:
            raise DomainError(f"mu(t={t}) underflows below {MU_FLOOR:g} at {count} lattice points")
        logger.warning(f"mu underflow at {count} lattice points (t={t}); g set to 0 there")
    values = np.where(mask, 0.0, f.values / np.where(mask, 1.0, mu))
    return f.with_values(values, time_tag=t)


def transform_to_f(g: Distribution, t: float, cfg: SolverConfig) -> Distribution:
    return _to_f(g, t, cfg.rho, cfg.kappa)


# history assembly


def _moment_row(f: Distribution) -> dict[str, float]:
    mom = moments(f)
    row = {"mass": mom.mass}
    row.update({f"momentum_{a + 1}": float(p) for a, p in enumerate(mom.momentum)})
    row["energy"] = mom.energy
    return row


def _assemble(
    kind: Literal["f", "g"],
    method: str,
    fields: Sequence[Distribution],
    norms: Sequence[NormSpec],
    snapshot_every: int,
    rho: float = 0.0,
    kappa: float = 0.0,
    keep_iterate: bool = True,
    **extra,
) -> RunHistory:
    times = np.array([u.time_tag for u in fields])
    norm_series = {spec.key: np.array([weighted_sobolev_norm(u, spec) for u in fields]) for spec in norms}
    physical = fields if kind == "f" else [_to_f(u, u.time_tag, rho, kappa) for u in fields]
    rows = [_moment_row(f) for f in physical]
    moment_series = {key: np.array([row[key] for row in rows]) for key in rows[0]}
    if kind == "g":
        g_rows = [moments(u) for u in fields]
        moment_series["g_mass"] = np.array([m.mass for m in g_rows])
        moment_series["g_energy"] = np.array([m.energy for m in g_rows])
    picks = sorted(set(range(0, len(fields), snapshot_every)) | {len(fields) - 1})
    return RunHistory(
        kind=kind,
        method=method,
        grid=fields[0].grid,
        times=times,
        snapshots=[fields[i] for i in picks],
        snapshot_times=[float(times[i]) for i in picks],
        norm_series=norm_series,
        moment_series=moment_series,
        entropy_series=np.array([entropy_h(f) for f in physical]),
        rho=rho,
        kappa=kappa,
        spatial=fields[0].spatial,
        iterate=[u.values for u in fields] if keep_iterate else None,
        **extra,
    )


def _moment_gain(fields: Sequence[Distribution], cfg: SolverConfig) -> float:
    spec = NormSpec(m=cfg.k_reg, l=cfg.l_wt + 1.0)
    values = np.array([weighted_sobolev_norm(u, spec) ** 2 for u in fields])
    times = np.array([u.time_tag for u in fields])
    return math.sqrt(float(trapezoid(values, times))) if len(times) > 1 else 0.0


# Picard iteration in mild form


def picard_solve(
    g0: Distribution,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
    initial_guess: Optional[RunHistory] = None,
    t_start: float = 0.0,
    t_end: Optional[float] = None,
) -> RunHistory:
    """Cutoff Picard sweeps g^n -> g^{n+1} on a fixed time grid.

    Each step uses the exponential integrator
        g_{k+1} = a_k g_k + dt b_k (G_k + G_{k+1}) / 2
    with G = Gamma^{t,+}(g^n, g^n), a_k the trapezoid value of the linear
    damping over [t_k, t_{k+1}] and b_k the same over the half step. Every
    factor is nonnegative, so g >= 0 is preserved. Sweeps stop once the
    absolute L^inf_t H^k_l difference drops below picard_tol.
    """
    if g0.is_spatial:
        raise ConfigurationError("picard_solve handles spatially homogeneous data; use strang_solve for x-dependence")
    if not g0.is_nonnegative():
        raise DomainError("picard_solve needs g0 >= 0")
    check_transformed(cfg, cs)
    cs_eps = cutoff_section(cs, cfg)
    if not cs_eps.has_cutoff:
        raise ConfigurationError("picard_solve needs a cutoff: set solver.eps or cross_section.eps_cutoff")
    grid = g0.grid
    scheme = scheme or scheme_from_config(cfg, cs_eps, grid)
    times = time_grid(cfg, t_start, t_end)
    dt = float(times[1] - times[0])
    damping = cfg.kappa * (1.0 + grid.speed_sq)
    spec = NormSpec(m=cfg.k_reg, l=cfg.l_wt)
    scale = weighted_sobolev_norm(g0, spec) or 1.0

    current = _warm_start(g0, times, initial_guess)
    differences: list[float] = []
    contraction: list[float] = []
    streak = 0
    converged = False
    logger.info(f"picard: {len(times) - 1} steps dt={dt:.4g} eps={cs_eps.eps_cutoff} on {grid.signature}")

    for sweep in range(1, cfg.picard_max_iters + 1):
        fields = [Distribution(grid=grid, values=u, time_tag=float(t)) for u, t in zip(current, times)]
        loss = [loss_L_eps(u, u.time_tag, cfg, cs_eps, scheme).values for u in fields]
        gain = [gain_gamma(u, u, u.time_tag, cfg, cs_eps, scheme).values for u in fields]
        updated = [g0.values]
        for k in range(len(times) - 1):
            half = 0.5 * dt * (loss[k] + loss[k + 1])
            a = np.exp(-damping * dt - half)
            b = np.exp(-0.5 * damping * dt - 0.5 * half)
            updated.append(a * updated[-1] + dt * b * 0.5 * (gain[k] + gain[k + 1]))

        diff = max(weighted_sobolev_norm(g0.with_values(u - v), spec) for u, v in zip(updated, current))
        if differences:
            previous = differences[-1]
            factor = diff / previous if previous > 0.0 else (0.0 if diff == 0.0 else math.inf)
            contraction.append(factor)
            streak = streak + 1 if factor >= 1.0 else 0
        differences.append(diff)
        current = updated
        logger.debug(f"picard sweep {sweep}: diff {diff:.3e} (relative {diff / scale:.3e})")

        if diff < cfg.picard_tol:
            converged = True
            break
        if streak >= DIVERGENCE_STREAK:
            partial = _picard_history(grid, current, times, cfg, cs_eps, differences, contraction, False)
            logger.error(f"picard diverged after {sweep} sweeps: factors {contraction[-DIVERGENCE_STREAK:]}")
            raise DivergenceError(f"contraction factor >= 1 for {DIVERGENCE_STREAK} consecutive sweeps", history=partial)

    if not converged:
        logger.warning(f"picard stopped at {cfg.picard_max_iters} sweeps, last diff {differences[-1]:.3e} (tol {cfg.picard_tol:g})")
    else:
        logger.info(f"picard converged in {len(differences)} sweeps")
    return _picard_history(grid, current, times, cfg, cs_eps, differences, contraction, converged)


def _warm_start(g0: Distribution, times: np.ndarray, guess: Optional[RunHistory]) -> list[np.ndarray]:
    if guess is not None and guess.iterate is not None and len(guess.iterate) == len(times):
        if np.allclose(guess.times, times, rtol=0.0, atol=1e-12):
            return [g0.values, *guess.iterate[1:]]
    if guess is not None:
        logger.warning("initial guess does not match the time grid; starting from g0")
    return [g0.values] * len(times)


def _picard_history(
    grid: VelocityGrid,
    iterate: list[np.ndarray],
    times: np.ndarray,
    cfg: SolverConfig,
    cs_eps: CrossSection,
    differences: list[float],
    contraction: list[float],
    converged: bool,
) -> RunHistory:
    grid_fields = [Distribution(grid=grid, values=u, time_tag=float(t)) for u, t in zip(iterate, times)]
    masked = int(np.count_nonzero(underflow_mask(float(times[-1]), cfg, grid)))
    return _assemble(
        "g",
        "picard",
        grid_fields,
        cfg.monitored_norms(),
        cfg.snapshot_every,
        rho=cfg.rho,
        kappa=cfg.kappa,
        eps_tag=cs_eps.eps_cutoff,
        picard_contraction=list(contraction),
        picard_differences=list(differences),
        moment_gain=_moment_gain(grid_fields, cfg),
        converged=converged,
        masked_points=masked,
    )


def local_existence_time(g0_norm: float, c_const: float) -> float:
    """T_* = (1/C) log(1 + 3 / (1 + 4 ||g0||^2))."""
    if g0_norm < 0.0 or not c_const > 0.0:
        raise DomainError(f"need g0_norm >= 0 and c_const > 0, got {g0_norm}, {c_const}")
    return math.log1p(3.0 / (1.0 + 4.0 * g0_norm * g0_norm)) / c_const


def continue_solution(
    history: RunHistory,
    cfg: SolverConfig,
    cs: CrossSection,
    c_const: float,
    horizon: float,
    scheme: Optional[CollisionScheme] = None,
) -> RunHistory:
    """Extend a Picard history window by window, each no longer than T_* from its start state."""
    if history.kind != "g" or not history.iterate:
        raise ConfigurationError("continuation needs a transformed history with its trajectory")
    if horizon > cfg.t0 * (1.0 + 1e-12):
        raise DomainError(f"horizon {horizon} exceeds T0 = rho/(2*kappa) = {cfg.t0}")
    spec = NormSpec(m=cfg.k_reg, l=cfg.l_wt)
    current = history
    while current.times[-1] < horizon - 1e-12:
        start = float(current.times[-1])
        g_last = current.final
        window = min(local_existence_time(weighted_sobolev_norm(g_last, spec), c_const), horizon - start)
        logger.info(f"continuation window [{start:.4g}, {start + window:.4g}]")
        current = current.extend(picard_solve(g_last, cfg, cs, scheme, t_start=start, t_end=start + window))
    return current


def triple_norm(history: RunHistory, k: Optional[float] = None, l: Optional[float] = None) -> float:
    """|||g|||^2 = sup_t ||g||^2_{H^k_l} + kappa int ||g||^2_{H^k_{l+1}} dt."""
    k = 0.0 if k is None else k
    l = 0.0 if l is None else l
    if history.iterate:
        fields = [history.field_at(i) for i in range(len(history.times))]
    else:
        fields = list(history.snapshots)
    times = np.array([u.time_tag for u in fields])
    sup = max(weighted_sobolev_norm(u, NormSpec(m=k, l=l)) ** 2 for u in fields)
    upper = np.array([weighted_sobolev_norm(u, NormSpec(m=k, l=l + 1.0)) ** 2 for u in fields])
    integral = float(trapezoid(upper, times)) if len(times) > 1 else 0.0
    return math.sqrt(sup + history.kappa * integral)


def transformed_residual(
    history: RunHistory,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> np.ndarray:
    """||(g_{k+1} - g_{k-1})/(2 dt) + kappa <v>^2 g_k - Gamma^t(g_k, g_k)||_{L^2} at interior times."""
    if history.kind != "g" or not history.iterate:
        raise ConfigurationError("residual check needs a transformed history with its trajectory")
    damping = cfg.kappa * (1.0 + history.grid.speed_sq)
    out = []
    for index in range(1, len(history.times) - 1):
        g = history.field_at(index)
        span = history.times[index + 1] - history.times[index - 1]
        collision = gamma_t(g, g, g.time_tag, cfg, cs, scheme).values
        residual = (history.iterate[index + 1] - history.iterate[index - 1]) / span + damping * g.values - collision
        out.append(math.sqrt(float(np.sum(residual * residual)) * history.grid.cell_volume))
    return np.array(out)


# explicit cross-check and splitting


def _rk4_step(values: np.ndarray, dt: float, rhs: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    k1 = rhs(values)
    k2 = rhs(values + 0.5 * dt * k1)
    k3 = rhs(values + 0.5 * dt * k2)
    k4 = rhs(values + dt * k3)
    return values + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_stability(values: np.ndarray, t: float) -> None:
    peak = float(np.max(np.abs(values)))
    low = float(np.min(values))
    if low < -NEGATIVITY_TOL * peak:
        logger.error(f"negative density {low:.3e} at t={t:.4g} (peak {peak:.3e})")
        raise StabilityError(f"density below -{NEGATIVITY_TOL:g} * max at t={t:.6g}", time=t, min_value=low)


def _physical_scheme(cfg: SolverConfig, cs_eps: CrossSection, grid: VelocityGrid, scheme: Optional[CollisionScheme]) -> CollisionScheme:
    if scheme is not None:
        return scheme
    return make_scheme(cs_eps, grid, cfg.n_theta, cfg.n_phi, interp=cfg.interp, vstar_stride=cfg.vstar_stride)


def _collision_rhs(grid: VelocityGrid, cs_eps: CrossSection, scheme: CollisionScheme) -> Callable[[np.ndarray], np.ndarray]:
    def rhs(values: np.ndarray) -> np.ndarray:
        f = Distribution(grid=grid, values=values)
        return apply_collision(f, f, cs_eps, scheme).values

    return rhs


def rk4_solve(
    f0: Distribution,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> RunHistory:
    """Classical RK4 for f_t = Q(f, f) on the velocity lattice."""
    if f0.is_spatial:
        raise ConfigurationError("rk4_solve handles spatially homogeneous data; use strang_solve for x-dependence")
    if not f0.is_nonnegative():
        raise DomainError("rk4_solve needs f0 >= 0")
    cs_eps = cutoff_section(cs, cfg)
    grid = f0.grid
    scheme = _physical_scheme(cfg, cs_eps, grid, scheme)
    rhs = _collision_rhs(grid, cs_eps, scheme)
    times = time_grid(cfg)
    dt = float(times[1] - times[0])
    logger.info(f"rk4: {len(times) - 1} steps dt={dt:.4g} on {grid.signature} ({scheme.signature})")

    fields = [f0.with_values(f0.values, time_tag=float(times[0]))]
    values = f0.values
    for t in times[1:]:
        values = _rk4_step(values, dt, rhs)
        _check_stability(values, float(t))
        fields.append(Distribution(grid=grid, values=values, time_tag=float(t)))
    return _assemble("f", "rk4", fields, cfg.monitored_norms(), cfg.snapshot_every, rho=cfg.rho, kappa=cfg.kappa, eps_tag=cs_eps.eps_cutoff)


def _transport(values: np.ndarray, grid: VelocityGrid, spatial: SpatialLattice, tau: float) -> np.ndarray:
    """Exact free streaming in x along v_1 for time tau, per Fourier mode."""
    k = spatial.wavenumbers.copy()
    if spatial.n_x % 2 == 0:
        # the Nyquist mode of real data cannot carry a one-sided phase
        k[spatial.n_x // 2] = 0.0
    phase = np.exp(-1j * tau * k.reshape((-1,) + (1,) * grid.dim) * grid.velocities[0][None, ...])
    return np.real(sfft.ifft(sfft.fft(values, axis=0) * phase, axis=0))


def strang_step(
    f: Distribution,
    dt: float,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
    collisions: Optional[bool] = None,
) -> Distribution:
    """Half transport, one RK4 collision step per x node, half transport."""
    if f.spatial is None:
        raise ConfigurationError("strang_step needs a spatial axis")
    grid, spatial = f.grid, f.spatial
    values = _transport(f.values, grid, spatial, 0.5 * dt)
    if cfg.collisions if collisions is None else collisions:
        cs_eps = cutoff_section(cs, cfg)
        scheme = _physical_scheme(cfg, cs_eps, grid, scheme)
        rhs = _collision_rhs(grid, cs_eps, scheme)
        rows = [values[i] for i in range(spatial.n_x)]
        if scheme.workers > 1:
            with ThreadPoolExecutor(max_workers=scheme.workers) as pool:
                stepped = list(pool.map(lambda row: _rk4_step(row, dt, rhs), rows))
        else:
            stepped = [_rk4_step(row, dt, rhs) for row in rows]
        values = np.stack(stepped)
        _check_stability(values, f.time_tag + dt)
    values = _transport(values, grid, spatial, 0.5 * dt)
    return f.with_values(values, time_tag=f.time_tag + dt)


def strang_solve(
    f0: Distribution,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
) -> RunHistory:
    if f0.spatial is None:
        raise ConfigurationError("strang_solve needs a spatial axis")
    if not f0.is_nonnegative():
        raise DomainError("strang_solve needs f0 >= 0")
    times = time_grid(cfg)
    dt = float(times[1] - times[0])
    if cfg.collisions and scheme is None:
        scheme = _physical_scheme(cfg, cutoff_section(cs, cfg), f0.grid, None)
    fields = [f0.with_values(f0.values, time_tag=float(times[0]))]
    for t in times[1:]:
        step = strang_step(fields[-1], dt, cfg, cs, scheme)
        fields.append(step.with_values(step.values, time_tag=float(t)))
    return _assemble(
        "f", "strang", fields, cfg.monitored_norms(), cfg.snapshot_every, rho=cfg.rho, kappa=cfg.kappa, eps_tag=cfg.eps
    )


# fractional Kolmogorov baseline


def kolmogorov_damping(grid: VelocityGrid, spatial: SpatialLattice, s_frac: float, t: float) -> np.ndarray:
    """int_0^t |eta + k tau e_1|^{2s} dtau on the (k_x, eta) lattice, shape (n_x, n, ..., n)."""
    k = spatial.wavenumbers.reshape((-1,) + (1,) * grid.dim)
    eta1 = grid.wavenumbers.reshape((1, -1) + (1,) * (grid.dim - 1))
    if grid.dim > 1:
        perp = np.meshgrid(*([grid.wavenumbers] * (grid.dim - 1)), indexing="ij")
        perp_sq = sum(p * p for p in perp)[None, None, ...]
    else:  # pragma: no cover
        perp_sq = np.zeros((1, 1))
    shape = np.broadcast_shapes(k.shape, eta1.shape, perp_sq.shape)
    k, eta1, perp_sq = (np.broadcast_to(a, shape) for a in (k, eta1, perp_sq))
    out = np.empty(shape)

    still = k == 0.0
    out[still] = t * (eta1[still] ** 2 + perp_sq[still]) ** s_frac

    # |a + k tau|^{2s} has a closed-form antiderivative on the perp = 0 line
    line = ~still & (perp_sq == 0.0)
    a, kk = eta1[line], k[line]

    def antiderivative(tau: float) -> np.ndarray:
        y = a + kk * tau
        return y * np.abs(y) ** (2.0 * s_frac) / (kk * (2.0 * s_frac + 1.0))

    out[line] = antiderivative(t) - antiderivative(0.0)

    rest = ~still & ~line
    if np.any(rest):
        a, kk, p2 = eta1[rest], k[rest], perp_sq[rest]
        value, _ = quad_vec(lambda tau: ((a + kk * tau) ** 2 + p2) ** s_frac, 0.0, t, epsabs=1e-14, epsrel=1e-12, norm="max")
        out[rest] = value
    return out


def kolmogorov_exact_solve(f0: Distribution, s_frac: float, t: float) -> Distribution:
    """Mode-wise solution of f_t + v_1 d_x f = -(-Delta_v)^s f.

    F(t, k, eta) = F0(k, eta + k t e_1) exp(-int_0^t |eta + k tau e_1|^{2s} dtau);
    the shifted frequency is evaluated by a direct transform along v_1.
    """
    if f0.spatial is None:
        raise ConfigurationError("kolmogorov_exact_solve needs a spatial axis")
    if not 0.0 < s_frac < 1.0:
        raise DomainError(f"s_frac must lie in (0, 1), got {s_frac}")
    if t < 0.0:
        raise DomainError(f"t must be >= 0, got {t}")
    if t == 0.0:
        return f0.with_values(f0.values.copy(), time_tag=f0.time_tag)
    grid, spatial = f0.grid, f0.spatial
    perp_axes = tuple(range(2, grid.dim + 1))
    spectrum = sfft.fft(f0.values, axis=0)
    if perp_axes:
        spectrum = sfft.fftn(spectrum, axes=perp_axes)

    eta = grid.wavenumbers
    v1 = grid.axis
    shifted_eta = eta[None, :] + t * spatial.wavenumbers[:, None]
    forward = np.exp(-1j * shifted_eta[:, :, None] * v1[None, None, :])
    shifted = np.einsum("xej,xj...->xe...", forward, spectrum)

    evolved = shifted * np.exp(-kolmogorov_damping(grid, spatial, s_frac, t))
    backward = np.exp(1j * np.outer(v1, eta)) / grid.n
    values = np.einsum("je,xe...->xj...", backward, evolved)
    if perp_axes:
        values = sfft.ifftn(values, axes=perp_axes)
    values = np.real(sfft.ifft(values, axis=0))
    return f0.with_values(values, time_tag=f0.time_tag + t)


def kolmogorov_history(
    f0: Distribution,
    s_frac: float,
    times: Sequence[float],
    norms: Sequence[NormSpec] = (NormSpec(),),
) -> RunHistory:
    """Exact baseline sampled at the given times, every sample kept as a snapshot."""
    stamps = sorted(float(t) for t in times)
    fields = [kolmogorov_exact_solve(f0, s_frac, t) for t in stamps]
    fields = [u.with_values(u.values, time_tag=t) for u, t in zip(fields, stamps)]
    return _assemble("f", "kolmogorov", fields, norms, 1)
