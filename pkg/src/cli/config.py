from __future__ import annotations

import json
import math
import re
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from kinetic.collision import Interp, Mode
from kinetic.errors import ConfigError, ConfigurationError
from kinetic.estimates import InequalityId, sample_test_functions
from kinetic.grid import Distribution, SpatialLattice, VelocityGrid, make_grid, maxwellian
from kinetic.kernel import CrossSection
from kinetic.solver import SolverConfig

Command = Literal["solve", "verify", "sweep", "compare-ops", "kolmogorov", "emit-plots"]

_STRICT = ConfigDict(extra="forbid", frozen=True)


class GridSpec(BaseModel):
    model_config = _STRICT

    n: int = 16
    radius: float = Field(default=8.0, gt=0.0)
    dim: Literal[2, 3] = 3

    @field_validator("n")
    @classmethod
    def _even_lattice(cls, value: int) -> int:
        if value < 8 or value % 2:
            raise ValueError("n must be an even integer >= 8")
        return value

    def build(self) -> VelocityGrid:
        return make_grid(self.n, self.radius, self.dim)


class SchemeSpec(BaseModel):
    model_config = _STRICT

    mode: Mode = "direct"
    interp: Interp = "cubic"
    n_theta: int = Field(default=16, ge=4)
    n_phi: int = Field(default=8, ge=4)
    vstar_stride: int = Field(default=1, ge=1)


class InitialSpec(BaseModel):
    model_config = _STRICT

    kind: Literal["maxwellian", "anisotropic", "mixture", "bump"] = "maxwellian"
    rho: float = Field(default=1.0, gt=0.0)
    u: list[float] = Field(default_factory=lambda: [0.0])
    T: float = Field(default=1.0, gt=0.0)
    temperatures: Optional[list[float]] = None
    x_amplitude: float = Field(default=0.0, ge=0.0, lt=1.0)

    def build(self, grid: VelocityGrid, seed: int, spatial: Optional[SpatialLattice] = None) -> Distribution:
        if self.kind == "maxwellian":
            f = maxwellian(self.rho, self.u, self.T, grid)
        elif self.kind == "anisotropic":
            temps = self.temperatures or [2.0 * self.T] + [0.5 * self.T] * (grid.dim - 1)
            if len(temps) != grid.dim or min(temps) <= 0.0:
                raise ConfigurationError(f"temperatures need {grid.dim} positive entries")
            v = grid.velocities
            exponent = sum(v[a] ** 2 / (2.0 * temps[a]) for a in range(grid.dim))
            norm = self.rho / math.prod(math.sqrt(2.0 * math.pi * T) for T in temps)
            f = Distribution(grid=grid, values=norm * np.exp(-exponent))
        else:
            member = sample_test_functions(seed, 1, grid.dim, grid.radius, bump_fraction=1.0 if self.kind == "bump" else 0.0)[0]
            f = member.sample(grid)
        if spatial is None:
            return f
        profile = 1.0 + self.x_amplitude * np.cos(2.0 * math.pi * spatial.nodes / spatial.length)
        values = profile.reshape((-1,) + (1,) * grid.dim) * f.values[None, ...]
        return Distribution(grid=grid, values=values, spatial=spatial)


class DiagnosticsSpec(BaseModel):
    model_config = _STRICT

    m_list: list[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0])
    l_list: list[float] = Field(default_factory=lambda: [0.0])
    xi_c: Optional[float] = Field(default=None, gt=0.0)
    conservation_tol: float = Field(default=1e-6, gt=0.0)
    entropy_cross_check: bool = False


class VerifySpec(BaseModel):
    model_config = _STRICT

    checks: list[InequalityId] = Field(default_factory=lambda: list(InequalityId))
    ensemble_size: int = Field(default=10, ge=1)
    resolutions: list[int] = Field(default_factory=lambda: [12, 16], min_length=1)
    tolerance: float = Field(default=0.3, gt=0.0)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    s_norm: Optional[float] = None
    m: float = 0.0
    alpha: float = 0.0
    l_values: list[int] = Field(default_factory=lambda: [1, 2, 3])
    n_samples: int = Field(default=100_000, ge=1)
    N_range: list[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    lam: float = 1.0
    interp_k: float = 1.0
    interp_p: float = Field(default=2.0, ge=0.0)
    interp_delta: float = Field(default=0.5, gt=0.0)
    cancellation_eps: float = Field(default=0.2, gt=0.0)


class SweepSpec(BaseModel):
    model_config = _STRICT

    eps_list: list[float] = Field(min_length=1)


class CompareSpec(BaseModel):
    """Direct vs spectral oracle. Inputs must be resolved and decay well inside the box."""

    model_config = _STRICT

    pairs: int = Field(default=10, ge=1)
    tolerance: float = Field(default=1e-3, gt=0.0)
    scheme: SchemeSpec = Field(default_factory=SchemeSpec)
    spectral_interp: Interp = "spectral-shift"
    spread: float = Field(default=2.0, ge=0.0)
    widths: tuple[float, float] = (0.8, 1.2)

    @field_validator("widths")
    @classmethod
    def _ordered_widths(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not 0.0 < value[0] <= value[1]:
            raise ValueError("widths must satisfy 0 < low <= high")
        return value


class KolmogorovSpec(BaseModel):
    model_config = _STRICT

    s_frac: float = Field(gt=0.0, lt=1.0)
    times: list[float] = Field(min_length=1)
    n_x: int = Field(default=16, ge=2)
    L_x: float = Field(default=2.0 * math.pi, gt=0.0)


class PlotsSpec(BaseModel):
    model_config = _STRICT

    source_dir: str


class RunConfig(BaseModel):
    """Validated run document; which blocks are required depends on the command."""

    model_config = _STRICT

    command: Command
    cross_section: Optional[CrossSection] = None
    grid: Optional[GridSpec] = None
    solver: Optional[SolverConfig] = None
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    verify: Optional[VerifySpec] = None
    sweep: Optional[SweepSpec] = None
    compare: Optional[CompareSpec] = None
    kolmogorov: Optional[KolmogorovSpec] = None
    plots: Optional[PlotsSpec] = None
    output_dir: str = "runs/latest"
    seed: int = 42
    threads: int = Field(default=1, ge=1)
    log_level: Optional[str] = None


REQUIRED_BLOCKS: dict[str, tuple[str, ...]] = {
    "solve": ("cross_section", "grid", "solver"),
    "verify": ("cross_section", "grid"),
    "sweep": ("cross_section", "grid", "solver", "sweep"),
    "compare-ops": ("cross_section", "grid"),
    "kolmogorov": ("grid", "kolmogorov"),
    "emit-plots": ("plots",),
}


def locate_key(text: str, path: Sequence[object]) -> Optional[int]:
    """1-based line of the innermost key of path, searching each level after its parent."""
    position, line = 0, None
    for part in path:
        if not isinstance(part, str):
            continue
        match = re.compile(r'"' + re.escape(part) + r'"\s*:').search(text, position)
        if match is None:
            break
        position = match.start()
        line = text.count("\n", 0, position) + 1
    return line


def _check_blocks(cfg: RunConfig, text: str) -> None:
    for block in REQUIRED_BLOCKS[cfg.command]:
        if getattr(cfg, block) is None:
            raise ConfigError(f"block required by command {cfg.command!r} is missing", block, locate_key(text, ["command"]))
    solver = cfg.solver
    if solver is None or cfg.command != "solve":
        return
    if solver.method == "picard" and solver.eps is None and not cfg.cross_section.has_cutoff:
        raise ConfigError("picard needs a cutoff: set solver.eps or cross_section.eps_cutoff", "solver.eps", locate_key(text, ["solver"]))
    if solver.method == "strang" and solver.spatial is None:
        raise ConfigError("strang splitting needs solver.spatial", "solver.spatial", locate_key(text, ["solver"]))
    if solver.method != "strang" and solver.spatial is not None:
        raise ConfigError(f"method {solver.method!r} is spatially homogeneous", "solver.spatial", locate_key(text, ["solver", "spatial"]))


def parse_config(text: str) -> RunConfig:
    """JSON run document -> RunConfig; every failure is a ConfigError with key path and line."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", "", exc.lineno) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", "", 1)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = error["loc"]
        raise ConfigError(error["msg"], ".".join(str(part) for part in loc), locate_key(text, loc)) from exc
    _check_blocks(cfg, text)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Normal form: sorted keys, two-space indent, unset optional blocks dropped."""
    return json.dumps(cfg.model_dump(mode="json", exclude_none=True), indent=2, sort_keys=True) + "\n"
