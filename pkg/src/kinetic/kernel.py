from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Optional

import numpy as np
from loguru import logger
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from kinetic.errors import ConfigurationError, DomainError

HALF_PI = math.pi / 2.0
QUARTER_PI = math.pi / 4.0

# geometric grading toward the grazing singularity
GRADING_RATIO = 0.75
THETA_MIN = 1e-6


class CrossSection(BaseModel):
    """B(v - v_*, sigma) = Phi(|v - v_*|) b(cos theta), optionally with the cutoff b_eps."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = 0.0
    s: float = Field(gt=0.0, lt=1.0)
    K: float = Field(default=1.0, gt=0.0)
    eps_cutoff: Optional[float] = Field(default=None, gt=0.0)
    theta_max: float = HALF_PI

    @field_validator("theta_max")
    @classmethod
    def _support_bound(cls, value: float) -> float:
        for allowed in (HALF_PI, QUARTER_PI):
            if math.isclose(value, allowed, rel_tol=1e-9):
                return allowed
        raise ValueError("theta_max must be pi/2 or pi/4")

    @model_validator(mode="after")
    def _cutoff_inside_support(self) -> "CrossSection":
        if self.eps_cutoff is not None and self.eps_cutoff >= self.theta_max / 2.0:
            raise ValueError(f"eps_cutoff {self.eps_cutoff} must lie in (0, theta_max/2)")
        return self

    @property
    def has_cutoff(self) -> bool:
        return self.eps_cutoff is not None

    @property
    def singularity(self) -> Literal["mild", "critical", "strong"]:
        if self.s < 0.5:
            return "mild"
        return "critical" if self.s == 0.5 else "strong"

    @property
    def potential(self) -> Literal["soft", "maxwell", "hard"]:
        if self.gamma < 0.0:
            return "soft"
        return "maxwell" if self.gamma == 0.0 else "hard"

    @property
    def gamma_plus(self) -> float:
        return max(self.gamma, 0.0)

    def with_cutoff(self, eps: Optional[float]) -> "CrossSection":
        data = self.model_dump()
        data["eps_cutoff"] = eps
        try:
            return CrossSection(**data)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid cutoff eps={eps!r} for theta_max={self.theta_max:.6g}: {exc.errors()[0]['msg']}") from exc

    def without_cutoff(self) -> "CrossSection":
        return self.with_cutoff(None)

    def kernel(self, theta):
        """b_eps when a cutoff is configured, b otherwise."""
        if self.has_cutoff:
            return cutoff_kernel_b_eps(theta, self)
        return angular_kernel_b(theta, self)

    @property
    def signature(self) -> str:
        eps = "none" if self.eps_cutoff is None else repr(self.eps_cutoff)
        return f"g{self.gamma!r}-s{self.s!r}-K{self.K!r}-e{eps}-tm{self.theta_max:.6f}"

    def metadata(self) -> dict:
        return {
            **self.model_dump(),
            "singularity": self.singularity,
            "potential": self.potential,
        }


def _as_output(values: np.ndarray, like) -> np.ndarray | float:
    return float(values) if np.ndim(like) == 0 else values


def angular_kernel_b(theta, cs: CrossSection):
    """K theta^{-2-2s} (theta / sin theta) on (0, theta_max], zero beyond."""
    th = np.asarray(theta, dtype=float)
    if np.any(th <= 0.0):
        raise DomainError("angular kernel is defined for theta > 0 only")
    inside = th <= cs.theta_max
    safe = np.where(inside, th, cs.theta_max)
    values = cs.K * safe ** (-2.0 - 2.0 * cs.s) * safe / np.sin(safe)
    return _as_output(np.where(inside, values, 0.0), theta)


def cutoff_kernel_b_eps(theta, cs: CrossSection):
    """Plateau b(cos eps) on |theta| <= 2 eps, b(cos theta) elsewhere.

    The plateau exceeds b on (eps, 2 eps) since b is decreasing there; only
    integrability of b_eps is used downstream.
    """
    if cs.eps_cutoff is None:
        raise ConfigurationError("cutoff kernel requested without eps_cutoff")
    th = np.abs(np.asarray(theta, dtype=float))
    eps = cs.eps_cutoff
    plateau = float(angular_kernel_b(eps, cs))
    outer = angular_kernel_b(np.where(th > 2.0 * eps, th, cs.theta_max), cs)
    values = np.where(th > 2.0 * eps, outer, plateau)
    return _as_output(values, theta)


def kinetic_factor_phi(r, gamma: float):
    """Phi(r) = (1 + r^2)^{gamma/2}."""
    rr = np.asarray(r, dtype=float)
    return _as_output((1.0 + rr * rr) ** (0.5 * gamma), r)


@dataclass(frozen=True, eq=False)
class AngularQuadrature:
    """Product rule (theta_i, phi_j) on the kernel support around the collision axis.

    Weights carry the surface measure sin(theta) dtheta dphi. In dim=2 the
    azimuth collapses to the two reflections phi in {0, pi} with unit weight
    and the same sin(theta) dtheta density is kept, so the angular singularity
    has the same order in both dimensions.
    """

    theta_nodes: np.ndarray
    theta_weights: np.ndarray
    phi_nodes: np.ndarray
    phi_weights: np.ndarray
    graded: bool
    paired: bool
    dim: int
    theta_max: float
    eps_cutoff: Optional[float]
    n_theta: int
    n_phi: int
    notes: tuple[str, ...] = field(default_factory=tuple)

    @cached_property
    def nodes(self) -> np.ndarray:
        th, ph = np.meshgrid(self.theta_nodes, self.phi_nodes, indexing="ij")
        return np.column_stack([th.ravel(), ph.ravel()])

    @cached_property
    def weights(self) -> np.ndarray:
        return np.outer(self.theta_weights, self.phi_weights).ravel()

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def half_phi(self) -> int:
        return len(self.phi_nodes) // 2

    def kernel_weights(self, cs: CrossSection) -> np.ndarray:
        """b (or b_eps) at the theta nodes times the theta weights."""
        return np.asarray(cs.kernel(self.theta_nodes), dtype=float) * self.theta_weights

    def kernel_mass(self, cs: CrossSection) -> float:
        """Discrete value of the integral of b over the sphere."""
        return float(self.kernel_weights(cs).sum() * self.phi_weights.sum())

    @property
    def signature(self) -> str:
        eps = "none" if self.eps_cutoff is None else repr(self.eps_cutoff)
        mesh = "graded" if self.graded else "uniform"
        return f"aq{self.dim}-t{self.n_theta}-p{self.n_phi}-{mesh}-tm{self.theta_max:.6f}-e{eps}"


_GL_X, _GL_W = leggauss(2)


def _gauss_cells(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two Gauss-Legendre nodes per cell, weights renormalised to the exact sin measure."""
    lo, hi = np.minimum(edges[:-1], edges[1:]), np.maximum(edges[:-1], edges[1:])
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    th = mid[:, None] + half[:, None] * _GL_X[None, :]
    raw = half[:, None] * _GL_W[None, :] * np.sin(th)
    exact = np.cos(lo) - np.cos(hi)
    w = raw * (exact / raw.sum(axis=1))[:, None]
    return th.ravel(), w.ravel()


def build_angular_quadrature(cs: CrossSection, n_theta: int, n_phi: int, dim: int = 3) -> AngularQuadrature:
    """Graded (non-cutoff) or plateau-aware (cutoff) theta mesh times a uniform azimuth."""
    if n_theta < 4:
        raise ConfigurationError(f"n_theta must be >= 4, got {n_theta}")
    if n_phi < 4:
        raise ConfigurationError(f"n_phi must be >= 4, got {n_phi}")
    if dim not in (2, 3):
        raise ConfigurationError(f"dim must be 2 or 3, got {dim}")

    notes: list[str] = []
    tmax = cs.theta_max
    if cs.eps_cutoff is None:
        edges = [tmax]
        while len(edges) <= n_theta and edges[-1] * GRADING_RATIO > THETA_MIN:
            edges.append(edges[-1] * GRADING_RATIO)
        th, w = _gauss_cells(np.asarray(edges))
        # innermost cap [0, a]: one node placed so theta^{1-2s} integrates exactly
        cap = edges[-1]
        cap_node = cap * (1.0 - cs.s) ** (1.0 / (2.0 * cs.s))
        th = np.concatenate([th, [cap_node]])
        w = np.concatenate([w, [1.0 - math.cos(cap)]])
        graded = True
        notes.append(f"graded cells={len(edges) - 1} ratio={GRADING_RATIO} cap={cap:.3e}")
    else:
        two_eps = 2.0 * cs.eps_cutoff
        n_plateau = max(2, n_theta // 4)
        inner = np.linspace(0.0, two_eps, n_plateau + 1)
        outer = np.linspace(two_eps, tmax, n_theta + 1)
        th_in, w_in = _gauss_cells(inner)
        th_out, w_out = _gauss_cells(outer)
        th, w = np.concatenate([th_in, th_out]), np.concatenate([w_in, w_out])
        graded = False

    order = np.argsort(th)
    th, w = th[order], w[order]

    if dim == 3:
        phi = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
        phi_w = np.full(n_phi, 2.0 * math.pi / n_phi)
        paired = n_phi % 2 == 0
        if not paired:
            logger.warning(f"odd n_phi={n_phi}: azimuthal nodes are not reflection-paired")
            notes.append("unpaired azimuth")
    else:
        phi = np.array([0.0, math.pi])
        phi_w = np.ones(2)
        paired = True
        notes.append("dim=2 azimuth {0, pi}")

    return AngularQuadrature(
        theta_nodes=th,
        theta_weights=w,
        phi_nodes=phi,
        phi_weights=phi_w,
        graded=graded,
        paired=paired,
        dim=dim,
        theta_max=tmax,
        eps_cutoff=cs.eps_cutoff,
        n_theta=n_theta,
        n_phi=n_phi,
        notes=tuple(notes),
    )
