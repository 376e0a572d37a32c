from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Literal, Optional, Sequence, TypeVar, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import quad
from scipy.optimize import linprog
from scipy.special import erfc

from infra.rng import make_rng, spawn_rngs
from kinetic.collision import (
    CollisionScheme,
    dissipation_functional,
    make_scheme,
    origin_engine_sum,
    q_direct,
    trilinear_weak_form,
)
from kinetic.errors import ConfigurationError, DomainError, UnsupportedModeError
from kinetic.grid import (
    Distribution,
    NormSpec,
    VelocityGrid,
    apply_multiplier,
    bessel_derivative,
    entropy_h,
    lebesgue_weighted_norm,
    make_grid,
    weight_multiply,
    weighted_sobolev_norm,
)
from kinetic.kernel import CrossSection, angular_kernel_b

T = TypeVar("T")

C_BOUND = 1e6


class InequalityId(str, Enum):
    CANCELLATION = "cancellation_lemma"
    COERCIVITY = "coercivity"
    UPPER_BOUND = "upper_bound"
    COMMUTATOR_WEIGHT = "commutator_weight"
    WEIGHT_DIFFERENCE = "weight_difference"
    COMMUTATOR_MOLLIFIER = "commutator_mollifier"
    PDO_COMMUTATOR = "pdo_commutator"
    INTERPOLATION = "interpolation"


class EstimateReport(BaseModel):
    """One inequality checked over an ensemble; constants fitted, never clamped."""

    model_config = ConfigDict(extra="forbid")

    inequality_id: InequalityId
    orientation: Literal["le", "ge", "eq"] = "le"
    lhs: float
    rhs_factors: dict[str, float] = Field(default_factory=dict)
    fitted_constants: dict[str, float] = Field(default_factory=dict)
    ensemble_size: int = Field(ge=0)
    grid_signature: str = ""
    refinement_trace: list[tuple[float, float]] = Field(default_factory=list)
    feasible: bool
    stable: Optional[bool] = None
    notes: list[str] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.feasible and self.stable is not False


class MollifierSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    N: int = Field(ge=0)
    profile: Literal["quintic-smoothstep"] = "quintic-smoothstep"


def mollifier_profile(tau) -> np.ndarray:
    """S = 1 on [0, 1], 0 on [2, inf), quintic smoothstep in between (C^2 joints)."""
    x = np.clip(np.asarray(tau, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x * x)


# test-function ensembles


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    def sample(self, grid: VelocityGrid) -> Distribution:
        v = grid.velocities
        values = np.zeros(grid.shape)
        for w, c, s in zip(self.weights, self.centers, self.widths):
            dist_sq = np.sum((v - c.reshape((-1,) + (1,) * grid.dim)) ** 2, axis=0)
            values += w * np.exp(-dist_sq / (2.0 * s * s))
        return Distribution(grid=grid, values=values)


@dataclass(frozen=True)
class SmoothedBump:
    center: np.ndarray
    radius: float
    smoothing: float

    def sample(self, grid: VelocityGrid) -> Distribution:
        dist = np.sqrt(np.sum((grid.velocities - self.center.reshape((-1,) + (1,) * grid.dim)) ** 2, axis=0))
        return Distribution(grid=grid, values=0.5 * erfc((dist - self.radius) / (math.sqrt(2.0) * self.smoothing)))


TestFunction = Union[GaussianMixture, SmoothedBump]


def sample_test_functions(
    seed: int,
    size: int,
    dim: int,
    radius: float,
    components: int = 3,
    bump_fraction: float = 0.2,
    width_range: tuple[float, float] = (0.5, 2.0),
) -> list[TestFunction]:
    """Grid-independent ensemble: Gaussian mixtures plus smoothed indicator bumps.

    Mixture centers fall in [-radius/2, radius/2]^dim, standard deviations in width_range.
    """
    members: list[TestFunction] = []
    n_bumps = int(round(bump_fraction * size))
    for index, rng in enumerate(spawn_rngs(seed, size)):
        if index < size - n_bumps:
            members.append(
                GaussianMixture(
                    weights=rng.uniform(0.5, 1.5, components),
                    centers=rng.uniform(-radius / 2.0, radius / 2.0, (components, dim)),
                    widths=rng.uniform(width_range[0], width_range[1], components),
                )
            )
        else:
            members.append(
                SmoothedBump(
                    center=rng.uniform(-radius / 4.0, radius / 4.0, dim),
                    radius=float(rng.uniform(radius / 8.0, radius / 4.0)),
                    smoothing=float(rng.uniform(0.3, 0.6)),
                )
            )
    return members


def _map_members(fn: Callable[[T], Any], items: Sequence[T], workers: int) -> list[Any]:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _ratio_summary(ratios: list[float]) -> dict[str, float]:
    finite = [r for r in ratios if math.isfinite(r)]
    return {"max_ratio": max(finite) if finite else math.nan, "min_ratio": min(finite) if finite else math.nan}


def _as_pairs(f, g) -> list[tuple[Distribution, Distribution]]:
    if isinstance(f, Distribution) and isinstance(g, Distribution):
        return [(f, g)]
    fs = [f] * len(g) if isinstance(f, Distribution) else list(f)
    gs = [g] * len(fs) if isinstance(g, Distribution) else list(g)
    if len(fs) != len(gs):
        raise ConfigurationError("f and g ensembles differ in length")
    return list(zip(fs, gs))


def _raw(scheme: CollisionScheme) -> CollisionScheme:
    return scheme if not scheme.conservative else scheme.replace(conservative=False)


# cancellation lemma


def _bracket(theta, dim: int):
    """cos^{-d}(theta/2) - 1 without cancellation near theta = 0."""
    return np.expm1(-dim * np.log1p(-2.0 * np.sin(0.25 * np.asarray(theta)) ** 2))


def _sphere_factor(dim: int) -> float:
    return 2.0 * math.pi if dim == 3 else 2.0


def cancellation_constant_S(
    cs: CrossSection,
    dim: int = 3,
    epsabs: float = 1e-13,
    epsrel: float = 1e-12,
) -> float:
    """|S^{d-2}| int sin(theta) b [cos^{-d}(theta/2) - 1] dtheta over the kernel support.

    Uses b_eps when the cross-section carries a cutoff.
    """
    if dim not in (2, 3):
        raise ConfigurationError(f"dim must be 2 or 3, got {dim}")
    kw = dict(epsabs=epsabs, epsrel=epsrel, limit=400)
    tmax = cs.theta_max
    if cs.eps_cutoff is None:
        # sin(theta) b(theta) = K theta^{-1-2s}; the bracket over theta^2 is regular
        def regular(theta: float) -> float:
            if theta == 0.0:
                return cs.K * dim / 8.0
            return cs.K * float(_bracket(theta, dim)) / (theta * theta)

        total, _ = quad(regular, 0.0, tmax, weight="alg", wvar=(1.0 - 2.0 * cs.s, 0.0), **kw)
    else:
        two_eps = 2.0 * cs.eps_cutoff
        plateau = float(angular_kernel_b(cs.eps_cutoff, cs))
        inner, _ = quad(lambda th: math.sin(th) * plateau * float(_bracket(th, dim)), 0.0, two_eps, **kw)
        outer, _ = quad(lambda th: cs.K * th ** (-1.0 - 2.0 * cs.s) * float(_bracket(th, dim)), two_eps, tmax, **kw)
        total = inner + outer
    return _sphere_factor(dim) * total


def cancellation_lemma_check(
    F: Distribution,
    cs: CrossSection,
    scheme: Optional[CollisionScheme] = None,
    tolerance: float = 1e-3,
) -> EstimateReport:
    """sum b_eps [F(v') - F(v)] over (v, sigma) at v_* = 0 against S_eps times the mass of F."""
    if cs.gamma != 0.0:
        raise UnsupportedModeError("the cancellation identity is checked for Maxwell molecules (gamma = 0)")
    if not cs.has_cutoff:
        raise ConfigurationError("cancellation check evaluates the cutoff constant S_eps; eps_cutoff is required")
    grid = F.grid
    scheme = scheme or make_scheme(cs, grid, 32, 8, interp="cubic", conservative=False)
    lhs = origin_engine_sum(F, cs, scheme)
    s_eps = cancellation_constant_S(cs, dim=grid.dim)
    mass = float(np.sum(F.values)) * grid.cell_volume
    rhs = s_eps * mass
    scale = max(abs(rhs), abs(lhs), 1e-300)
    discrepancy = abs(lhs - rhs) / scale
    logger.info(f"cancellation check: lhs={lhs:.6e} rhs={rhs:.6e} rel={discrepancy:.2e}")
    return EstimateReport(
        inequality_id=InequalityId.CANCELLATION,
        orientation="eq",
        lhs=lhs,
        rhs_factors={"S_eps": s_eps, "mass": mass, "rhs": rhs},
        fitted_constants={"discrepancy": discrepancy},
        ensemble_size=1,
        grid_signature=grid.signature,
        feasible=discrepancy < tolerance,
        notes=["v_* fixed at the lattice origin", f"tolerance {tolerance:g}"],
        metadata={"cross_section": cs.metadata(), "scheme": scheme.metadata()},
    )


# coercivity


def _gtilde_norms(g: Distribution, cs: CrossSection) -> dict[str, float]:
    g_tilde = weight_multiply(g, -abs(cs.gamma))
    order = max(cs.gamma_plus, 2.0 - cs.gamma_plus)
    return {
        "gtilde_L1": lebesgue_weighted_norm(g_tilde, NormSpec(p=1)),
        "gtilde_L1_1": lebesgue_weighted_norm(g_tilde, NormSpec(p=1, l=1.0)),
        "gtilde_LlogL": entropy_h(g_tilde),
        "g_L1_lower_order": lebesgue_weighted_norm(g, NormSpec(p=1, l=order)),
    }


def coercivity_report(
    g: Distribution,
    f_ensemble: Sequence[Distribution],
    cs: CrossSection,
    s_norm: float,
    scheme: CollisionScheme,
    c_bound: float = C_BOUND,
) -> EstimateReport:
    """Fit LHS >= C_g A - C B over the ensemble, LHS = -(Q(g, f), f)."""
    if not f_ensemble:
        raise ConfigurationError("coercivity needs a nonempty ensemble")
    if not g.is_nonnegative() or not np.any(g.values > 0.0):
        raise DomainError("coercivity needs g >= 0, not identically zero")

    def member(f: Distribution) -> dict[str, float]:
        return {
            "lhs": -trilinear_weak_form(g, f, f, cs, scheme),
            "A": weighted_sobolev_norm(f, NormSpec(m=s_norm, l=cs.gamma / 2.0)) ** 2,
            "B": weighted_sobolev_norm(f, NormSpec(l=cs.gamma_plus / 2.0)) ** 2,
            "dissipation": dissipation_functional(g, f, cs, scheme),
        }

    rows = _map_members(member, list(f_ensemble), scheme.workers)
    lhs = np.array([r["lhs"] for r in rows])
    a = np.array([r["A"] for r in rows])
    b = np.array([r["B"] for r in rows])

    result = linprog(
        c=[-1.0, 0.0],
        A_ub=np.column_stack([a, -b]),
        b_ub=lhs,
        bounds=[(0.0, None), (0.0, c_bound)],
        method="highs",
    )
    if result.success:
        c_g, c_low = float(result.x[0]), float(result.x[1])
    else:
        c_g, c_low = 0.0, math.nan
        logger.warning(f"coercivity LP infeasible: {result.message}")
    pure = float(np.min(lhs / a))
    notes = [f"C capped at {c_bound:g}", "C_g_at_C0 is the fit with the lower-order term removed"]
    return EstimateReport(
        inequality_id=InequalityId.COERCIVITY,
        orientation="ge",
        lhs=float(lhs.min()),
        rhs_factors={"A_max": float(a.max()), "B_max": float(b.max())},
        fitted_constants={"C_g": c_g, "C": c_low, "C_g_at_C0": pure},
        ensemble_size=len(rows),
        grid_signature=g.grid.signature,
        feasible=bool(result.success and c_g > 0.0),
        notes=notes,
        metadata={
            "members": rows,
            "s_norm": s_norm,
            "g_norms": _gtilde_norms(g, cs),
            "cross_section": cs.metadata(),
            "scheme": scheme.metadata(),
        },
    )


# upper bound and commutators


def upper_bound_report(
    pairs: Sequence[tuple[Distribution, Distribution]],
    m: float,
    alpha: float,
    cs: CrossSection,
    scheme: CollisionScheme,
) -> EstimateReport:
    """max ||Q(f,g)||_{H^m_alpha} / (||f||_{L^1_{a+(gamma+2s)+}} ||g||_{H^{m+2s}_{(alpha+gamma+2s)+}})."""
    l_f = max(alpha, 0.0) + max(cs.gamma + 2.0 * cs.s, 0.0)
    l_g = max(alpha + cs.gamma + 2.0 * cs.s, 0.0)
    raw = _raw(scheme)
    notes: list[str] = []

    def member(pair: tuple[Distribution, Distribution]) -> Optional[float]:
        f, g = pair
        numerator = weighted_sobolev_norm(q_direct(f, g, cs, raw), NormSpec(m=m, l=alpha))
        if numerator == 0.0:
            return 0.0
        denominator = lebesgue_weighted_norm(f, NormSpec(p=1, l=l_f)) * weighted_sobolev_norm(
            g, NormSpec(m=m + 2.0 * cs.s, l=l_g)
        )
        return None if denominator == 0.0 else numerator / denominator

    results = _map_members(member, list(pairs), scheme.workers)
    ratios = [r for r in results if r is not None]
    skipped = len(results) - len(ratios)
    if skipped:
        notes.append(f"skipped {skipped} pairs with zero denominator")
    summary = _ratio_summary(ratios)
    grid = pairs[0][0].grid if pairs else None
    return EstimateReport(
        inequality_id=InequalityId.UPPER_BOUND,
        lhs=summary["max_ratio"] if ratios else 0.0,
        rhs_factors={"l_f": l_f, "l_g": l_g, "m": m, "alpha": alpha},
        fitted_constants=summary,
        ensemble_size=len(ratios),
        grid_signature=grid.signature if grid else "",
        feasible=bool(ratios) and all(math.isfinite(r) for r in ratios),
        notes=notes,
        metadata={"ratios": ratios, "cross_section": cs.metadata(), "scheme": raw.metadata()},
    )


def _commutator_report(
    inequality: InequalityId,
    pairs: list[tuple[Distribution, Distribution]],
    commutator: Callable[[Distribution, Distribution], Distribution],
    denominator: Callable[[Distribution, Distribution], float],
    workers: int,
    metadata: dict,
) -> tuple[EstimateReport, list[float]]:
    def member(pair: tuple[Distribution, Distribution]) -> float:
        f, g = pair
        d = commutator(f, g)
        norm = lebesgue_weighted_norm(d, NormSpec())
        if norm == 0.0:
            return 0.0
        den = denominator(f, g)
        return math.inf if den == 0.0 else norm / den

    ratios = _map_members(member, pairs, workers)
    summary = _ratio_summary(ratios)
    report = EstimateReport(
        inequality_id=inequality,
        lhs=summary["max_ratio"],
        fitted_constants=summary,
        ensemble_size=len(ratios),
        grid_signature=pairs[0][0].grid.signature,
        feasible=all(math.isfinite(r) for r in ratios),
        metadata={"ratios": ratios, **metadata},
    )
    return report, ratios


def commutator_weight_report(f, g, l: int, cs: CrossSection, scheme: CollisionScheme) -> EstimateReport:
    """||W_l Q(f,g) - Q(f, W_l g)||_{L^2} / (||f||_{L^1_{l+gamma+}} ||g||_{L^2_{l+gamma+}})."""
    if not (cs.s < 0.5 or l >= 3):
        raise ConfigurationError("weight commutator bound is checked for s < 1/2 or l >= 3")
    raw = _raw(scheme)
    order = l + cs.gamma_plus

    def commutator(f: Distribution, g: Distribution) -> Distribution:
        left = weight_multiply(q_direct(f, g, cs, raw), l)
        right = q_direct(f, weight_multiply(g, l), cs, raw)
        return left.with_values(left.values - right.values)

    def denominator(f: Distribution, g: Distribution) -> float:
        return lebesgue_weighted_norm(f, NormSpec(p=1, l=order)) * lebesgue_weighted_norm(g, NormSpec(l=order))

    report, _ = _commutator_report(
        InequalityId.COMMUTATOR_WEIGHT,
        _as_pairs(f, g),
        commutator,
        denominator,
        scheme.workers,
        {"l": l, "branch": "s<1/2" if cs.s < 0.5 else "l>=3", "cross_section": cs.metadata()},
    )
    report.rhs_factors["l"] = float(l)
    return report


def mollifier_apply(f: Distribution, spec: MollifierSpec, axis: Literal["v", "x"] = "v") -> Distribution:
    """Spectral multiplier S(2^{-2N} |xi|^2) along v or x."""
    scale = 4.0 ** (-spec.N)
    if axis == "v":
        multiplier = mollifier_profile(scale * f.grid.xi_sq)
        if np.all(multiplier == 1.0):
            return f.copy()
        return apply_multiplier(f, multiplier)
    if f.spatial is None:
        raise ConfigurationError("x mollifier needs a spatial axis")
    k = f.spatial.wavenumbers
    multiplier = mollifier_profile(scale * k * k)
    if np.all(multiplier == 1.0):
        return f.copy()
    spectrum = np.fft.fft(f.values, axis=0) * multiplier.reshape((-1,) + (1,) * f.grid.dim)
    return f.with_values(np.real(np.fft.ifft(spectrum, axis=0)))


def _growth_stable(trace: list[tuple[float, float]], tolerance: float) -> bool:
    if len(trace) < 2:
        return True
    previous, last = trace[-2][1], trace[-1][1]
    if previous == 0.0:
        return last == 0.0
    return last <= (1.0 + tolerance) * previous


def commutator_mollifier_report(f, g, N_range: Sequence[int], cs: CrossSection, scheme: CollisionScheme) -> EstimateReport:
    """max over pairs of ||S_N Q(f,g) - Q(f, S_N g)|| / (||f||_{L^1_{gamma+}} ||g||_{L^2_{gamma+}}) per N."""
    if cs.s >= 0.5:
        raise ConfigurationError("mollifier commutator bound is checked for s < 1/2")
    if not N_range:
        raise ConfigurationError("N_range must not be empty")
    raw = _raw(scheme)
    pairs = _as_pairs(f, g)
    order = cs.gamma_plus

    def denominator(f: Distribution, g: Distribution) -> float:
        return lebesgue_weighted_norm(f, NormSpec(p=1, l=order)) * lebesgue_weighted_norm(g, NormSpec(l=order))

    trace: list[tuple[float, float]] = []
    per_level: dict[str, list[float]] = {}
    for level in N_range:
        spec = MollifierSpec(N=level)

        def commutator(f: Distribution, g: Distribution, spec: MollifierSpec = spec) -> Distribution:
            left = mollifier_apply(q_direct(f, g, cs, raw), spec)
            right = q_direct(f, mollifier_apply(g, spec), cs, raw)
            return left.with_values(left.values - right.values)

        _, ratios = _commutator_report(InequalityId.COMMUTATOR_MOLLIFIER, pairs, commutator, denominator, scheme.workers, {})
        per_level[str(level)] = ratios
        trace.append((float(level), max(ratios)))

    ratios = [r for values in per_level.values() for r in values]
    summary = _ratio_summary(ratios)
    return EstimateReport(
        inequality_id=InequalityId.COMMUTATOR_MOLLIFIER,
        lhs=summary["max_ratio"],
        fitted_constants=summary,
        ensemble_size=len(pairs),
        grid_signature=pairs[0][0].grid.signature,
        refinement_trace=trace,
        feasible=all(math.isfinite(r) for r in ratios),
        stable=_growth_stable(trace, 0.1),
        notes=["refinement_trace runs over the dyadic level N", "profile quintic-smoothstep"],
        metadata={"ratios_by_level": per_level, "cross_section": cs.metadata()},
    )


def pdo_commutator_report(f, g, lam: float, cs: CrossSection, scheme: CollisionScheme, N: int = 4) -> EstimateReport:
    """Commutator of Lambda^lambda with Q(f, .) against the lower-order-corrected norm of g."""
    if cs.s >= 0.5:
        raise ConfigurationError("pseudo-differential commutator bound is checked for s < 1/2")
    raw = _raw(scheme)
    order = cs.gamma_plus

    def commutator(f: Distribution, g: Distribution) -> Distribution:
        left = bessel_derivative(q_direct(f, g, cs, raw), lam)
        right = q_direct(f, bessel_derivative(g, lam), cs, raw)
        return left.with_values(left.values - right.values)

    def denominator(f: Distribution, g: Distribution) -> float:
        top = lebesgue_weighted_norm(bessel_derivative(g, lam), NormSpec(l=order))
        low = weighted_sobolev_norm(g, NormSpec(m=lam - N, l=order))
        return lebesgue_weighted_norm(f, NormSpec(p=1, l=order)) * (top + low)

    report, _ = _commutator_report(
        InequalityId.PDO_COMMUTATOR,
        _as_pairs(f, g),
        commutator,
        denominator,
        scheme.workers,
        {"lambda": lam, "N": N, "symbol": "<xi>^lambda", "cross_section": cs.metadata()},
    )
    report.rhs_factors.update({"lambda": lam, "N": float(N)})
    return report


def interpolation_report(f_ensemble: Sequence[Distribution], k: float, p: float, delta: float) -> EstimateReport:
    """max ||f||^2_{H^k_p} / (||f||_{H^{k-delta}_{2p}} ||f||_{H^{k+delta}})."""
    if delta <= 0.0 or p < 0.0:
        raise DomainError("interpolation needs delta > 0 and p >= 0")
    if not f_ensemble:
        raise ConfigurationError("interpolation needs a nonempty ensemble")
    ratios = []
    for f in f_ensemble:
        top = weighted_sobolev_norm(f, NormSpec(m=k, l=p)) ** 2
        den = weighted_sobolev_norm(f, NormSpec(m=k - delta, l=2.0 * p)) * weighted_sobolev_norm(f, NormSpec(m=k + delta))
        ratios.append(0.0 if top == 0.0 else top / den)
    summary = _ratio_summary(ratios)
    return EstimateReport(
        inequality_id=InequalityId.INTERPOLATION,
        lhs=summary["max_ratio"],
        rhs_factors={"k": k, "p": p, "delta": delta},
        fitted_constants=summary,
        ensemble_size=len(ratios),
        grid_signature=f_ensemble[0].grid.signature,
        feasible=all(math.isfinite(r) for r in ratios),
        metadata={"ratios": ratios},
    )


# weight lemma


def _weight(v: np.ndarray, l: float) -> np.ndarray:
    return (1.0 + np.sum(v * v, axis=0)) ** (0.5 * l)


def _weight_ratios(rng: np.random.Generator, count: int, l: int, radius: float, dim: int) -> np.ndarray:
    """(3, kept) ratios: sum bound, product bound, refined bound."""
    v = rng.uniform(-radius, radius, (dim, count))
    vs = rng.uniform(-radius, radius, (dim, count))
    sigma = rng.standard_normal((dim, count))
    sigma /= np.linalg.norm(sigma, axis=0)
    u = v - vs
    speed = np.linalg.norm(u, axis=0)
    keep = speed > 0.0
    k = u / np.where(keep, speed, 1.0)
    cos_t = np.sum(k * sigma, axis=0)
    # restrict to theta <= pi/2 by reflecting across the plane orthogonal to k
    sigma = np.where(cos_t < 0.0, sigma - 2.0 * cos_t * k, sigma)
    cos_t = np.abs(cos_t)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    keep &= theta >= 1e-12
    center = 0.5 * (v + vs)
    vp = center + 0.5 * speed * sigma
    vsp = center - 0.5 * speed * sigma
    half_sin = np.sin(0.5 * theta)
    diff = np.abs(_weight(v, l) - _weight(vp, l))
    wp, wsp = _weight(vp, l), _weight(vsp, l)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_sum = diff / (half_sin * (wp + wsp))
        r_prod = diff / (half_sin * wp * wsp)
        if l >= 1:
            refined = wp + _weight(vp, l - 1) * _weight(vsp, 1) + half_sin ** (l - 1) * wsp
            r_ref = diff / (half_sin * refined)
        else:
            r_ref = np.zeros_like(diff)
    return np.stack([r_sum, r_prod, r_ref])[:, keep]


def weight_difference_check(
    l: int,
    n_samples: int,
    radius: float = 8.0,
    dim: int = 3,
    seed: int = 42,
    batch: int = 100_000,
    tolerance: float = 0.2,
) -> EstimateReport:
    """Sampled maxima of |W_l - W_l'| against sin(theta/2) times the three weight bounds.

    The second half of the samples extends the first, so the doubled maximum is
    never below the single one; stability compares the two.
    """
    if l < 0 or n_samples < 1:
        raise DomainError("weight check needs l >= 0 and n_samples >= 1")
    rng = make_rng(seed)
    maxima = np.zeros(3)
    checkpoints: list[np.ndarray] = []
    drawn = 0
    for target in (n_samples, 2 * n_samples):
        while drawn < target:
            count = min(batch, target - drawn)
            ratios = _weight_ratios(rng, count, l, radius, dim)
            if ratios.shape[1]:
                maxima = np.maximum(maxima, ratios.max(axis=1))
            drawn += count
        checkpoints.append(maxima.copy())
    single, double = checkpoints
    with np.errstate(divide="ignore", invalid="ignore"):
        change = np.where(double > 0.0, (double - single) / double, 0.0)
    stable = bool(np.all(change < tolerance))
    names = ("C_sum", "C_product", "C_refined")
    return EstimateReport(
        inequality_id=InequalityId.WEIGHT_DIFFERENCE,
        lhs=float(double[1]),
        rhs_factors={"l": float(l), "radius": radius},
        fitted_constants={name: float(value) for name, value in zip(names, double)},
        ensemble_size=2 * n_samples,
        grid_signature=f"box{dim}d-R{radius!r}",
        refinement_trace=[(float(n_samples), float(single[1])), (float(2 * n_samples), float(double[1]))],
        feasible=bool(np.all(np.isfinite(double))),
        stable=stable,
        notes=["theta restricted to [0, pi/2]", "samples with theta < 1e-12 skipped"],
        metadata={"single": dict(zip(names, map(float, single))), "relative_change": dict(zip(names, map(float, change)))},
    )


# refinement


def refine(
    build: Callable[[VelocityGrid], EstimateReport],
    resolutions: Sequence[int],
    radius: float,
    dim: int,
    key: str = "max_ratio",
    tolerance: float = 0.3,
    growth_only: bool = False,
) -> EstimateReport:
    """Rebuild a report on successive grids and flag the fitted constant's stability."""
    trace: list[tuple[float, float]] = []
    report: Optional[EstimateReport] = None
    for n in resolutions:
        report = build(make_grid(n, radius, dim))
        trace.append((float(n), float(report.fitted_constants[key])))
        logger.debug(f"refine {report.inequality_id.value} n={n} {key}={trace[-1][1]:.6e}")
    if report is None:
        raise ConfigurationError("refine needs at least one resolution")
    stable = True
    for (_, previous), (_, current) in zip(trace, trace[1:]):
        if growth_only:
            stable &= current <= (1.0 + tolerance) * previous if previous > 0.0 else current <= 0.0
        else:
            scale = max(abs(previous), abs(current))
            stable &= scale == 0.0 or abs(current - previous) / scale < tolerance
    if not stable:
        logger.warning(f"{report.inequality_id.value}: {key} not refinement-stable {trace}")
    return report.model_copy(update={"refinement_trace": trace, "stable": bool(stable)})
