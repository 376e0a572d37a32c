from __future__ import annotations

import math
from typing import Any, Literal, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from kinetic.collision import CollisionScheme, entropy_dissipation, q_direct
from kinetic.errors import ConfigurationError, DivergenceError, DomainError, SweepError
from kinetic.grid import (
    ENTROPY_FLOOR,
    Distribution,
    NormSpec,
    lebesgue_weighted_norm,
    maxwellian,
    moments,
    spectral_energy,
    weighted_sobolev_norm,
)
from kinetic.kernel import CrossSection
from kinetic.solver import RunHistory, SolverConfig, picard_solve

ComparisonTag = Literal["noncutoff-limit", "cutoff-fixed", "kolmogorov-baseline"]

SMOOTHING_NOTE = "regularisation illustrated on a finite lattice; consistent with, not a proof of, smoothing"


class ConservationReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["f", "g"]
    mass_drift: float
    momentum_drift: float
    energy_drift: float
    operator_drift: dict[str, float] = Field(default_factory=dict)
    notes: list[str] = Field(default_factory=list)

    @property
    def max_drift(self) -> float:
        return max(self.mass_drift, self.momentum_drift, self.energy_drift)

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"quantity": "mass", "max_relative_drift": self.mass_drift},
            {"quantity": "momentum", "max_relative_drift": self.momentum_drift},
            {"quantity": "energy", "max_relative_drift": self.energy_drift},
        ]


def operator_invariant_drift(f: Distribution, cs: CrossSection, scheme: CollisionScheme) -> dict[str, float]:
    """Invariants of Q(f, f) before any conservative projection.

    Each entry is |sum Q phi| / sum |Q| |phi| for phi = 1, v, |v|^2, so 0 means
    exact conservation and 1 means no cancellation at all.
    """
    q = q_direct(f, f, cs, scheme.replace(conservative=False)).values.ravel()
    vel = f.grid.flat_velocities
    speed = np.sqrt(np.sum(vel * vel, axis=1))
    absq = np.abs(q)
    if not np.any(absq):
        return {"mass": 0.0, "momentum": 0.0, "energy": 0.0}
    drift = {
        "mass": abs(float(np.sum(q))) / float(np.sum(absq)),
        "momentum": float(np.linalg.norm(q @ vel)) / float(np.sum(absq * speed)),
        "energy": abs(float(np.sum(q * speed**2))) / float(np.sum(absq * speed**2)),
    }
    logger.debug(f"unprojected operator drift {drift}")
    return drift


def conservation_report(
    h: RunHistory,
    cs: Optional[CrossSection] = None,
    scheme: Optional[CollisionScheme] = None,
) -> ConservationReport:
    """Largest relative drift of mass, momentum and energy of f over the run.

    Momentum is scaled by sqrt(mass * energy) at t = 0 so a zero mean velocity
    does not blow up the ratio. With cs and scheme given the unprojected
    operator is evaluated on the first snapshot as well.
    """
    ms = h.moment_series
    mass0, energy0 = float(ms["mass"][0]), float(ms["energy"][0])
    mass_drift = float(np.max(np.abs(ms["mass"] - mass0))) / abs(mass0) if mass0 else math.inf
    energy_drift = float(np.max(np.abs(ms["energy"] - energy0))) / abs(energy0) if energy0 else math.inf
    keys = sorted(k for k in ms if k.startswith("momentum_"))
    momentum = np.stack([ms[k] for k in keys])
    scale = math.sqrt(abs(mass0 * energy0)) or 1.0
    momentum_drift = float(np.max(np.linalg.norm(momentum - momentum[:, :1], axis=0))) / scale
    notes = []
    if h.kind == "g":
        notes.append("moments of f = mu g; the kappa <v>^2 term of the transformed equation does not conserve them")
    operator: dict[str, float] = {}
    if cs is not None and scheme is not None and h.spatial is None:
        operator = operator_invariant_drift(h.f_snapshots()[0], cs, scheme)
        notes.append("operator_drift: invariants of Q(f0, f0) without conservative projection")
    return ConservationReport(
        kind=h.kind,
        mass_drift=mass_drift,
        momentum_drift=momentum_drift,
        energy_drift=energy_drift,
        operator_drift=operator,
        notes=notes,
    )


class HTheoremReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    times: list[float]
    entropy: list[float]
    dissipation: list[float]
    max_increase: float
    slack: float
    monotone: bool
    floor: float = ENTROPY_FLOOR
    cross_check: list[tuple[float, float]] = Field(default_factory=list)
    cross_check_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.monotone and self.cross_check_ok is not False

    def rows(self) -> list[dict[str, Any]]:
        rates = [math.nan, *self.dissipation]
        return [{"time": t, "H": H, "dissipation": d} for t, H, d in zip(self.times, self.entropy, rates)]


def h_theorem_report(
    h: RunHistory,
    cs: Optional[CrossSection] = None,
    scheme: Optional[CollisionScheme] = None,
    slack: float = 1e-6,
) -> HTheoremReport:
    """Entropy series, discrete dissipation -dH/dt and the monotonicity verdict.

    With cs and scheme given, -(Q(f,f), log f) is evaluated directly at the
    first, middle and last snapshot.
    """
    if h.kind != "f":
        raise ConfigurationError("the H-theorem applies to untransformed f-histories")
    H = np.asarray(h.entropy_series, dtype=float)
    rates = -np.diff(H) / np.diff(h.times)
    increase = float(np.max(np.diff(H))) if len(H) > 1 else 0.0
    allowed = slack * abs(float(H[0]))
    logger.info(f"H-theorem: max increase {increase:.3e} (slack {allowed:.3e}, floor {ENTROPY_FLOOR:g})")

    checks: list[tuple[float, float]] = []
    ok: Optional[bool] = None
    if cs is not None and scheme is not None:
        snaps = h.snapshots
        picks = sorted({0, len(snaps) // 2, len(snaps) - 1})
        for i in picks:
            f = snaps[i]
            checks.append((f.time_tag, entropy_dissipation(f, cs, scheme)))
        tolerance = 1e-8 * max(1.0, abs(float(H[0])))
        ok = all(d >= -tolerance for _, d in checks)
    return HTheoremReport(
        times=h.times.tolist(),
        entropy=H.tolist(),
        dissipation=rates.tolist(),
        max_increase=increase,
        slack=allowed,
        monotone=increase <= allowed,
        cross_check=checks,
        cross_check_ok=ok,
    )


class SmoothingReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m_list: list[float]
    l_list: list[float]
    times: list[float]
    series: dict[str, list[float]]
    fourier_tail: list[float]
    spectral_total: list[float]
    xi_c: float
    comparison_tag: ComparisonTag
    eps_tag: Optional[float] = None
    note: str = SMOOTHING_NOTE

    def tail_at(self, t: float) -> float:
        for stamp, tail in zip(self.times, self.fourier_tail):
            if math.isclose(stamp, t, abs_tol=1e-9):
                return tail
        raise DomainError(f"no snapshot at t={t}")

    def tail_monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.fourier_tail, self.fourier_tail[1:]))


def smoothing_report(
    h: RunHistory,
    m_list: Sequence[float],
    l_list: Sequence[float],
    xi_c: Optional[float] = None,
    comparison_tag: ComparisonTag = "cutoff-fixed",
) -> SmoothingReport:
    """H^m_l norms and the Fourier tail beyond xi_c on f at every snapshot."""
    cut = 0.5 * h.grid.xi_max if xi_c is None else xi_c
    fields = h.f_snapshots()
    series = {
        NormSpec(m=m, l=l).key: [weighted_sobolev_norm(f, NormSpec(m=m, l=l)) for f in fields]
        for m in m_list
        for l in l_list
    }
    return SmoothingReport(
        m_list=list(m_list),
        l_list=list(l_list),
        times=[f.time_tag for f in fields],
        series=series,
        fourier_tail=[spectral_energy(f, cut) for f in fields],
        spectral_total=[spectral_energy(f) for f in fields],
        xi_c=cut,
        comparison_tag=comparison_tag,
        eps_tag=h.eps_tag,
    )


def compare_smoothing(reports: Sequence[SmoothingReport]) -> dict[str, Any]:
    """Align several smoothing reports on the snapshot times they share."""
    if not reports:
        raise ConfigurationError("compare_smoothing needs at least one report")
    shared = [t for t in reports[0].times if all(any(math.isclose(t, u, abs_tol=1e-9) for u in r.times) for r in reports[1:])]
    return {
        "times": shared,
        "runs": [
            {"tag": r.comparison_tag, "eps": r.eps_tag, "fourier_tail": [r.tail_at(t) for t in shared]}
            for r in reports
        ],
        "xi_c": [r.xi_c for r in reports],
        "eps_ordering": eps_ordering(reports),
        "note": SMOOTHING_NOTE,
    }


def eps_ordering(reports: Sequence[SmoothingReport], rel_slack: float = 1e-12) -> bool:
    """Smaller eps gives a Fourier tail no larger than larger eps at every shared time t > 0.

    Reports without an eps tag count as the non-cutoff limit eps = 0.
    """
    if len(reports) < 2:
        return True
    ordered = sorted(reports, key=lambda r: -(r.eps_tag or 0.0))
    shared = [t for t in ordered[0].times if t > 0.0 and all(any(math.isclose(t, u, abs_tol=1e-9) for u in r.times) for r in ordered[1:])]
    for t in shared:
        tails = [r.tail_at(t) for r in ordered]
        if any(b > a * (1.0 + rel_slack) for a, b in zip(tails, tails[1:])):
            logger.warning(f"eps ordering of Fourier tails fails at t={t}: {tails}")
            return False
    return True


class SweepRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps: float
    sweeps: int
    converged: bool
    sup_norm: float
    bound: float
    bound_ok: bool
    diff_to_previous: Optional[float] = None


class SweepReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rows: list[SweepRow]
    norm_key: str
    decreasing: bool

    @property
    def all_converged(self) -> bool:
        return all(row.converged for row in self.rows)

    @property
    def passed(self) -> bool:
        return self.decreasing and self.all_converged and all(row.bound_ok for row in self.rows)


def eps_sweep(
    eps_list: Sequence[float],
    g0: Distribution,
    cfg: SolverConfig,
    cs: CrossSection,
    scheme_for: Optional[Any] = None,
) -> tuple[SweepReport, list[RunHistory]]:
    """picard_solve per cutoff, each warm-started from the previous iterate.

    Checks sup_t ||g^eps||_{H^0_l} <= 2 ||g0||_{H^0_l} for every eps and that
    successive L^inf_t L^2 differences decrease.
    """
    eps_values = [float(e) for e in eps_list]
    if not eps_values or any(b >= a for a, b in zip(eps_values, eps_values[1:])):
        raise ConfigurationError("eps_list must be nonempty and strictly decreasing")
    too_wide = [e for e in eps_values if e >= 0.5 * cs.theta_max]
    if too_wide:
        raise ConfigurationError(f"eps_list entries {too_wide} must stay below theta_max/2 = {0.5 * cs.theta_max:.6g}")
    spec = NormSpec(l=cfg.l_wt)
    bound = 2.0 * weighted_sobolev_norm(g0, spec)
    rows: list[SweepRow] = []
    histories: list[RunHistory] = []
    previous: Optional[RunHistory] = None
    for eps in eps_values:
        run_cfg = cfg.model_copy(update={"eps": eps})
        cs_eps = cs.with_cutoff(eps)
        scheme = scheme_for(cs_eps) if scheme_for is not None else None
        try:
            history = picard_solve(g0, run_cfg, cs_eps, scheme=scheme, initial_guess=previous)
        except DivergenceError as exc:
            logger.error(f"eps sweep failed at eps={eps}: {exc}")
            raise SweepError(f"picard diverged at eps={eps}", partial=rows, cause=exc) from exc
        sup = float(np.max(history.norm_series[spec.key]))
        diff = None
        if previous is not None:
            diff = max(
                lebesgue_weighted_norm(g0.with_values(a - b), NormSpec())
                for a, b in zip(history.iterate, previous.iterate)
            )
        rows.append(
            SweepRow(
                eps=eps,
                sweeps=len(history.picard_differences),
                converged=bool(history.converged),
                sup_norm=sup,
                bound=bound,
                bound_ok=sup <= bound,
                diff_to_previous=diff,
            )
        )
        logger.info(f"eps={eps}: sup norm {sup:.4e} (bound {bound:.4e}) diff {diff}")
        histories.append(history)
        previous = history
    diffs = [row.diff_to_previous for row in rows if row.diff_to_previous is not None]
    decreasing = all(b < a for a, b in zip(diffs, diffs[1:]))
    return SweepReport(rows=rows, norm_key=spec.key, decreasing=decreasing), histories


def equilibrium_residual(f: Distribution) -> float:
    """||f - M_f||_{L^2} / ||f||_{L^2}, M_f the Maxwellian with the moments of f."""
    if f.is_spatial:
        raise ConfigurationError("equilibrium residual is defined on velocity-only fields")
    mom = moments(f)
    if not mom.mass > 0.0:
        raise DomainError("equilibrium residual needs positive mass")
    u = mom.momentum / mom.mass
    T = (mom.energy / mom.mass - float(u @ u)) / f.grid.dim
    if not T > 0.0:
        raise DomainError(f"moments give a nonpositive temperature {T}")
    M = maxwellian(mom.mass, u, T, f.grid)
    diff = f.with_values(f.values - M.values)
    return lebesgue_weighted_norm(diff, NormSpec()) / lebesgue_weighted_norm(f, NormSpec())
