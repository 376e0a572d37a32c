from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from loguru import logger

from cli.config import CompareSpec, RunConfig, SchemeSpec
from kinetic import storage
from kinetic.collision import (
    CollisionScheme,
    cutoff_section,
    make_scheme,
    q_direct,
    q_spectral_maxwell,
    scheme_from_config,
)
from kinetic.diagnostics import (
    SmoothingReport,
    SweepReport,
    compare_smoothing,
    conservation_report,
    eps_ordering,
    eps_sweep,
    equilibrium_residual,
    h_theorem_report,
    smoothing_report,
)
from kinetic.estimates import (
    EstimateReport,
    InequalityId,
    cancellation_lemma_check,
    coercivity_report,
    commutator_mollifier_report,
    commutator_weight_report,
    interpolation_report,
    pdo_commutator_report,
    refine,
    sample_test_functions,
    upper_bound_report,
    weight_difference_check,
)
from kinetic.grid import Distribution, NormSpec, SpatialLattice, VelocityGrid, lebesgue_weighted_norm, make_grid, maxwellian, weighted_sobolev_norm
from kinetic.kernel import CrossSection
from kinetic.solver import (
    RunHistory,
    kolmogorov_history,
    picard_solve,
    rk4_solve,
    strang_solve,
    transform_to_g,
)


@dataclass
class CommandResult:
    """What a command produced: pass/fail per asserted property, files written, signatures."""

    checks: dict[str, bool] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    signatures: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def record(self, out: Path, paths) -> None:
        for path in paths if isinstance(paths, (list, tuple)) else [paths]:
            self.artifacts.append(Path(path).relative_to(out).as_posix())


def _scheme(spec: SchemeSpec, cs: CrossSection, grid: VelocityGrid, threads: int, **options) -> CollisionScheme:
    params = dict(mode=spec.mode, interp=spec.interp, vstar_stride=spec.vstar_stride, workers=threads)
    params.update(options)
    return make_scheme(cs, grid, spec.n_theta, spec.n_phi, **params)


def _write_report(out: Path, name: str, report) -> Path:
    path = out / "reports" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


# solve


def _contracts_by_half(history: RunHistory) -> bool:
    factors = history.picard_contraction
    return bool(min(factors) <= 0.5) if factors else bool(history.converged)


def picard_checks(history: RunHistory, g0: Distribution, l_wt: float) -> dict[str, bool]:
    """Convergence, contraction below 1/2, the 2 ||g0|| bound and the sign of every iterate."""
    spec = NormSpec(l=l_wt)
    bound = 2.0 * weighted_sobolev_norm(g0, spec)
    return {
        "picard_converged": bool(history.converged),
        "picard_contraction_half": _contracts_by_half(history),
        "uniform_bound": bool(np.max(history.norm_series[spec.key]) <= bound),
        "nonnegative": all(u.is_nonnegative() for u in history.snapshots),
    }


def sweep_checks(report: SweepReport, histories: Sequence[RunHistory], smoothing: Sequence[SmoothingReport]) -> dict[str, bool]:
    return {
        "all_converged": report.all_converged,
        "picard_contraction_half": all(_contracts_by_half(h) for h in histories),
        "uniform_bound": all(row.bound_ok for row in report.rows),
        "cauchy_decrease": report.decreasing,
        "smoothing_eps_ordering": eps_ordering(smoothing),
    }


def run_solve(cfg: RunConfig, out: Path) -> CommandResult:
    grid = cfg.grid.build()
    solver = cfg.solver
    spatial = solver.spatial.lattice() if solver.spatial is not None else None
    cs_eps = cutoff_section(cfg.cross_section, solver)
    f0 = cfg.initial.build(grid, cfg.seed, spatial)
    result = CommandResult(signatures={"grid": grid.signature, "cross_section": cs_eps.signature})
    diag = cfg.diagnostics

    if solver.method == "picard":
        scheme = scheme_from_config(solver, cs_eps, grid).replace(workers=cfg.threads)
        g0 = transform_to_g(f0, 0.0, solver)
        history = picard_solve(g0, solver, cs_eps, scheme)
        result.checks.update(picard_checks(history, g0, solver.l_wt))
    else:
        scheme = make_scheme(
            cs_eps, grid, solver.n_theta, solver.n_phi, interp=solver.interp, vstar_stride=solver.vstar_stride, workers=cfg.threads
        )
        solve: Callable[..., RunHistory] = rk4_solve if solver.method == "rk4" else strang_solve
        history = solve(f0, solver, cs_eps, scheme)
    result.signatures["quadrature"] = scheme.quad.signature
    result.record(out, history.save(out / "history"))

    conservation = conservation_report(history, cs_eps, scheme)
    if conservation.operator_drift:
        result.notes.append(f"unprojected operator drift {conservation.operator_drift}")
    result.record(out, _write_report(out, "conservation", conservation))
    if history.kind == "f":
        result.checks["conservation"] = conservation.max_drift < diag.conservation_tol
        cross = (cs_eps, scheme) if diag.entropy_cross_check and not history.spatial else (None, None)
        h_report = h_theorem_report(history, *cross)
        result.record(out, _write_report(out, "h_theorem", h_report))
        result.checks["h_theorem"] = h_report.passed
    if history.spatial is None:
        residuals = [equilibrium_residual(f) for f in history.f_snapshots()]
        path = storage.write_series(out / "equilibrium.csv", history.snapshot_times, {"residual": residuals})
        result.record(out, path)
    smoothing = smoothing_report(history, diag.m_list, diag.l_list, diag.xi_c)
    result.record(out, _write_report(out, "smoothing", smoothing))
    return result


# verify


def _ensemble_builder(cfg: RunConfig) -> Callable[[VelocityGrid], list]:
    vs = cfg.verify
    members = sample_test_functions(cfg.seed, vs.ensemble_size, cfg.grid.dim, cfg.grid.radius)
    return lambda grid: [member.sample(grid) for member in members]


def _rotated_pairs(ensemble: list) -> list[tuple]:
    return list(zip(ensemble, ensemble[1:] + ensemble[:1]))


def run_verify(cfg: RunConfig, out: Path) -> CommandResult:
    vs = cfg.verify
    cs = cfg.cross_section
    dim, radius = cfg.grid.dim, cfg.grid.radius
    ensemble = _ensemble_builder(cfg)
    result = CommandResult(signatures={"cross_section": cs.signature, "grid": make_grid(max(vs.resolutions), radius, dim).signature})

    def scheme_on(grid: VelocityGrid, section: CrossSection = cs) -> CollisionScheme:
        return _scheme(vs.scheme, section, grid, cfg.threads, mode="direct", conservative=False)

    def over_grids(build: Callable[[VelocityGrid], EstimateReport], key: str = "max_ratio", growth: bool = False) -> EstimateReport:
        tolerance = 0.1 if growth else vs.tolerance
        return refine(build, vs.resolutions, radius, dim, key=key, tolerance=tolerance, growth_only=growth)

    reports: dict[str, EstimateReport] = {}
    for check in vs.checks:
        if check == InequalityId.CANCELLATION:
            section = CrossSection(gamma=0.0, s=cs.s, K=cs.K, eps_cutoff=vs.cancellation_eps, theta_max=cs.theta_max)
            grid = make_grid(max(vs.resolutions), radius, dim)
            F = maxwellian(1.0, [0.0], 1.0, grid)
            reports[check.value] = cancellation_lemma_check(F, section, scheme_on(grid, section))
        elif check == InequalityId.COERCIVITY:
            s_norm = cs.s if vs.s_norm is None else vs.s_norm
            reports[check.value] = over_grids(
                lambda grid: coercivity_report(maxwellian(1.0, [0.0], 1.0, grid), ensemble(grid), cs, s_norm, scheme_on(grid)),
                key="C_g",
            )
        elif check == InequalityId.UPPER_BOUND:
            reports[check.value] = over_grids(
                lambda grid: upper_bound_report(_rotated_pairs(ensemble(grid)), vs.m, vs.alpha, cs, scheme_on(grid)), growth=True
            )
        elif check == InequalityId.COMMUTATOR_WEIGHT:
            for l in vs.l_values:
                if cs.s >= 0.5 and l < 3:
                    result.notes.append(f"commutator_weight l={l} skipped: needs s < 1/2 or l >= 3")
                    continue

                def build(grid: VelocityGrid, l: int = l) -> EstimateReport:
                    members = ensemble(grid)
                    return commutator_weight_report(members, members[1:] + members[:1], l, cs, scheme_on(grid))

                reports[f"{check.value}_l{l}"] = over_grids(build, growth=True)
        elif check == InequalityId.WEIGHT_DIFFERENCE:
            for l in vs.l_values:
                reports[f"{check.value}_l{l}"] = weight_difference_check(l, vs.n_samples, radius, dim, cfg.seed)
        elif check in (InequalityId.COMMUTATOR_MOLLIFIER, InequalityId.PDO_COMMUTATOR):
            if cs.s >= 0.5:
                result.notes.append(f"{check.value} skipped: checked for s < 1/2 only")
                continue
            if check == InequalityId.COMMUTATOR_MOLLIFIER:
                grid = make_grid(max(vs.resolutions), radius, dim)
                members = ensemble(grid)
                reports[check.value] = commutator_mollifier_report(
                    members, members[1:] + members[:1], vs.N_range, cs, scheme_on(grid)
                )
            else:

                def build(grid: VelocityGrid) -> EstimateReport:
                    members = ensemble(grid)
                    return pdo_commutator_report(members, members[1:] + members[:1], vs.lam, cs, scheme_on(grid))

                reports[check.value] = over_grids(build, growth=True)
        elif check == InequalityId.INTERPOLATION:
            reports[check.value] = over_grids(
                lambda grid: interpolation_report(ensemble(grid), vs.interp_k, vs.interp_p, vs.interp_delta)
            )

    for name, report in reports.items():
        result.record(out, _write_report(out, name, report))
        result.checks[name] = report.passed
        logger.info(f"{name}: feasible={report.feasible} stable={report.stable} constants={report.fitted_constants}")
    return result


# sweep


def run_sweep(cfg: RunConfig, out: Path) -> CommandResult:
    grid = cfg.grid.build()
    solver = cfg.solver
    f0 = cfg.initial.build(grid, cfg.seed)
    g0 = transform_to_g(f0, 0.0, solver)

    def scheme_for(cs_eps: CrossSection) -> CollisionScheme:
        run_cfg = solver.model_copy(update={"eps": cs_eps.eps_cutoff})
        return scheme_from_config(run_cfg, cs_eps, grid).replace(workers=cfg.threads)

    report, histories = eps_sweep(cfg.sweep.eps_list, g0, solver, cfg.cross_section, scheme_for)
    result = CommandResult(signatures={"grid": grid.signature, "cross_section": cfg.cross_section.signature})
    rows = [
        [row.eps, row.sweeps, int(row.converged), row.sup_norm, row.bound, int(row.bound_ok), np.nan if row.diff_to_previous is None else row.diff_to_previous]
        for row in report.rows
    ]
    header = ["eps", "sweeps", "converged", "sup_norm", "bound", "bound_ok", "diff_to_previous"]
    result.record(out, storage.write_csv(out / "sweep.csv", header, rows))
    for history in histories:
        result.record(out, history.save(out / "histories" / f"eps_{history.eps_tag!r}"))
    smoothing = [smoothing_report(h, cfg.diagnostics.m_list, cfg.diagnostics.l_list, cfg.diagnostics.xi_c) for h in histories]
    result.record(out, storage.write_json(out / "reports" / "smoothing_comparison.json", compare_smoothing(smoothing)))
    result.checks.update(sweep_checks(report, histories, smoothing))
    return result


# compare-ops


def run_compare_ops(cfg: RunConfig, out: Path) -> CommandResult:
    spec = cfg.compare or CompareSpec()
    cs = cfg.cross_section
    grid = cfg.grid.build()
    direct = _scheme(spec.scheme, cs, grid, cfg.threads, mode="direct", conservative=False)
    spectral = _scheme(spec.scheme, cs, grid, cfg.threads, mode="spectral-maxwell", interp=spec.spectral_interp, conservative=False)
    ensemble = sample_test_functions(cfg.seed, 2 * spec.pairs, grid.dim, spec.spread, bump_fraction=0.0, width_range=spec.widths)
    members = [m.sample(grid) for m in ensemble]
    rows = []
    for index in range(spec.pairs):
        g, f = members[2 * index], members[2 * index + 1]
        a = q_direct(g, f, cs, direct)
        b = q_spectral_maxwell(g, f, cs, spectral)
        diff = lebesgue_weighted_norm(a.with_values(a.values - b.values), NormSpec())
        rows.append([index, diff / lebesgue_weighted_norm(b, NormSpec())])
        logger.info(f"pair {index}: direct vs spectral relative L2 {rows[-1][1]:.3e}")
    result = CommandResult(signatures={"grid": grid.signature, "cross_section": cs.signature, "quadrature": direct.quad.signature})
    result.record(out, storage.write_csv(out / "compare.csv", ["pair", "relative_l2"], rows))
    result.checks["operator_agreement"] = max(r[1] for r in rows) < spec.tolerance
    return result


# kolmogorov


def run_kolmogorov(cfg: RunConfig, out: Path) -> CommandResult:
    spec = cfg.kolmogorov
    grid = cfg.grid.build()
    spatial = SpatialLattice(n_x=spec.n_x, length=spec.L_x)
    f0 = cfg.initial.build(grid, cfg.seed, spatial)
    times = sorted({0.0, *spec.times})
    history = kolmogorov_history(f0, spec.s_frac, times)
    report = smoothing_report(history, cfg.diagnostics.m_list, cfg.diagnostics.l_list, cfg.diagnostics.xi_c, "kolmogorov-baseline")
    result = CommandResult(signatures={"grid": grid.signature})
    result.record(out, history.save(out / "history"))
    result.record(out, _write_report(out, "smoothing", report))
    result.checks["tail_monotone"] = report.tail_monotone()
    return result


# emit-plots


def run_emit_plots(cfg: RunConfig, out: Path) -> CommandResult:
    """x,y plot-data files from a previous run's history directory."""
    source = Path(cfg.plots.source_dir)
    history = RunHistory.load(source / "history")
    plots = out / "plots"
    result = CommandResult(signatures={"grid": history.grid.signature})
    for key, series in history.norm_series.items():
        result.record(out, storage.write_csv(plots / f"norm_{key}.csv", ["time", key], zip(history.times.tolist(), series.tolist())))
    result.record(out, storage.write_csv(plots / "entropy.csv", ["time", "H"], zip(history.times.tolist(), history.entropy_series.tolist())))
    for index, f in enumerate(history.f_snapshots()):
        result.record(out, storage.export_slice_csv(plots / f"slice_{index:04d}.csv", f))
    return result


HANDLERS: dict[str, Callable[[RunConfig, Path], CommandResult]] = {
    "solve": run_solve,
    "verify": run_verify,
    "sweep": run_sweep,
    "compare-ops": run_compare_ops,
    "kolmogorov": run_kolmogorov,
    "emit-plots": run_emit_plots,
}


def execute(cfg: RunConfig, out: Path) -> CommandResult:
    logger.info(f"running command {cfg.command!r} into {out}")
    return HANDLERS[cfg.command](cfg, out)


def summary_rows(result: CommandResult) -> list[dict[str, Any]]:
    return [{"check": name, "passed": ok} for name, ok in sorted(result.checks.items())]
