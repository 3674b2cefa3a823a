"""Scenario pipeline: ground truth, truncation, observations, assimilation, sweeps.

A run goes through the same steps for every experiment:

1. solve the extended-domain problem with the configured inflow (the
   ground truth), optionally on a finer mesh than the working one;
2. cut the working mesh at the truncation station, so the working inlet
   sits where the true velocity profile is unknown;
3. read the truth on the observation sections, optionally adding seeded
   Gaussian noise;
4. recover the inlet control and compare the result with the truth.

Reports hold only deterministic quantities; wall-clock timing goes to the
run log instead.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assimilation import (AssimilationProblem, CostWeights, ObservationSet,
                           OptimizationResult, relative_error, sqp_minimize)
from .config import ConfigError, NoiseConfig, ScenarioConfig, apply_overrides
from .fem import (FeSpace, StabilizationParams, assemble_inlet_mass, assemble_linear_operators,
                  build_space, compute_wss)
from .flow import DirichletData, FlowState, NewtonError, NewtonSettings, continuation_in_reynolds, solve_newton
from .interpolate import transfer_velocity
from .io import write_csv, write_vtk
from .mesh import BoundaryTag, Mesh, build_channel, truncate_at

__all__ = [
    "REPORT_COLUMNS",
    "GroundTruth",
    "WorkingProblem",
    "RunResult",
    "SweepReport",
    "build_meshes",
    "stabilization",
    "run_ground_truth",
    "working_problem",
    "extract_observations",
    "run_assimilation",
    "run_comparator_uQ",
    "sweep",
    "export_fields",
    "noise_sigma",
]

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["name", "label", "family", "control", "h", "n_state", "nu", "reynolds", "beta1",
                  "beta2", "sections", "noise_level", "RE_omega", "RE_gamma_in", "RE_omega_part",
                  "cost", "iterations", "cost_evals", "grad_norm", "status"]


@dataclass(eq=False)
class GroundTruth:
    """Extended-domain solution and the mesh it lives on."""

    space: FeSpace
    state: FlowState
    h: float
    newton_iterations: int


@dataclass(eq=False)
class WorkingProblem:
    """Truncated working mesh with its operators and the truth transferred onto it."""

    space: FeSpace
    ops: object
    U_true: np.ndarray
    sections: tuple


@dataclass(eq=False)
class RunResult:
    report: dict
    work: WorkingProblem
    result: OptimizationResult | None = None
    state: FlowState | None = None


@dataclass
class SweepReport:
    """One row per sweep point (failures included) plus axis-level summary values."""

    axis: str
    rows: list
    summary: dict = field(default_factory=dict)


def stabilization(cfg: ScenarioConfig) -> StabilizationParams:
    d = cfg.discretization
    return StabilizationParams(enabled=d.stabilization, pressure_scale=d.pressure_scale)


def _stations(cfg: ScenarioConfig) -> list:
    spec = cfg.channel
    out = cfg.section_stations()
    if spec.truncation_x is not None:
        out = [spec.truncation_x] + out
    return out


def build_meshes(cfg: ScenarioConfig, h: float | None = None):
    """Extended mesh and working (truncated) mesh at size ``h`` (default: working h)."""
    h = cfg.discretization.h if h is None else h
    spec = cfg.channel
    full = build_channel(spec, h, _stations(cfg))
    work = full if spec.truncation_x is None else truncate_at(full, spec.truncation_x)
    return full, work


def _inflow_values(cfg: ScenarioConfig, space: FeSpace, peak: float) -> np.ndarray:
    """Parabolic profile normal to the inlet with the given peak, on the control dofs."""
    nodes = space.control_nodes
    H = cfg.geometry.half_height
    s = space.inlet_coordinate(nodes)
    prof = peak * (1 - (s / H) ** 2)
    d = space.inlet_direction()
    return np.concatenate([prof * d[0], prof * d[1]])


def _newton(cfg: ScenarioConfig) -> NewtonSettings:
    return NewtonSettings(tol=cfg.newton.tol, max_iter=cfg.newton.max_iter)


def _ops(cfg: ScenarioConfig, space: FeSpace, nu: float | None = None):
    return assemble_linear_operators(space, cfg.nu if nu is None else nu, stabilization(cfg),
                                     convection=cfg.discretization.convection)


def run_ground_truth(cfg: ScenarioConfig) -> GroundTruth:
    """Solve the extended-domain flow with the configured parabolic inflow.

    Falls back to continuation in viscosity (halving from a value 32 times
    larger) when the direct Newton solve fails.
    """
    full, _ = build_meshes(cfg, cfg.discretization.truth_h)
    space = build_space(full, cfg.discretization.family)
    ops = _ops(cfg, space)
    peak = cfg.inflow.peak_speed(cfg.geometry.half_height)
    bc = DirichletData.velocity_control(space, _inflow_values(cfg, space, peak))
    settings = _newton(cfg)
    try:
        state, trace = solve_newton(space, ops, bc, settings)
        its = len(trace) - 1
    except NewtonError as exc:
        log.info("ground truth: direct solve failed (%s), continuing in viscosity", exc.kind)
        nus = cfg.nu * 2.0 ** np.arange(5, -1, -1)
        state, traces = continuation_in_reynolds(space, ops, bc, settings, nus)
        its = sum(len(t) - 1 for t in traces)
    return GroundTruth(space=space, state=state, h=cfg.discretization.truth_h, newton_iterations=its)


def working_problem(cfg: ScenarioConfig, truth: GroundTruth, h: float | None = None) -> WorkingProblem:
    _, work = build_meshes(cfg, h)
    space = build_space(work, cfg.discretization.family)
    U = transfer_velocity(truth.space, truth.state.U, space)
    return WorkingProblem(space=space, ops=_ops(cfg, space), U_true=U,
                          sections=tuple(sorted(work.section_edges)))


def noise_sigma(truth: GroundTruth, level: float) -> float:
    """``level * U0 / 3`` with ``U0`` the largest inlet speed of the ground truth."""
    sp_ = truth.space
    V = sp_.velocity_at_nodes(truth.state.U)[sp_.inlet_nodes]
    U0 = float(np.hypot(V[:, 0], V[:, 1]).max())
    return level * U0 / 3.0


def extract_observations(truth: GroundTruth, work: WorkingProblem, sections=None,
                         noise: NoiseConfig | None = None) -> ObservationSet:
    """Truth on the observation sections of the working mesh, plus optional noise.

    Noise is i.i.d. normal with standard deviation :func:`noise_sigma`,
    drawn from a Philox generator keyed by the configured seed, one draw per
    observed velocity dof in dof order.
    """
    sections = work.sections if sections is None else tuple(sections)
    missing = [k for k in sections if k not in work.space.section_edge_nodes]
    if not sections or missing:
        raise ConfigError(f"observation sections {missing or '()'} not on the working mesh")
    obs = ObservationSet.from_field(work.space, work.U_true, sections)
    if noise is not None and noise.enabled and noise.level > 0:
        rng = np.random.Generator(np.random.Philox(noise.seed))
        sigma = noise_sigma(truth, noise.level)
        obs = dataclasses.replace(obs, targets=obs.targets + sigma * rng.standard_normal(len(obs.targets)))
    return obs


def _reynolds(cfg: ScenarioConfig) -> float:
    mean = 2.0 / 3.0 * cfg.inflow.peak_speed(cfg.geometry.half_height)
    return mean * 2 * cfg.geometry.half_height / cfg.nu


def _errors(work: WorkingProblem, U, sections) -> dict:
    """The three relative errors; NaN where the truth vanishes on the region."""
    sp_ = work.space
    out = {}
    for key, region in (("RE_omega", "omega"), ("RE_gamma_in", "gamma_in"), ("RE_omega_part", "omega_part")):
        try:
            out[key] = relative_error(sp_, U, work.U_true, region, sections=sections)
        except ZeroDivisionError:
            out[key] = float("nan")
    return out


def _base_row(cfg: ScenarioConfig, work: WorkingProblem, label: str, control: str, sections) -> dict:
    a = cfg.assimilation
    return {"name": cfg.name, "label": label, "family": cfg.discretization.family, "control": control,
            "h": cfg.discretization.h,
            "n_state": work.space.n_state, "nu": cfg.nu, "reynolds": _reynolds(cfg),
            "beta1": a.beta1, "beta2": a.beta2, "sections": " ".join(str(s) for s in sections),
            "noise_level": cfg.observations.noise.level if cfg.observations.noise.enabled else 0.0}


def run_assimilation(cfg: ScenarioConfig, truth: GroundTruth | None = None,
                     work: WorkingProblem | None = None, obs: ObservationSet | None = None,
                     G0=None, label: str = "controlled") -> RunResult:
    """Recover the inlet control from the observations and score it against the truth."""
    t0 = time.perf_counter()
    truth = run_ground_truth(cfg) if truth is None else truth
    work = working_problem(cfg, truth) if work is None else work
    obs = extract_observations(truth, work, noise=cfg.observations.noise) if obs is None else obs
    a = cfg.assimilation
    problem = AssimilationProblem(work.space, work.ops, obs, CostWeights(a.beta1, a.beta2),
                                  a.control, _newton(cfg))
    res = sqp_minimize(problem, G0, tol=a.tol, max_iter=a.max_iter, hessian_init=a.hessian_init)
    row = _base_row(cfg, work, label, a.control, obs.sections)
    row.update(_errors(work, res.state.U, obs.sections))
    row.update(cost=res.cost, iterations=res.trace.iterations, cost_evals=problem.n_evals,
               grad_norm=res.grad_norm, status=res.trace.status)
    log.info("assimilation %s: %s after %d iterations (%.1f s)", cfg.name, res.trace.status,
             res.trace.iterations, time.perf_counter() - t0)
    return RunResult(report=row, work=work, result=res, state=res.state)


def flow_rate(space: FeSpace, U) -> float:
    """Flux of ``U`` through the inlet, counted positive into the domain."""
    d = space.inlet_direction()
    V = space.velocity_at_nodes(U)[space.inlet_nodes]
    return float(np.sum(assemble_inlet_mass(space, "scalar") @ (V @ d)))


def run_comparator_uQ(cfg: ScenarioConfig, truth: GroundTruth | None = None,
                      work: WorkingProblem | None = None, sections=None) -> RunResult:
    """Flow-rate comparator: a parabolic inlet profile carrying the true flux.

    Only the working problem is needed; the truth is solved when it is not given.
    """
    if work is None:
        work = working_problem(cfg, run_ground_truth(cfg) if truth is None else truth)
    sp_ = work.space
    Q = flow_rate(sp_, work.U_true)
    unit = _inflow_values(cfg, sp_, 1.0)
    Ug = np.zeros(sp_.n_u)
    Ug[sp_.control_dofs] = unit
    q1 = flow_rate(sp_, Ug)
    G = unit * (Q / q1)
    state, trace = solve_newton(sp_, work.ops, DirichletData.velocity_control(sp_, G), _newton(cfg))
    sections = work.sections if sections is None else tuple(sections)
    row = _base_row(cfg, work, "u_Q", "flow_rate", sections)
    row.update(_errors(work, state.U, sections))
    row.update(cost="", iterations=len(trace) - 1, cost_evals="", grad_norm="", status="solved")
    row["beta1"] = row["beta2"] = ""
    return RunResult(report=row, work=work, state=state)


def wall_stations(mesh: Mesh) -> np.ndarray:
    """Centerline station of each wall-edge midpoint (in the order of the wall edges)."""
    e = mesh.edges_with_tag(BoundaryTag.WALL)
    n = len(mesh.offsets)
    return 0.5 * (mesh.columns[e[:, 0] // n] + mesh.columns[e[:, 1] // n])


def wss_comparison(cfg: ScenarioConfig, work: WorkingProblem, U_ctrl, U_q) -> tuple:
    """Per-wall-edge WSS relative errors of both fields and the fraction of
    edges (beyond the inlet exclusion) where the controlled field is closer."""
    mu = cfg.physics.mu
    sp_ = work.space
    w_ref = compute_wss(sp_, work.U_true, mu)
    err_c = np.abs(compute_wss(sp_, U_ctrl, mu) - w_ref) / np.abs(w_ref)
    err_q = np.abs(compute_wss(sp_, U_q, mu) - w_ref) / np.abs(w_ref)
    s = wall_stations(sp_.mesh)
    keep = s - sp_.mesh.columns[0] >= cfg.comparator.inlet_exclusion
    frac = float(np.mean(err_c[keep] < err_q[keep])) if keep.any() else float("nan")
    rows = [{"edge": i, "station": float(s[i]), "wss_true": float(w_ref[i]), "rel_err_controlled":
             float(err_c[i]), "rel_err_uQ": float(err_q[i]), "compared": bool(keep[i])}
            for i in range(len(s))]
    return frac, rows


def _variant(cfg: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    if axis == "beta2":
        return apply_overrides(cfg, **{"assimilation.beta2": float(value)})
    if axis == "reynolds":
        phys = dataclasses.replace(cfg.physics, nu=None, reynolds=float(value))
        return dataclasses.replace(cfg, physics=phys)
    if axis == "h":
        return apply_overrides(cfg, **{"discretization.h": float(value)})
    return cfg


def _point_label(axis, value) -> str:
    if isinstance(value, tuple):
        return "sections=" + "+".join(str(v) for v in value)
    return f"{axis}={value:g}"


def _failed_row(cfg, axis, value, exc) -> dict:
    row = {c: "" for c in REPORT_COLUMNS}
    row.update(name=cfg.name, label=_point_label(axis, value), status=f"failed: {type(exc).__name__}: {exc}")
    return row


def _independent_point(args):
    cfg, axis, value = args
    try:
        if axis == "sections":
            truth = run_ground_truth(cfg)
            work = working_problem(cfg, truth)
            obs = extract_observations(truth, work, value, cfg.observations.noise)
            return run_assimilation(cfg, truth, work, obs, label=_point_label(axis, value)).report
        var = _variant(cfg, axis, value)
        return run_assimilation(var, label=_point_label(axis, value)).report
    except (NewtonError, ValueError, ArithmeticError) as exc:
        log.warning("sweep point %s failed: %s", _point_label(axis, value), exc)
        return _failed_row(cfg, axis, value, exc)


def _beta2_ladder(cfg, values) -> SweepReport:
    """Every point starts from the zero control; truth and observations are shared."""
    truth = run_ground_truth(cfg)
    work = working_problem(cfg, truth)
    obs = extract_observations(truth, work, noise=cfg.observations.noise)
    rows = []
    for b in values:
        var = _variant(cfg, "beta2", b)
        try:
            rows.append(run_assimilation(var, truth, work, obs, label=_point_label("beta2", b)).report)
        except (NewtonError, ValueError, ArithmeticError) as exc:
            rows.append(_failed_row(cfg, "beta2", b, exc))
    ok = [r["RE_omega_part"] for r in rows if not str(r["status"]).startswith("failed")]
    strictly = len(ok) == len(rows) and all(b < a for a, b in zip(ok, ok[1:]))
    return SweepReport("beta2", rows, {"RE_omega_part_strictly_decreasing": strictly})


def _mesh_ladder(cfg, values) -> SweepReport:
    """Optimize on each mesh, warm-starting from the previous optimum, then
    compare every level with the optimum on the reference mesh."""
    ref_h = cfg.sweep.reference_h
    if ref_h is None:
        raise ConfigError("an h sweep needs sweep.reference_h")
    levels = sorted({float(v) for v in values} | {ref_h}, reverse=True)
    runs, prev = {}, None
    for h in levels:
        var = _variant(cfg, "h", h)
        try:
            truth = run_ground_truth(var)
            work = working_problem(var, truth)
            G0 = None if prev is None else transfer_velocity(
                prev.work.space, prev.state.U, work.space, nodes=work.space.control_nodes)
            run = run_assimilation(var, truth, work, G0=G0, label=_point_label("h", h))
            runs[h] = prev = run
        except (NewtonError, ValueError, ArithmeticError) as exc:
            runs[h] = _failed_row(cfg, "h", h, exc)
    ref = runs[ref_h]
    rows, hs, ctrl, state = [], [], [], []
    for h in levels:
        run = runs[h]
        if isinstance(run, dict):
            rows.append(dict(run, control_error="", state_error=""))
            continue
        row = dict(run.report)
        if h != ref_h and not isinstance(ref, dict):
            sp_ = run.work.space
            Uref = transfer_velocity(ref.work.space, ref.state.U, sp_)
            row["control_error"] = relative_error(sp_, run.state.U, Uref, "gamma_in")
            row["state_error"] = relative_error(sp_, run.state.U, Uref, "omega")
            hs.append(h)
            ctrl.append(row["control_error"])
            state.append(row["state_error"])
        else:
            row["control_error"] = row["state_error"] = ""
        rows.append(row)
    summary = {"reference_h": ref_h}
    if len(hs) >= 2:
        summary["state_order"] = float(np.polyfit(np.log(hs), np.log(state), 1)[0])
        summary["control_order"] = float(np.polyfit(np.log(hs), np.log(ctrl), 1)[0])
        # hs is in decreasing order, so errors must decrease along the list
        summary["control_error_strictly_decreasing"] = all(b < a for a, b in zip(ctrl, ctrl[1:]))
        summary["state_error_strictly_decreasing"] = all(b < a for a, b in zip(state, state[1:]))
    return SweepReport("h", rows, summary)


def sweep(cfg: ScenarioConfig) -> SweepReport:
    """Run the sweep described by ``cfg.sweep``.

    The beta2 ladder shares one ground truth and runs its points in order
    from the zero control; the h ladder is chained (each level warm-starts
    from the previous optimum).  Reynolds and section-subset points are
    independent and go through a pool of ``sweep.workers`` processes.
    A failing point yields a row whose status starts with ``failed``.
    """
    if cfg.sweep is None:
        raise ConfigError("config has no [sweep] table")
    axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    if not values:
        raise ConfigError("sweep.values is empty")
    if axis == "sections":
        if not all(isinstance(v, tuple) for v in values):
            raise ConfigError("a sections sweep takes lists of section indices")
    elif any(isinstance(v, tuple) for v in values):
        raise ConfigError(f"a {axis} sweep takes numbers")
    if axis == "beta2":
        return _beta2_ladder(cfg, values)
    if axis == "h":
        return _mesh_ladder(cfg, values)
    jobs = [(cfg, axis, v) for v in values]
    workers = min(cfg.sweep.workers, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_independent_point, jobs))
    else:
        rows = [_independent_point(j) for j in jobs]
    ok = [r for r in rows if not str(r["status"]).startswith("failed")]
    summary = {"points": len(rows), "failed": len(rows) - len(ok)}
    if ok:
        re_part = [r["RE_omega_part"] for r in ok]
        summary["RE_omega_part_spread"] = float(max(re_part) / min(re_part))
    return SweepReport(axis, rows, summary)


def export_fields(directory, stem: str, space: FeSpace, state: FlowState, mu: float = 1.0) -> list:
    """Write ``<stem>.vtk`` (velocity, pressure, wall shear stress) and
    ``<stem>_wss.csv``; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    wss = compute_wss(space, state.U, mu)
    vtk = directory / f"{stem}.vtk"
    write_vtk(vtk, space, state.U, state.P, wss=wss, title=stem)
    s = wall_stations(space.mesh)
    csv_path = directory / f"{stem}_wss.csv"
    write_csv(csv_path, [{"edge": i, "station": float(s[i]), "wss": float(w)} for i, w in enumerate(wss)],
              ["edge", "station", "wss"])
    return [vtk, csv_path]
