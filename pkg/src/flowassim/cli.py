"""Command line entry point: ``flowassim <verb> --config FILE [overrides]``.

Verbs
-----
mesh        build the extended and working meshes, write VTK and JSON dumps
solve       solve the ground-truth problem and export its fields
assimilate  recover the inlet control from the observations
sweep       run the sweep in the config's [sweep] table
compare-uq  run the assimilation and the flow-rate comparator side by side
report      print the report tables found under one or more output directories

Files go to ``<output_dir>/<name>/``.  Exit status is 0 on success; on
failure a JSON object ``{"error": category, "message": ...}`` goes to stderr
and the status is 2 (config), 3 (flow solver), 4 (optimizer), 5 (I/O) or 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments as ex
from .assimilation import write_trace_csv
from .config import ConfigError, ScenarioConfig, apply_overrides, load_config
from .flow import NewtonError
from .io import dump_mesh, read_csv, write_csv, write_mesh_vtk
from .mesh import MeshError

__all__ = ["main", "build_parser", "OptimizerError", "EXIT_CODES"]

EXIT_CODES = {"config": 2, "solver": 3, "optimizer": 4, "io": 5, "internal": 1}

log = logging.getLogger("flowassim")


class OptimizerError(RuntimeError):
    pass


class _JsonLines(logging.Formatter):
    """One JSON object per record: level, logger, message and elapsed seconds."""

    def __init__(self):
        super().__init__()
        self.t0 = time.perf_counter()

    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name,
                           "message": record.getMessage(),
                           "elapsed_s": round(time.perf_counter() - self.t0, 3)})


# flag -> dotted config path
_OVERRIDES = {
    "h": "discretization.h",
    "ground_truth_h": "discretization.ground_truth_h",
    "family": "discretization.family",
    "beta1": "assimilation.beta1",
    "beta2": "assimilation.beta2",
    "control": "assimilation.control",
    "tol": "assimilation.tol",
    "max_iter": "assimilation.max_iter",
    "hessian_init": "assimilation.hessian_init",
    "newton_tol": "newton.tol",
    "mu": "physics.mu",
    "output_dir": "output_dir",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowassim", description="Inlet-control data assimilation for channel flow.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("mesh", "build and export meshes"), ("solve", "solve the ground truth"),
                        ("assimilate", "run one assimilation"), ("sweep", "run the configured sweep"),
                        ("compare-uq", "assimilation versus the flow-rate comparator")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("--config", required=True, type=Path, help="scenario TOML file (authoritative)")
        s.add_argument("--output-dir", dest="output_dir")
        s.add_argument("--h", type=float)
        s.add_argument("--ground-truth-h", dest="ground_truth_h", type=float)
        s.add_argument("--family", choices=["P2P1", "P1P1"])
        s.add_argument("--nu", type=float)
        s.add_argument("--reynolds", type=float)
        s.add_argument("--mu", type=float)
        s.add_argument("--beta1", type=float)
        s.add_argument("--beta2", type=float)
        s.add_argument("--control", choices=["dirichlet", "neumann"])
        s.add_argument("--tol", type=float)
        s.add_argument("--max-iter", dest="max_iter", type=int)
        s.add_argument("--hessian-init", dest="hessian_init", choices=["scaled", "metric"])
        s.add_argument("--newton-tol", dest="newton_tol", type=float)
        s.add_argument("--noise-level", dest="noise_level", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
    r = sub.add_parser("report", help="print report tables")
    r.add_argument("dirs", nargs="+", type=Path)
    r.add_argument("--markdown", action="store_true")
    return p


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, **{path: getattr(args, flag) for flag, path in _OVERRIDES.items()})
    if args.nu is not None or args.reynolds is not None:
        if args.nu is not None and args.reynolds is not None:
            raise ConfigError("give at most one of --nu, --reynolds")
        phys = dataclasses.replace(cfg.physics, nu=args.nu, reynolds=args.reynolds)
        cfg = dataclasses.replace(cfg, physics=phys)
    if args.noise_level is not None or args.seed is not None:
        noise = cfg.observations.noise
        level = noise.level if args.noise_level is None else args.noise_level
        seed = noise.seed if args.seed is None else args.seed
        cfg = apply_overrides(cfg, **{"observations.noise": type(noise)(enabled=level > 0, level=level, seed=seed)})
    if args.workers is not None:
        if cfg.sweep is None:
            raise ConfigError("--workers needs a [sweep] table")
        cfg = apply_overrides(cfg, **{"sweep.workers": args.workers})
    return cfg


def _outdir(cfg: ScenarioConfig) -> Path:
    d = Path(cfg.output_dir) / cfg.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(summary: dict) -> None:
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))


def _check_optimizer(row: dict) -> None:
    if row["status"] == "line_search_failed":
        raise OptimizerError(f"{row['label']}: line search failed")


def cmd_mesh(cfg, out: Path) -> dict:
    full, work = ex.build_meshes(cfg)
    write_mesh_vtk(out / "mesh.vtk", work, title=f"{cfg.name} working mesh")
    dump_mesh(out / "mesh.json", work)
    if work is not full:
        write_mesh_vtk(out / "extended_mesh.vtk", full, title=f"{cfg.name} extended mesh")
    return {"vertices": work.n_vertices, "triangles": work.n_triangles,
            "extended_vertices": full.n_vertices, "sections": list(work.section_stations),
            "h_max": work.h_max}


def cmd_solve(cfg, out: Path) -> dict:
    truth = ex.run_ground_truth(cfg)
    ex.export_fields(out, "ground_truth", truth.space, truth.state, cfg.physics.mu)
    return {"n_state": truth.space.n_state, "newton_iterations": truth.newton_iterations,
            "nu": cfg.nu, "h": truth.h}


def _write_report(out: Path, rows: list, columns=None) -> Path:
    path = out / "report.csv"
    write_csv(path, rows, columns or ex.REPORT_COLUMNS)
    return path


def cmd_assimilate(cfg, out: Path) -> dict:
    run = ex.run_assimilation(cfg)
    rows = [run.report]
    write_trace_csv(run.result.trace, out / "trace.csv")
    ex.export_fields(out, "controlled", run.work.space, run.state, cfg.physics.mu)
    if cfg.comparator.enabled:
        rows.append(_comparator(cfg, out, run)[0].report)
    _write_report(out, rows)
    _check_optimizer(run.report)
    return {"rows": rows}


def _comparator(cfg, out: Path, run):
    q = ex.run_comparator_uQ(cfg, work=run.work)
    ex.export_fields(out, "u_Q", run.work.space, q.state, cfg.physics.mu)
    frac, wrows = ex.wss_comparison(cfg, run.work, run.state.U, q.state.U)
    write_csv(out / "wss_comparison.csv", wrows, list(wrows[0]))
    return q, frac


def cmd_compare_uq(cfg, out: Path) -> dict:
    run = ex.run_assimilation(cfg)
    write_trace_csv(run.result.trace, out / "trace.csv")
    ex.export_fields(out, "controlled", run.work.space, run.state, cfg.physics.mu)
    q, frac = _comparator(cfg, out, run)
    _write_report(out, [run.report, q.report])
    summary = {"RE_omega_controlled": run.report["RE_omega"], "RE_omega_uQ": q.report["RE_omega"],
               "RE_omega_ratio": q.report["RE_omega"] / run.report["RE_omega"],
               "wss_closer_fraction": frac}
    (out / "comparison.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _check_optimizer(run.report)
    return summary


def cmd_sweep(cfg, out: Path) -> dict:
    rep = ex.sweep(cfg)
    cols = list(ex.REPORT_COLUMNS)
    if rep.axis == "h":
        cols += ["control_error", "state_error"]
    write_csv(out / "sweep.csv", rep.rows, cols)
    (out / "sweep_summary.json").write_text(json.dumps(rep.summary, indent=1, sort_keys=True) + "\n")
    return {"axis": rep.axis, "summary": rep.summary,
            "rows": [{k: r.get(k) for k in ("label", "RE_omega_part", "iterations", "status")} for r in rep.rows]}


def cmd_report(dirs, markdown: bool) -> str:
    """Format every report.csv / sweep.csv found under ``dirs``."""
    cols = ["name", "label", "RE_omega", "RE_gamma_in", "RE_omega_part", "cost", "iterations",
            "cost_evals", "status"]
    lines = []
    for d in dirs:
        files = sorted(list(d.rglob("report.csv")) + list(d.rglob("sweep.csv")))
        if not files and not d.exists():
            raise FileNotFoundError(d)
        for f in files:
            rows = read_csv(f)
            extra = [c for c in ("control_error", "state_error") if rows and c in rows[0]]
            use = cols + extra
            table = [[_short(r.get(c, "")) for c in use] for r in rows]
            lines.append(f"{f}")
            if markdown:
                lines.append("| " + " | ".join(use) + " |")
                lines.append("|" + "---|" * len(use))
                lines += ["| " + " | ".join(t) + " |" for t in table]
            else:
                width = [max(len(c), *(len(t[i]) for t in table)) if table else len(c) for i, c in enumerate(use)]
                lines.append("  ".join(c.ljust(w) for c, w in zip(use, width)))
                lines += ["  ".join(v.ljust(w) for v, w in zip(t, width)) for t in table]
            lines.append("")
    return "\n".join(lines)


def _short(v: str) -> str:
    try:
        x = float(v)
    except ValueError:
        return v
    return v if x.is_integer() and "." not in v and "e" not in v else f"{x:.6g}"


_COMMANDS = {"mesh": cmd_mesh, "solve": cmd_solve, "assimilate": cmd_assimilate, "sweep": cmd_sweep,
             "compare-uq": cmd_compare_uq}


def _category(exc: BaseException) -> str:
    if isinstance(exc, (ConfigError, MeshError)):
        return "config"
    if isinstance(exc, NewtonError):
        return "solver"
    if isinstance(exc, OptimizerError):
        return "optimizer"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root = logging.getLogger("flowassim")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if getattr(args, "verbose", False) else logging.INFO)
    root.propagate = False
    try:
        if args.verb == "report":
            print(cmd_report(args.dirs, args.markdown))
            return 0
        cfg = _config(args)
        out = _outdir(cfg)
        fh = logging.FileHandler(out / "run.log", mode="w")
        fh.setFormatter(_JsonLines())
        root.addHandler(fh)
        t0 = time.perf_counter()
        summary = _COMMANDS[args.verb](cfg, out)
        log.info("%s finished in %.2f s", args.verb, time.perf_counter() - t0)
        _emit(summary)
        return 0
    except Exception as exc:  # noqa: BLE001 - mapped to an exit category
        cat = _category(exc)
        print(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if cat == "internal":
            log.exception("unexpected failure")
        return EXIT_CODES[cat]
    finally:
        for h in root.handlers[1:]:
            h.close()
        root.handlers[:] = []


if __name__ == "__main__":
    sys.exit(main())
