"""Acceptance suite: one test per criterion, driven through the CLI and checked-in configs.

Each test records a PASS/FAIL line (also repeated in the terminal summary)
before asserting.  Thresholds are the stated ones; runtimes are measured on
this machine and checked against the stated budgets.
"""
import json
import time

import numpy as np
import pytest
import scipy.sparse as sp

import oracle
from conftest import CONFIGS
from flowassim import experiments as ex
from flowassim.assimilation import AssimilationProblem, CostWeights
from flowassim.cli import main
from flowassim.config import load_config
from flowassim.fem import (StabilizationParams, assemble_convection, assemble_domain_mass, assemble_inlet_mass,
                           assemble_inlet_regularizer, assemble_linear_operators, assemble_neumann_operator,
                           assemble_observation_mass, build_space)
from flowassim.flow import NewtonSettings
from flowassim.interpolate import transfer_pressure
from flowassim.io import read_csv
from flowassim.mesh import ChannelSpec, bend_station, build_channel
from flowassim.sparse import lu_solve

pytestmark = pytest.mark.slow


def cli(capsys, verb, config, out, *extra):
    """Run one CLI verb; return (exit code, parsed stdout summary, elapsed seconds)."""
    t0 = time.perf_counter()
    code = main([verb, "--config", str(CONFIGS / config), "--output-dir", str(out), *map(str, extra)])
    elapsed = time.perf_counter() - t0
    text, err = capsys.readouterr()
    assert code == 0, err
    return code, json.loads(text), elapsed


def _f(row, key):
    return float(row[key])


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# 1 -----------------------------------------------------------------------

def test_criterion_01_poiseuille_exactness(acceptance, capsys, outdir):
    cfg = load_config(CONFIGS / "poiseuille.toml")
    t0 = time.perf_counter()
    _, summary, _ = cli(capsys, "solve", "poiseuille.toml", outdir)
    truth = ex.run_ground_truth(cfg)
    elapsed = time.perf_counter() - t0
    sp_ = truth.space
    exact = sp_.interpolate_velocity(lambda x, y: (1 - 4 * y ** 2, 0 * x))
    err_u = float(np.abs(truth.state.U - exact).max())
    v = sp_.mesh.vertices
    slope, icpt = np.polyfit(v[:, 0], truth.state.P, 1)
    lin = float(np.abs(truth.state.P - (slope * v[:, 0] + icpt)).max())
    nu = cfg.nu
    ok = err_u <= 1e-9 and abs(slope + 8 * nu) <= 1e-9 and lin <= 1e-9 and elapsed < 10
    acceptance(1, ok, f"max nodal error {err_u:.2e}, pressure slope {slope:.10f} (expect {-8 * nu}), "
                      f"linearity defect {lin:.1e}, {elapsed:.1f} s")
    assert ok


# 2 -----------------------------------------------------------------------

def test_criterion_02_neumann_reproduction(acceptance, capsys, outdir):
    _, summary, elapsed = cli(capsys, "assimilate", "straight_neumann.toml", outdir)
    row = summary["rows"][0]
    re_part = float(row["RE_omega_part"])
    ok = re_part <= 5e-3 and row["status"] == "converged" and elapsed < 300
    acceptance(2, ok, f"Neumann control, RE_Omega_part {re_part:.5f} (<= 0.005), {row['iterations']} iterations, "
                      f"status {row['status']}, {elapsed:.0f} s")
    assert ok


# 3, 4 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def ladders(outdir):
    out = {}
    for cfg in ("curved_p1", "curved_p2"):
        t0 = time.perf_counter()
        assert main(["sweep", "--config", str(CONFIGS / f"{cfg}.toml"), "--output-dir", str(outdir)]) == 0
        out[cfg] = (read_csv(outdir / cfg / "sweep.csv"), time.perf_counter() - t0)
    return out


def test_criterion_03_beta_monotonicity(acceptance, ladders, capsys):
    capsys.readouterr()
    details, ok = [], True
    for cfg, (rows, _) in ladders.items():
        re = [_f(r, "RE_omega_part") for r in rows]
        mono = all(r["status"] == "converged" for r in rows) and all(b < a for a, b in zip(re, re[1:]))
        ok &= mono
        details.append(f"{cfg[-2:].upper()} " + " > ".join(f"{x:.5f}" for x in re) + f" ({'strict' if mono else 'NOT strict'})")
    p1 = {float(r["beta2"]): _f(r, "RE_omega_part") for r in ladders["curved_p1"][0]}
    at = p1[2.5e-5]
    factor = max(at / 0.00118, 0.00118 / at)
    total = sum(t for _, t in ladders.values())
    ok &= factor <= 3 and total < 1800
    acceptance(3, ok, "; ".join(details) + f"; P1 at 2.5e-5: {at:.5f} (factor {factor:.2f} of 0.00118); "
                                          f"{total:.0f} s")
    assert ok


def test_criterion_04_control_kind_comparison(acceptance, ladders, capsys):
    capsys.readouterr()
    p1 = {float(r["beta2"]): r for r in ladders["curved_p1"][0]}
    p2 = {float(r["beta2"]): r for r in ladders["curved_p2"][0]}
    b1 = load_config(CONFIGS / "curved_p1.toml").assimilation.beta2
    b2 = load_config(CONFIGS / "curved_p2.toml").assimilation.beta2
    r1, r2 = _f(p1[b1], "RE_omega"), _f(p2[b2], "RE_omega")
    ratio = r2 / r1
    ok = ratio >= 2
    acceptance(4, ok, f"RE_Omega velocity control {r1:.5f} (beta2 {b1:g}) vs pressure control {r2:.5f} "
                      f"(beta2 {b2:g}): ratio {ratio:.2f} (>= 2)")
    assert ok


# 5 -----------------------------------------------------------------------

def test_criterion_05_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for name in ("curved_p1", "curved_p2"):
        cfg = load_config(CONFIGS / f"{name}.toml")
        truth = ex.run_ground_truth(cfg)
        work = ex.working_problem(cfg, truth)
        obs = ex.extract_observations(truth, work)
        a = cfg.assimilation
        p = AssimilationProblem(work.space, work.ops, obs, CostWeights(a.beta1, a.beta2), a.control,
                                NewtonSettings(tol=1e-12))
        rng = np.random.default_rng(2024)
        if a.control == "dirichlet":
            G_true = work.U_true[work.space.control_dofs]
            points = [np.zeros(p.n_control), 0.5 * G_true, G_true + rng.standard_normal(p.n_control)]
        else:
            # tractions around the true inlet pressure level
            Pw = transfer_pressure(truth.space, truth.state.P, work.space)
            inl = work.space.inlet_nodes
            g0 = float(Pw[inl[inl < work.space.n_p]].mean())
            points = [np.zeros(p.n_control), np.full(p.n_control, g0),
                      g0 * (1 + 0.1 * rng.standard_normal(p.n_control))]
        w = 0.0
        for G in points:
            F, st = p.evaluate(G)
            g = p.gradient(G, st)
            for _ in range(10):
                d = rng.standard_normal(p.n_control)
                d /= np.linalg.norm(d)
                # step relative to the control scale; roundoff dominates below about 1e-5
                eps = 1e-4 * max(1.0, np.linalg.norm(G) / np.sqrt(len(G)))
                fd = (p.evaluate(G + eps * d)[0] - p.evaluate(G - eps * d)[0]) / (2 * eps)
                w = max(w, abs(fd - g @ d) / abs(g @ d))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and elapsed < 120
    acceptance(5, ok, "worst central-difference mismatch over 3 points x 10 directions: "
                      + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (<= 1e-5), {elapsed:.0f} s")
    assert ok


# 6 -----------------------------------------------------------------------

def test_criterion_06_mesh_convergence(acceptance, capsys, outdir):
    _, summary, elapsed = cli(capsys, "sweep", "curved_mesh.toml", outdir)
    s = summary["summary"]
    rows = read_csv(outdir / "curved_mesh" / "sweep.csv")
    ctrl = [r["control_error"] for r in rows if r["control_error"]]
    state = [r["state_error"] for r in rows if r["state_error"]]
    ok = (s.get("control_error_strictly_decreasing") and s.get("state_error_strictly_decreasing")
          and s.get("state_order", 0) >= 1 and len(ctrl) == 4 and elapsed < 1800)
    acceptance(6, bool(ok), f"control errors {', '.join(f'{float(x):.2e}' for x in ctrl)}; state errors "
                            f"{', '.join(f'{float(x):.2e}' for x in state)}; state order {s.get('state_order', 0):.2f} "
                            f"(>= 1), control order {s.get('control_order', 0):.2f}, {elapsed:.0f} s")
    assert ok


# 7 -----------------------------------------------------------------------

def test_criterion_07_reynolds_robustness(acceptance, capsys, outdir):
    _, summary, elapsed = cli(capsys, "sweep", "curved_reynolds.toml", outdir)
    rows = read_csv(outdir / "curved_reynolds" / "sweep.csv")
    conv = all(r["status"] == "converged" for r in rows)
    re = [_f(r, "RE_omega_part") for r in rows] if conv else [1.0]
    spread = max(re) / min(re)
    its = [r["iterations"] for r in rows]
    ok = conv and len(rows) == 5 and spread <= 10 and elapsed < 2700
    res = ", ".join(f"{float(r['reynolds']):.4g}" for r in rows)
    acceptance(7, ok, f"Re {res}: all converged={conv}, "
                      f"RE_Omega_part {', '.join(f'{x:.5f}' for x in re)} (spread {spread:.2f} <= 10), "
                      f"iterations {', '.join(its)}, {elapsed:.0f} s")
    assert ok


# 8 -----------------------------------------------------------------------

SEEDS = range(1, 9)


def test_criterion_08_noise_robustness(acceptance, capsys, outdir):
    t0 = time.perf_counter()
    _, clean, _ = cli(capsys, "assimilate", "curved_noise.toml", outdir / "clean", "--noise-level", "0")
    base = float(clean["rows"][0]["RE_omega_part"])
    noisy = {}
    for s in SEEDS:
        _, res, _ = cli(capsys, "assimilate", "curved_noise.toml", outdir / f"seed{s}", "--seed", s)
        noisy[s] = float(res["rows"][0]["RE_omega_part"])
    # determinism under a fixed seed: byte-identical report on a rerun
    cli(capsys, "assimilate", "curved_noise.toml", outdir / "seed1_again", "--seed", 1)
    same = ((outdir / "seed1" / "curved_noise" / "report.csv").read_bytes()
            == (outdir / "seed1_again" / "curved_noise" / "report.csv").read_bytes())
    elapsed = time.perf_counter() - t0
    worst = max(noisy.values()) / base
    ok = worst <= 2 and same and elapsed < 900
    acceptance(8, ok, f"noiseless RE_Omega_part {base:.5f}; noisy (seeds {SEEDS.start}-{SEEDS.stop - 1}) "
                      + ", ".join(f"{v:.5f}" for v in noisy.values())
                      + f"; worst ratio {worst:.2f} (<= 2); rerun byte-identical={same}; {elapsed:.0f} s")
    assert ok


# 9 -----------------------------------------------------------------------

def test_criterion_09_comparator_gain(acceptance, capsys, outdir):
    _, s, elapsed = cli(capsys, "compare-uq", "curved_comparator.toml", outdir)
    ratio, frac = s["RE_omega_ratio"], s["wss_closer_fraction"]
    ok = ratio >= 2 and frac >= 0.8 and elapsed < 900
    acceptance(9, ok, f"RE_Omega controlled {s['RE_omega_controlled']:.5f} vs u_Q {s['RE_omega_uQ']:.5f}: "
                      f"ratio {ratio:.2f} (>= 2); WSS closer on {100 * frac:.1f}% of wall edges (>= 80%); "
                      f"{elapsed:.0f} s")
    assert ok


# 10 ----------------------------------------------------------------------

def test_criterion_10_oracle_equivalence(acceptance):
    t0 = time.perf_counter()
    spec = ChannelSpec(length=0.5, kind="curved", bend_angle_deg=90.0, bend_radius=1.0, downstream_length=0.5)
    meshes = [build_channel(ChannelSpec(length=5.0), 0.5, sections=[1.0, 2.5, 4.0]),
              build_channel(spec, 0.5, sections=[bend_station(spec, 45.0)])]
    worst = 0.0

    def cmp(A, D):
        A = A.toarray() if sp.issparse(A) else np.asarray(A)
        return float(np.abs(A - D).max() / max(1.0, np.abs(D).max()))

    rng = np.random.default_rng(10)
    n_mats = 0
    for mesh in meshes:
        assert mesh.n_triangles <= 50
        for fam in ("P2P1", "P1P1"):
            s = build_space(mesh, fam)
            U = rng.standard_normal(s.n_u)
            ops = assemble_linear_operators(s, 0.3, StabilizationParams(True), U_ref=U)
            Qs, Bs, B1 = oracle.stabilization_blocks(s, 0.3, U)
            N, Nc = assemble_convection(s, U, 0.3, StabilizationParams(True))
            No, Nco = oracle.convection(s, U, 0.3, True)
            keys = list(s.section_edge_nodes)
            pairs = [(ops.Q, oracle.viscous(s, 0.3)), (ops.B, oracle.divergence(s)), (ops.Qs, Qs), (ops.Bs, Bs),
                     (ops.B1, B1), (N, No), (Nc, Nco), (assemble_domain_mass(s), oracle.domain_mass(s)),
                     (assemble_observation_mass(s), oracle.observation_mass(s, keys)),
                     (assemble_inlet_mass(s), oracle.inlet_mass(s)),
                     (assemble_inlet_regularizer(s), oracle.inlet_regularizer(s)),
                     (assemble_inlet_regularizer(s, "neumann"), oracle.inlet_regularizer(s, "neumann")),
                     (assemble_neumann_operator(s), oracle.neumann_operator(s))]
            for A, D in pairs:
                worst = max(worst, cmp(A, D))
                n_mats += 1
    lu_worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 21))
        D = rng.standard_normal((n, n)) + n * np.eye(n)
        b = rng.standard_normal(n)
        xo = oracle.dense_solve(D, b)
        lu_worst = max(lu_worst, float(np.abs(lu_solve(sp.csr_matrix(D), b) - xo).max() / max(1, np.abs(xo).max())))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and lu_worst <= 1e-10 and elapsed < 60
    acceptance(10, ok, f"{n_mats} assembled matrices vs dense oracle: worst relative deviation {worst:.1e} "
                       f"(<= 1e-12); lu_solve vs dense elimination on 50 systems (n <= 20): {lu_worst:.1e} "
                       f"(<= 1e-10); {elapsed:.1f} s")
    assert ok
