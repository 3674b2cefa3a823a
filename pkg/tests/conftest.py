import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowassim.fem import StabilizationParams, assemble_linear_operators, build_space  # noqa: E402
from flowassim.mesh import ChannelSpec, bend_station, build_channel  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def small_straight():
    """5 x 1 channel at h = 0.5: 33 vertices, 40 triangles, sections at 1, 2.5 and 4."""
    return build_channel(ChannelSpec(length=5.0), 0.5, sections=[1.0, 2.5, 4.0])


@pytest.fixture(scope="session")
def small_curved():
    """Curved channel with a 90 degree bend at h = 1/4 (short legs, <= 50 triangles)."""
    spec = ChannelSpec(length=0.5, kind="curved", bend_angle_deg=90.0, bend_radius=1.0,
                       downstream_length=0.5)
    return build_channel(spec, 0.5, sections=[bend_station(spec, 45.0)])


@pytest.fixture(scope="session")
def poiseuille_th():
    """Taylor-Hood space on the 5 x 1 channel at h = 1/10 with nu = 1."""
    mesh = build_channel(ChannelSpec(length=5.0), 0.1, sections=[1.0, 2.5, 4.0])
    space = build_space(mesh, "P2P1")
    return space, assemble_linear_operators(space, 1.0)


@pytest.fixture(scope="session")
def curved_p1_small():
    """Stabilized P1 space on a truncated curved channel at h = 1/4."""
    from flowassim.mesh import truncate_at
    spec = ChannelSpec(length=1.0, kind="curved", downstream_length=1.0)
    st = bend_station(spec, 30)
    mesh = build_channel(spec, 0.25, sections=[st, bend_station(spec, 60), bend_station(spec, 90) + 0.5])
    work = truncate_at(mesh, st)
    space = build_space(work, "P1P1")
    return mesh, space, StabilizationParams(True)


def random_state(space, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal(space.n_state)


def config_dict(**tables):
    """Small straight-channel scenario as a raw dict; ``tables`` update whole tables."""
    d = {
        "schema_version": 1,
        "name": "small",
        "geometry": {"kind": "straight", "length": 5.0, "half_height": 0.5},
        "discretization": {"family": "P2P1", "h": 0.25},
        "physics": {"nu": 1.0},
        "inflow": {"peak": 1.0},
        "observations": {"sections": [{"station": 1.0}, {"station": 2.5}, {"station": 4.0}]},
        "assimilation": {"beta1": 0.5, "beta2": 1e-5, "hessian_init": "metric"},
    }
    for k, v in tables.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return d


def curved_dict(**tables):
    """Truncated curved scenario at h = 1/8 with stabilized P1 elements."""
    base = config_dict(
        geometry={"kind": "curved", "length": 1.0, "half_height": 0.5, "bend_angle_deg": 90.0,
                  "bend_radius": 1.5, "downstream_length": 1.5, "truncation": {"bend_angle": 30.0}},
        discretization={"family": "P1P1", "h": 0.125, "stabilization": True},
        inflow={"peak": 3.0},
        observations={"sections": [{"bend_angle": 60.0}, {"after_bend": 0.5}]},
    )
    for k, v in tables.items():
        base[k] = {**base[k], **v} if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return base


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request, capsys):
    """``record(n, ok, detail)`` prints one PASS/FAIL line for acceptance criterion ``n``."""

    def record(n, ok, detail):
        line = f"acceptance criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines.append((n, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
