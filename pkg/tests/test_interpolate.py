import numpy as np
import pytest

from flowassim.fem import build_space
from flowassim.interpolate import (OutsideDomainError, PointLocator, evaluate_pressure, evaluate_velocity,
                                   transfer_pressure, transfer_velocity)
from flowassim.mesh import ChannelSpec, bend_station, build_channel, truncate_at


def quad_field(x, y):
    return 1 + x - 2 * y + x * y - y ** 2, 3 * x ** 2 - y


@pytest.fixture(scope="module")
def th():
    return build_space(build_channel(ChannelSpec(length=5.0), 0.25), "P2P1")


def test_quadratic_reproduced_by_p2(th):
    U = th.interpolate_velocity(quad_field)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 5, 200), rng.uniform(-0.5, 0.5, 200)])
    got = evaluate_velocity(th, U, pts)
    ux, uy = quad_field(pts[:, 0], pts[:, 1])
    assert np.allclose(got, np.column_stack([ux, uy]), atol=1e-12)


def test_linear_pressure(th):
    P = th.interpolate_pressure(lambda x, y: 2 * x - 3 * y + 1)
    pts = np.array([[0.1, 0.1], [4.9, -0.45], [2.5, 0.0]])
    assert np.allclose(evaluate_pressure(th, P, pts), 2 * pts[:, 0] - 3 * pts[:, 1] + 1, atol=1e-13)


def test_same_mesh_transfer_is_bit_identical(th):
    U = np.random.default_rng(1).standard_normal(th.n_u)
    assert np.array_equal(transfer_velocity(th, U, th), U)
    P = np.random.default_rng(2).standard_normal(th.n_p)
    assert np.array_equal(transfer_pressure(th, P, th), P)


def test_fine_to_coarse_quadratic(th):
    fine = build_space(build_channel(ChannelSpec(length=5.0), 0.125), "P2P1")
    U = fine.interpolate_velocity(quad_field)
    assert np.allclose(transfer_velocity(fine, U, th), th.interpolate_velocity(quad_field), atol=1e-12)
    p1 = build_space(build_channel(ChannelSpec(length=5.0), 0.5), "P1P1")
    assert np.allclose(transfer_velocity(fine, U, p1), p1.interpolate_velocity(quad_field), atol=1e-12)


def test_outside_point(th):
    with pytest.raises(OutsideDomainError):
        evaluate_velocity(th, np.zeros(th.n_u), [[2.0, 0.9]])


def test_locator_cells(th):
    loc = PointLocator(th)
    cells, xi = loc.locate(th.mesh.vertices[th.mesh.triangles].mean(axis=1))
    assert np.array_equal(cells, np.arange(th.mesh.n_triangles))
    assert np.allclose(xi, 1 / 3)


def test_curved_truncated_transfer():
    spec = ChannelSpec(length=1.0, kind="curved", downstream_length=1.0)
    fine = build_space(build_channel(spec, 0.0625), "P1P1")
    work = build_space(truncate_at(build_channel(spec, 0.125), bend_station(spec, 30)), "P1P1")
    U = fine.interpolate_velocity(lambda x, y: (x + 2 * y, 1 - x))
    out = transfer_velocity(fine, U, work)
    assert np.allclose(out, work.interpolate_velocity(lambda x, y: (x + 2 * y, 1 - x)), atol=1e-12)
