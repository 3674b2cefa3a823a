import numpy as np
import pytest

import oracle
from conftest import random_state
from flowassim.fem import (EDGE_RULE, TRI_RULE, StabilizationParams, assemble_convection,
                           assemble_domain_mass, assemble_inlet_mass, assemble_inlet_regularizer,
                           assemble_linear_operators, assemble_neumann_operator, assemble_observation_mass,
                           build_space, compute_wss, stabilization_delta)
from flowassim.mesh import ChannelSpec, bend_station, build_channel

TOL = 1e-12


def _close(A, D):
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
    scale = max(1.0, np.abs(D).max())
    return np.abs(A - D).max() <= TOL * scale


def _meshes():
    straight = build_channel(ChannelSpec(length=5.0), 0.5, sections=[1.0, 2.5, 4.0])
    spec = ChannelSpec(length=0.5, kind="curved", bend_angle_deg=90.0, bend_radius=1.0, downstream_length=0.5)
    curved = build_channel(spec, 0.5, sections=[bend_station(spec, 45.0)])
    return {"straight": straight, "curved": curved}


MESHES = _meshes()
CASES = [(m, f) for m in MESHES for f in ("P2P1", "P1P1")]


@pytest.fixture(scope="module", params=CASES, ids=[f"{m}-{f}" for m, f in CASES])
def space(request):
    m, f = request.param
    assert MESHES[m].n_triangles <= 50
    return build_space(MESHES[m], f)


def test_quadrature_exact_to_degree_five():
    xr, wr = oracle.duffy_rule(8)
    x, w = TRI_RULE
    for i in range(6):
        for j in range(6 - i):
            assert abs(w @ (x[:, 0] ** i * x[:, 1] ** j) - wr @ (xr[:, 0] ** i * xr[:, 1] ** j)) < 1e-15
    t, we = EDGE_RULE
    for k in range(6):
        assert abs(we @ t ** k - 1 / (k + 1)) < 1e-15


def test_viscous_matches_oracle(space):
    ops = assemble_linear_operators(space, 0.7)
    assert _close(ops.Q, oracle.viscous(space, 0.7))


def test_divergence_matches_oracle(space):
    ops = assemble_linear_operators(space, 1.0)
    assert _close(ops.B, oracle.divergence(space))


def test_domain_mass_matches_oracle(space):
    assert _close(assemble_domain_mass(space), oracle.domain_mass(space))


@pytest.mark.parametrize("with_velocity", [False, True])
def test_stabilization_blocks_match_oracle(space, with_velocity):
    nu = 0.3
    U = random_state(space, 1)[: space.n_u] if with_velocity else None
    ops = assemble_linear_operators(space, nu, StabilizationParams(True, pressure_scale=0.5), U_ref=U)
    Qs, Bs, B1 = oracle.stabilization_blocks(space, nu, U, pressure_scale=0.5)
    assert _close(ops.Qs, Qs)
    assert _close(ops.Bs, Bs)
    assert _close(ops.B1, B1)


@pytest.mark.parametrize("stabilized", [False, True])
def test_convection_matches_oracle(space, stabilized):
    U = random_state(space, 2)[: space.n_u]
    N, Nc = assemble_convection(space, U, 0.2, StabilizationParams(stabilized))
    No, Nco = oracle.convection(space, U, 0.2, stabilized)
    assert _close(N, No)
    assert _close(Nc, Nco)


def test_convection_product_is_galerkin_term(space):
    U = random_state(space, 3)[: space.n_u]
    N, _ = assemble_convection(space, U, 1.0)
    # N(U) U equals the Galerkin convection part of the oracle residual
    x = np.concatenate([U, np.zeros(space.n_p)])
    r_on = oracle.residual(space, x, 1.0, convection_on=True)
    r_off = oracle.residual(space, x, 1.0, convection_on=False)
    assert np.allclose((N @ U), (r_on - r_off)[: space.n_u], atol=1e-12)


def test_boundary_operators_match_oracle(space):
    keys = list(space.section_edge_nodes)
    assert _close(assemble_observation_mass(space), oracle.observation_mass(space, keys))
    assert _close(assemble_inlet_mass(space), oracle.inlet_mass(space))
    assert _close(assemble_inlet_regularizer(space), oracle.inlet_regularizer(space))
    assert _close(assemble_inlet_regularizer(space, "neumann"), oracle.inlet_regularizer(space, "neumann"))
    assert _close(assemble_neumann_operator(space), oracle.neumann_operator(space))


def test_symmetry_and_definiteness(space):
    ops = assemble_linear_operators(space, 1.0, StabilizationParams(True))
    for A in (ops.Q, ops.B1, ops.A_reg, assemble_domain_mass(space), assemble_observation_mass(space)):
        assert abs(A - A.T).max() < 1e-14
    assert np.linalg.eigvalsh(ops.A_reg.toarray()).min() > 0


def test_mass_integrates_constants(space):
    one = np.zeros(space.n_u)
    one[: space.n_nodes] = 1.0
    assert abs(one @ assemble_domain_mass(space) @ one - space.mesh.area()) < 1e-12
    Mo = assemble_observation_mass(space)
    assert abs(one @ Mo @ one - len(space.section_edge_nodes) * 1.0) < 1e-12


def test_neumann_operator_total_is_inlet_normal(space):
    # sum over columns of N_op applied to g = 1: the integral of n . phi over the inlet
    N = assemble_neumann_operator(space)
    load = N @ np.ones(N.shape[1])
    n_in = space.inlet_direction()
    fx, fy = load[: space.n_nodes].sum(), load[space.n_nodes:].sum()
    assert np.allclose([fx, fy], -n_in * 1.0, atol=1e-12)


def test_observation_mass_unknown_section(space):
    with pytest.raises(KeyError):
        assemble_observation_mass(space, [99])


def test_delta_formula(space):
    U = random_state(space, 4)[: space.n_u]
    d, _ = stabilization_delta(space, U, 0.5, StabilizationParams(True))
    for e in range(0, space.mesh.n_triangles, 7):
        assert abs(d[e] - oracle.delta(space, e, U, 0.5)) < 1e-14 * d[e]
    d0, dd0 = stabilization_delta(space, U, 0.5, StabilizationParams(False))
    assert not d0.any() and not dd0.any()


def test_delta_derivative(space):
    U = random_state(space, 5)[: space.n_u]
    stab = StabilizationParams(True)
    _, dd = stabilization_delta(space, U, 0.5, stab)
    dU = random_state(space, 6)[: space.n_u]
    eps = 1e-6
    dp, _ = stabilization_delta(space, U + eps * dU, 0.5, stab)
    dm, _ = stabilization_delta(space, U - eps * dU, 0.5, stab)
    from flowassim.fem import element_velocity
    pred = np.einsum("eac,eac->e", dd, element_velocity(space, dU))
    assert np.allclose((dp - dm) / (2 * eps), pred, rtol=1e-6, atol=1e-12)


def test_nonpositive_viscosity_rejected(space):
    with pytest.raises(ValueError):
        assemble_linear_operators(space, 0.0)


def test_stabilization_scale_rejected():
    with pytest.raises(ValueError):
        StabilizationParams(True, pressure_scale=0.0)


# -- wall shear stress -----------------------------------------------------

@pytest.fixture(scope="module")
def poiseuille_space():
    return build_space(build_channel(ChannelSpec(length=5.0), 0.25), "P2P1")


def test_wss_poiseuille(poiseuille_space):
    s = poiseuille_space
    U = s.interpolate_velocity(lambda x, y: (1 - 4 * y ** 2, 0 * x))
    wss = compute_wss(s, U, 1.0)
    assert len(wss) == 2 * 20
    assert np.allclose(wss, 4.0, atol=1e-12)


def test_wss_linear_in_mu(poiseuille_space):
    s = poiseuille_space
    U = random_state(s, 7)[: s.n_u]
    assert np.allclose(compute_wss(s, U, 3.5), 3.5 * compute_wss(s, U, 1.0), rtol=1e-14)


def test_wss_zero_for_rest(poiseuille_space):
    assert not compute_wss(poiseuille_space, np.zeros(poiseuille_space.n_u), 1.0).any()


def test_wss_p1_linear_shear():
    s = build_space(build_channel(ChannelSpec(length=5.0), 0.25), "P1P1")
    # u = (y + 1/2, 0): du/dy = 1 everywhere, exactly representable in P1
    U = s.interpolate_velocity(lambda x, y: (y + 0.5, 0 * x))
    assert np.allclose(compute_wss(s, U, 2.0), 2.0, atol=1e-12)


def test_space_counts():
    m = MESHES["straight"]
    th = build_space(m, "P2P1")
    p1 = build_space(m, "P1P1")
    n_edges = m.n_vertices + m.n_triangles - 1
    assert th.n_nodes == m.n_vertices + n_edges
    assert p1.n_nodes == m.n_vertices
    assert th.n_p == p1.n_p == m.n_vertices
    # 3 inlet vertices at h = 1/2 -> 5 P2 inlet nodes, corners excluded from control
    assert len(th.inlet_nodes) == 5 and len(th.control_nodes) == 3
    assert len(p1.inlet_nodes) == 3 and len(p1.control_nodes) == 1


def test_unknown_family():
    with pytest.raises(ValueError):
        build_space(MESHES["straight"], "P3P2")


def test_space_sizes_on_33_vertex_mesh():
    m = MESHES["straight"]
    assert m.n_vertices == 33
    p1 = build_space(m, "P1P1")
    assert (p1.n_u, p1.n_p) == (66, 33)


def test_viscous_kills_translation(space):
    ops = assemble_linear_operators(space, 1.0)
    one = np.zeros(space.n_u)
    one[: space.n_nodes] = 1.0
    assert abs(one @ ops.Q @ one) < 1e-13
    assert np.abs(ops.Q @ one).max() < 1e-13


def test_divergence_of_constant_is_boundary_flux(space):
    # B U for U = (1, 0): -int psi_i div u = 0 inside, so the total must be zero;
    # the boundary flux of a constant field vanishes on a closed curve
    ops = assemble_linear_operators(space, 1.0)
    U = np.zeros(space.n_u)
    U[: space.n_nodes] = 1.0
    assert np.abs(ops.B @ U).max() < 1e-13
    # for u = (x, 0) every row integrates -psi_i: total equals -area
    Ux = space.interpolate_velocity(lambda x, y: (x, 0 * y))
    assert abs((ops.B @ Ux).sum() + space.mesh.area()) < 1e-12


def test_stabilization_disabled_blocks_vanish(space):
    ops = assemble_linear_operators(space, 1.0, StabilizationParams(False))
    assert ops.Qs.nnz == 0 and ops.Bs.nnz == 0 and ops.B1.nnz == 0


def test_convection_zero_field(space):
    N, Nc = assemble_convection(space, np.zeros(space.n_u), 1.0, StabilizationParams(True))
    assert abs(N).max() == 0 and abs(Nc).max() == 0


def test_convection_skew_for_solenoidal_field():
    # stream function psi = (x (5 - x) (y^2 - 1/4))^2 vanishes with its gradient on the boundary;
    # its velocity is degree > 2, so the check is only up to interpolation error
    s = build_space(build_channel(ChannelSpec(length=5.0), 0.125), "P2P1")

    def vel(x, y):
        a, b = x * (5 - x), y * y - 0.25
        da, db = 5 - 2 * x, 2 * y
        return 2 * a * b * a * db, -2 * a * b * da * b

    U = s.interpolate_velocity(vel)
    N, _ = assemble_convection(s, U, 1.0)
    M = assemble_domain_mass(s)
    assert abs(U @ N @ U) < 1e-3 * (U @ M @ U)
