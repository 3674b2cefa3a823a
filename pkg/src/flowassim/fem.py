"""Mixed finite element spaces and assembly of the discrete flow operators.

Two families are supported on triangles: Taylor-Hood (P2 velocity, P1
pressure) and equal-order P1-P1 with GLS-type stabilization.  Velocity
coefficients are blocked by component, ``U = [u_x at all nodes, u_y at all
nodes]``; the state vector is ``[U, P]``.

Sign conventions: ``B = -(psi_i, div phi_j)`` so the momentum equation carries
``B^T P`` and the continuity equation reads ``B U = B1 P``, where ``B1`` is
the (positive semidefinite) pressure stabilization.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import BoundaryTag, Mesh
from .sparse import AssemblyPattern, to_csr

__all__ = [
    "Family",
    "FeSpace",
    "StabilizationParams",
    "AssembledOperators",
    "build_space",
    "assemble_linear_operators",
    "assemble_convection",
    "assemble_observation_mass",
    "assemble_inlet_regularizer",
    "assemble_inlet_mass",
    "assemble_domain_mass",
    "assemble_neumann_operator",
    "stabilization_delta",
    "compute_wss",
    "TRI_RULE",
    "EDGE_RULE",
]


class Family(str, enum.Enum):
    TAYLOR_HOOD = "P2P1"
    STABILIZED_P1 = "P1P1"


# Degree-5 Strang-Fix/Dunavant rule on the reference triangle (area 1/2):
# exact for every product that appears in the Taylor-Hood convection term.
_a, _b = (6 - np.sqrt(15)) / 21, (9 + 2 * np.sqrt(15)) / 21
_c, _d = (6 + np.sqrt(15)) / 21, (9 - 2 * np.sqrt(15)) / 21
_wa, _wc = (155 - np.sqrt(15)) / 2400, (155 + np.sqrt(15)) / 2400
TRI_RULE = (
    np.array([[1 / 3, 1 / 3], [_a, _a], [_b, _a], [_a, _b], [_c, _c], [_d, _c], [_c, _d]]),
    np.array([9 / 80, _wa, _wa, _wa, _wc, _wc, _wc]),
)
# 3-point Gauss-Legendre on [0, 1]
EDGE_RULE = (
    0.5 + 0.5 * np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)]),
    np.array([5 / 18, 8 / 18, 5 / 18]),
)

# local edges of a triangle; P2 midside node k+3 sits on edge k
_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


def p1_basis(xi):
    """Values (nq, 3) and reference gradients (nq, 3, 2) of the P1 basis."""
    xi = np.atleast_2d(xi)
    x, y = xi[:, 0], xi[:, 1]
    val = np.stack([1 - x - y, x, y], axis=1)
    grad = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (len(xi), 3, 2))
    return val, np.array(grad)


def p2_basis(xi):
    """Values (nq, 6), reference gradients (nq, 6, 2), and Hessians (6, 2, 2)."""
    xi = np.atleast_2d(xi)
    x, y = xi[:, 0], xi[:, 1]
    l0, l1, l2 = 1 - x - y, x, y
    val = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                    4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=1)
    g0 = np.array([-1.0, -1.0])
    g1 = np.array([1.0, 0.0])
    g2 = np.array([0.0, 1.0])
    L = [l0, l1, l2]
    G = [g0, g1, g2]
    grads = [(4 * L[i] - 1)[:, None] * G[i] for i in range(3)]
    for i, j in _LOCAL_EDGES:
        grads.append(4 * (L[i][:, None] * G[j] + L[j][:, None] * G[i]))
    grad = np.stack(grads, axis=1)
    hess = [4 * np.outer(G[i], G[i]) for i in range(3)]
    for i, j in _LOCAL_EDGES:
        hess.append(4 * (np.outer(G[i], G[j]) + np.outer(G[j], G[i])))
    return val, grad, np.stack(hess)


def _edge_basis(t, degree):
    """1D Lagrange basis on [0, 1]: nodes (start, end[, midpoint])."""
    t = np.asarray(t, dtype=float)
    if degree == 1:
        return np.stack([1 - t, t], 1), np.stack([-np.ones_like(t), np.ones_like(t)], 1)
    val = np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], 1)
    der = np.stack([4 * t - 3, 4 * t - 1, 4 - 8 * t], 1)
    return val, der


@dataclass(frozen=True)
class StabilizationParams:
    """GLS stabilization switches.

    ``delta`` is computed per element from the local velocity; see
    :func:`stabilization_delta`.  ``pressure_scale`` multiplies the element
    parameter in the pressure block ``B1`` (the stand-in for ``1/lambda``).
    """

    enabled: bool = False
    pressure_scale: float = 1.0

    def __post_init__(self):
        if self.enabled and not self.pressure_scale > 0:
            raise ValueError("pressure_scale must be positive when stabilization is on")


@dataclass(eq=False)
class _Geometry:
    w: np.ndarray          # (ne, nq) quadrature weights times |det J|
    phi: np.ndarray        # (nq, na) velocity basis values
    dphi: np.ndarray       # (ne, nq, na, 2)
    lap: np.ndarray        # (ne, na) Laplacian, constant per element
    psi: np.ndarray        # (nq, 3) pressure basis values
    dpsi: np.ndarray       # (ne, 3, 2)
    phic: np.ndarray       # (na,) velocity basis at the centroid
    area: np.ndarray       # (ne,)
    h: np.ndarray          # (ne,) longest edge
    inv_jac: np.ndarray    # (ne, 2, 2)


@dataclass(eq=False)
class FeSpace:
    """Velocity/pressure finite element space on a channel mesh.

    Index sets use velocity dof numbering ``c * n_nodes + node``.  The
    control set (Dirichlet variant) holds both components of the inlet nodes
    except the two inlet/wall corners, which are pinned to zero with the wall.
    """

    mesh: Mesh
    family: Family
    nodes: np.ndarray
    cell_nodes: np.ndarray
    edges: np.ndarray
    cell_edges: np.ndarray
    inlet_nodes: np.ndarray
    control_nodes: np.ndarray
    wall_nodes: np.ndarray
    boundary_edge_nodes: dict
    boundary_edge_cells: dict
    section_edge_nodes: dict
    geom: _Geometry
    pattern: AssemblyPattern = field(repr=False)
    local_dofs: np.ndarray = field(repr=False)
    ordering: np.ndarray | None = field(repr=False)

    @property
    def degree(self) -> int:
        return 2 if self.family is Family.TAYLOR_HOOD else 1

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_u(self) -> int:
        return 2 * len(self.nodes)

    @property
    def n_p(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_state(self) -> int:
        return self.n_u + self.n_p

    def vdofs(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        return np.concatenate([nodes, nodes + self.n_nodes])

    @property
    def control_dofs(self) -> np.ndarray:
        return self.vdofs(self.control_nodes)

    @property
    def wall_dofs(self) -> np.ndarray:
        return self.vdofs(self.wall_nodes)

    @property
    def interior_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_u, dtype=bool)
        mask[self.control_dofs] = False
        mask[self.wall_dofs] = False
        return np.flatnonzero(mask)

    @property
    def n_g(self) -> int:
        return 2 * len(self.control_nodes)

    def observation_nodes(self, sections=None) -> np.ndarray:
        keys = self.section_edge_nodes if sections is None else sections
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([self.section_edge_nodes[k].ravel() for k in keys]))

    def observation_dofs(self, sections=None) -> np.ndarray:
        return self.vdofs(self.observation_nodes(sections))

    def inlet_coordinate(self, nodes=None) -> np.ndarray:
        """Signed distance of nodes along the inlet from its midpoint."""
        nodes = self.inlet_nodes if nodes is None else nodes
        p = self.nodes[self.inlet_nodes]
        a, b = p[0], p[-1]
        t = (b - a) / np.linalg.norm(b - a)
        return (self.nodes[nodes] - 0.5 * (a + b)) @ t

    def inlet_direction(self) -> np.ndarray:
        """Unit vector pointing into the domain across the inlet."""
        e = self.boundary_edge_nodes[BoundaryTag.INLET]
        n = _outward_normals(self, e[:, :2], self.boundary_edge_cells[BoundaryTag.INLET])
        m = -n.mean(axis=0)
        return m / np.linalg.norm(m)

    def split(self, x):
        x = np.asarray(x)
        return x[: self.n_u], x[self.n_u:]

    def velocity_at_nodes(self, U) -> np.ndarray:
        return np.stack([U[: self.n_nodes], U[self.n_nodes:]], axis=1)

    def interpolate_velocity(self, func) -> np.ndarray:
        """Nodal interpolant of ``func(x, y) -> (ux, uy)``."""
        ux, uy = func(self.nodes[:, 0], self.nodes[:, 1])
        return np.concatenate([np.broadcast_to(ux, self.n_nodes), np.broadcast_to(uy, self.n_nodes)]).astype(float)

    def interpolate_pressure(self, func) -> np.ndarray:
        v = self.mesh.vertices
        return np.broadcast_to(func(v[:, 0], v[:, 1]), self.n_p).astype(float)


def _element_geometry(mesh: Mesh, family: Family) -> _Geometry:
    xq, wq = TRI_RULE
    P = mesh.vertices[mesh.triangles]
    J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)  # columns: edge vectors
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / det
    inv[:, 0, 1] = -J[:, 0, 1] / det
    inv[:, 1, 0] = -J[:, 1, 0] / det
    inv[:, 1, 1] = J[:, 0, 0] / det
    w = np.abs(det)[:, None] * wq[None, :]

    if family is Family.TAYLOR_HOOD:
        phi, dref, hess = p2_basis(xq)
        phic = p2_basis(np.array([[1 / 3, 1 / 3]]))[0][0]
        lap = np.einsum("akl,ekd,eld->ea", hess, inv, inv)
    else:
        phi, dref = p1_basis(xq)
        phic = np.full(3, 1 / 3)
        lap = np.zeros((len(P), 3))
    dphi = np.einsum("qak,ekd->eqad", dref, inv)
    psi, pref = p1_basis(xq)
    dpsi = np.einsum("ak,ekd->ead", pref[0], inv)
    el = np.linalg.norm(P[:, [1, 2, 0]] - P, axis=2)
    return _Geometry(w=w, phi=phi, dphi=dphi, lap=lap, psi=psi, dpsi=dpsi, phic=phic,
                     area=0.5 * np.abs(det), h=el.max(axis=1), inv_jac=inv)


def _dissect(idx, coords, leaf=64):
    """Nested dissection of grid points: both halves first, then the separator line."""
    if len(idx) <= leaf:
        return [idx]
    c = coords[idx]
    span = c.max(axis=0) - c.min(axis=0)
    k = int(np.argmax(span))
    vals = np.unique(c[:, k] // 2 * 2)          # even lines are vertex lines
    if len(vals) < 3:
        return [idx]
    cut = vals[len(vals) // 2]
    lo, mid, hi = c[:, k] < cut, c[:, k] == cut, c[:, k] > cut
    return _dissect(idx[lo], coords) + _dissect(idx[hi], coords) + [idx[mid]]


def _fill_ordering(mesh: Mesh, cell_nodes_p2, nn: int, nv: int):
    """Symmetric state permutation from nested dissection of the structured grid."""
    n = mesh.ny + 1
    k = np.arange(nv)
    grid = np.stack([2 * (k // n), 2 * (k % n)], axis=1)
    if nn > nv:
        coords = np.zeros((nn, 2), dtype=np.int64)
        coords[:nv] = grid
        local = cell_nodes_p2[:, 3:]
        ends = mesh.triangles[:, _LOCAL_EDGES]                      # (ne, 3, 2)
        coords[local.ravel()] = (grid[ends[..., 0]] + grid[ends[..., 1]]).reshape(-1, 2) // 2
    else:
        coords = grid
    order = np.concatenate(_dissect(np.arange(nn), coords))
    # per node: both velocity components, then the pressure if it is a vertex
    pdof = np.where(order < nv, 2 * nn + order, -1)
    full = np.stack([order, order + nn, pdof], axis=1).ravel()
    return full[full >= 0]


def build_space(mesh: Mesh, family: Family | str) -> FeSpace:
    family = Family(family)
    tri = mesh.triangles
    nv = mesh.n_vertices
    local = np.sort(tri[:, _LOCAL_EDGES], axis=2).reshape(-1, 2)
    edges, inv = np.unique(local, axis=0, return_inverse=True)
    cell_edges = inv.reshape(-1, 3)
    edge_index = {tuple(e): k for k, e in enumerate(edges)}

    if family is Family.TAYLOR_HOOD:
        nodes = np.concatenate([mesh.vertices, mesh.vertices[edges].mean(axis=1)])
        cell_nodes = np.concatenate([tri, nv + cell_edges], axis=1)
    else:
        nodes = mesh.vertices.copy()
        cell_nodes = tri.copy()

    def edge_nodes(vpairs):
        vpairs = np.asarray(vpairs, dtype=np.int64).reshape(-1, 2)
        if family is Family.TAYLOR_HOOD:
            mids = np.array([nv + edge_index[tuple(sorted(e))] for e in vpairs], dtype=np.int64)
            return np.concatenate([vpairs, mids[:, None]], axis=1)
        return vpairs.copy()

    # owning triangle of each boundary edge
    owner = np.full(len(edges), -1, dtype=np.int64)
    counts = np.bincount(inv.ravel(), minlength=len(edges))
    cells = np.repeat(np.arange(len(tri)), 3)
    owner[inv.ravel()] = cells
    bnodes, bcells = {}, {}
    for tag in BoundaryTag:
        e = mesh.edges_with_tag(tag)
        bnodes[tag] = edge_nodes(e)
        ids = np.array([edge_index[tuple(sorted(x))] for x in e], dtype=np.int64)
        if len(ids) and (counts[ids] != 1).any():
            raise ValueError(f"{tag.name} edge is not on the boundary")
        bcells[tag] = owner[ids] if len(ids) else np.zeros(0, dtype=np.int64)
    snodes = {k: edge_nodes(e) for k, e in mesh.section_edges.items()}

    wall_nodes = np.unique(bnodes[BoundaryTag.WALL].ravel())
    inlet = np.unique(bnodes[BoundaryTag.INLET].ravel())
    p = nodes[inlet]
    # order inlet nodes along the (straight) inlet
    ie = mesh.edges_with_tag(BoundaryTag.INLET)
    vs, cnt = np.unique(ie.ravel(), return_counts=True)
    ends = vs[cnt == 1]
    start = ends[np.isin(ends, ie[:, 0])][0]
    end = ends[ends != start][0]
    direction = mesh.vertices[end] - mesh.vertices[start]
    inlet = inlet[np.argsort((p - mesh.vertices[start]) @ direction, kind="stable")]
    ctrl = inlet[~np.isin(inlet, wall_nodes)]

    nn = len(nodes)
    ldofs = np.concatenate([cell_nodes, cell_nodes + nn, 2 * nn + tri], axis=1)
    geom = _element_geometry(mesh, family)
    pattern = AssemblyPattern(ldofs, 2 * nn + nv)
    # the saddle-point Taylor-Hood system needs off-diagonal pivots that
    # spoil a fixed ordering; SuperLU's own column ordering does better there
    ordering = _fill_ordering(mesh, cell_nodes, nn, nv) if family is Family.STABILIZED_P1 else None
    return FeSpace(mesh=mesh, family=family, nodes=nodes, cell_nodes=cell_nodes, edges=edges,
                   cell_edges=cell_edges, inlet_nodes=inlet, control_nodes=ctrl,
                   wall_nodes=wall_nodes, boundary_edge_nodes=bnodes,
                   boundary_edge_cells=bcells, section_edge_nodes=snodes, geom=geom,
                   pattern=pattern, local_dofs=ldofs, ordering=ordering)


# ---------------------------------------------------------------------------
# element-level evaluation helpers

def element_velocity(space: FeSpace, U):
    """Nodal velocity per element, shape (ne, na, 2)."""
    nn = space.n_nodes
    cn = space.cell_nodes
    return np.stack([U[cn], U[cn + nn]], axis=2)


def stabilization_delta(space: FeSpace, U, nu: float, stab: StabilizationParams):
    """Element parameter ``((2|u|/h)^2 + (4 nu/h^2)^2)^(-1/2)`` and its derivative.

    ``|u|`` is the velocity at the element centroid.  Returns ``delta`` (ne,)
    and ``d delta / d U_e`` with shape (ne, na, 2).
    """
    g = space.geom
    ne, na = space.cell_nodes.shape
    if not stab.enabled:
        return np.zeros(ne), np.zeros((ne, na, 2))
    Ue = element_velocity(space, U) if U is not None else np.zeros((ne, na, 2))
    uc = np.einsum("a,eac->ec", g.phic, Ue)
    h2 = g.h ** 2
    s = 4 * (uc ** 2).sum(axis=1) / h2 + 16 * nu ** 2 / h2 ** 2
    delta = s ** -0.5
    ddelta = -(delta ** 3 * 4 / h2)[:, None, None] * g.phic[None, :, None] * uc[:, None, :]
    return delta, ddelta


@dataclass(eq=False)
class AssembledOperators:
    """Velocity-independent operators plus stabilization blocks at a reference velocity.

    ``Q`` viscous (n_u x n_u), ``B`` divergence (n_p x n_u), ``Qs``/``Bs``/
    ``B1`` the stabilization blocks evaluated with the element parameter and
    advecting velocity of ``U_ref`` (zero when not given), ``F`` the load
    vector (zero: no body force), ``A_reg`` the inlet regularizer.
    """

    space: FeSpace
    nu: float
    stab: StabilizationParams
    Q: sp.csr_matrix
    B: sp.csr_matrix
    Qs: sp.csr_matrix
    Bs: sp.csr_matrix
    B1: sp.csr_matrix
    F: np.ndarray
    A_reg: sp.csr_matrix
    convection: bool = True


def _scatter(rows, cols, vals, shape):
    return to_csr(np.broadcast_to(rows, vals.shape), np.broadcast_to(cols, vals.shape), vals, *shape)


def _vel_block(space, local):
    """Scatter (ne, na, na) scalar blocks onto both velocity components."""
    nn, cn = space.n_nodes, space.cell_nodes
    na = cn.shape[1]
    full = np.zeros((len(cn), 2 * na, 2 * na))
    full[:, :na, :na] = local
    full[:, na:, na:] = local
    dofs = np.concatenate([cn, cn + nn], 1)
    R = np.broadcast_to(dofs[:, :, None], full.shape)
    C = np.broadcast_to(dofs[:, None, :], full.shape)
    return to_csr(R, C, full, space.n_u, space.n_u)


def assemble_linear_operators(space: FeSpace, nu: float, stab: StabilizationParams | None = None,
                              U_ref=None, convection: bool = True) -> AssembledOperators:
    """Assemble ``Q``, ``B``, the stabilization blocks, ``F`` and the inlet regularizer.

    For P1 velocity the Laplacian of every basis function is zero, so ``Qs``
    vanishes identically and the ``nu * lap`` part of the test function drops.
    """
    if not nu > 0:
        raise ValueError("viscosity must be positive")
    stab = stab or StabilizationParams()
    g = space.geom
    cn = space.cell_nodes
    nn = space.n_nodes
    tri = space.mesh.triangles
    K = np.einsum("eq,eqad,eqbd->eab", g.w, g.dphi, g.dphi)
    Q = _vel_block(space, nu * K)

    # B[i, (b, d)] = -int psi_i d_d phi_b
    Bl = -np.einsum("eq,qi,eqbd->eidb", g.w, g.psi, g.dphi)  # (ne, 3, 2, na)
    Bl = Bl.reshape(len(cn), 3, -1)
    cols = np.concatenate([cn, cn + nn], axis=1)[:, None, :]
    B = _scatter(tri[:, :, None], cols, Bl, (space.n_p, space.n_u))

    delta, _ = stabilization_delta(space, U_ref, nu, stab)
    if stab.enabled:
        Ue = element_velocity(space, U_ref) if U_ref is not None else np.zeros(cn.shape + (2,))
        if not convection:
            Ue = np.zeros_like(Ue)
        u = np.einsum("qa,eac->eqc", g.phi, Ue)
        t = np.einsum("eqc,eqac->eqa", u, g.dphi) + nu * g.lap[:, None, :]
        Qs_l = np.einsum("e,eq,eqa,eb->eab", delta, g.w, t, -nu * g.lap)
        Qs = _vel_block(space, Qs_l)
        Bs_l = np.einsum("e,eq,eqa,ejc->eacj", delta, g.w, t, g.dpsi)  # (ne, na, 2, 3)
        Bs_l = Bs_l.transpose(0, 2, 1, 3).reshape(len(cn), -1, 3)
        rows = np.concatenate([cn, cn + nn], axis=1)[:, :, None]
        Bs = _scatter(rows, tri[:, None, :], Bs_l, (space.n_u, space.n_p))
        B1_l = stab.pressure_scale * np.einsum("e,e,eid,ejd->eij", delta, g.area, g.dpsi, g.dpsi)
        B1 = _scatter(tri[:, :, None], tri[:, None, :], B1_l, (space.n_p, space.n_p))
    else:
        Qs = sp.csr_matrix((space.n_u, space.n_u))
        Bs = sp.csr_matrix((space.n_u, space.n_p))
        B1 = sp.csr_matrix((space.n_p, space.n_p))

    return AssembledOperators(space=space, nu=float(nu), stab=stab, Q=Q, B=B, Qs=Qs, Bs=Bs,
                              B1=B1, F=np.zeros(space.n_u),
                              A_reg=assemble_inlet_regularizer(space), convection=convection)


def assemble_convection(space: FeSpace, U, nu: float, stab: StabilizationParams | None = None):
    """Return the convection matrices ``(N(U), Ncal(U))``.

    ``N[(a,c),(b,d)] = int phi_a phi_b d_d u_c`` so that ``N(U) U`` is the
    Galerkin convection term; ``Ncal`` is its stabilized counterpart tested
    against ``delta (u . grad phi_a + nu lap phi_a)``.
    """
    stab = stab or StabilizationParams()
    g = space.geom
    cn = space.cell_nodes
    nn = space.n_nodes
    ne, na = cn.shape
    Ue = element_velocity(space, U)
    G = np.einsum("eqbd,ebc->eqcd", g.dphi, Ue)
    Nl = np.einsum("eq,qa,qb,eqcd->eacdb", g.w, g.phi, g.phi, G)
    Nl = Nl.transpose(0, 2, 1, 3, 4).reshape(ne, 2 * na, 2 * na)
    dofs = np.concatenate([cn, cn + nn], axis=1)
    R = dofs[:, :, None]
    C = dofs[:, None, :]
    N = _scatter(R, C, Nl, (space.n_u, space.n_u))
    delta, _ = stabilization_delta(space, U, nu, stab)
    if stab.enabled:
        u = np.einsum("qa,eac->eqc", g.phi, Ue)
        t = np.einsum("eqc,eqac->eqa", u, g.dphi) + nu * g.lap[:, None, :]
        Ncl = np.einsum("e,eq,eqa,qb,eqcd->eacdb", delta, g.w, t, g.phi, G)
        Ncl = Ncl.transpose(0, 2, 1, 3, 4).reshape(ne, 2 * na, 2 * na)
        Ncal = _scatter(R, C, Ncl, (space.n_u, space.n_u))
    else:
        Ncal = sp.csr_matrix((space.n_u, space.n_u))
    return N, Ncal


# ---------------------------------------------------------------------------
# boundary and section operators

def _edge_local(space: FeSpace, enodes: np.ndarray):
    """1D mass and tangential stiffness on edges; nodes (start, end[, mid])."""
    deg = space.degree
    tq, wq = EDGE_RULE
    val, der = _edge_basis(tq, deg)
    p = space.nodes[enodes[:, :2]]
    length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    M = np.einsum("q,qa,qb->ab", wq, val, val)[None] * length[:, None, None]
    S = np.einsum("q,qa,qb->ab", wq, der, der)[None] / length[:, None, None]
    return M, S, length


def _outward_normals(space: FeSpace, vpairs, cells):
    v = space.mesh.vertices
    p0, p1 = v[vpairs[:, 0]], v[vpairs[:, 1]]
    e = p1 - p0
    n = np.stack([e[:, 1], -e[:, 0]], axis=1) / np.linalg.norm(e, axis=1)[:, None]
    centroid = v[space.mesh.triangles[cells]].mean(axis=1)
    flip = ((centroid - p0) * n).sum(axis=1) > 0
    n[flip] *= -1
    return n


def _scalar_edge_matrix(space, enodes, local, n):
    R = np.broadcast_to(enodes[:, :, None], local.shape)
    C = np.broadcast_to(enodes[:, None, :], local.shape)
    return to_csr(R, C, local, n, n)


def _vector_from_scalar(space, S):
    return sp.block_diag([S, S], format="csr")


def assemble_observation_mass(space: FeSpace, sections=None) -> sp.csr_matrix:
    """Arc-length mass matrix over the observation sections, for both components.

    ``U^T M U`` equals the integral of ``|u_h|^2`` over the union of the
    sections.  Support is limited to nodes on the sections.
    """
    keys = list(space.section_edge_nodes) if sections is None else list(sections)
    for k in keys:
        if k not in space.section_edge_nodes:
            raise KeyError(f"unknown observation section {k}")
    nn = space.n_nodes
    if not keys:
        return sp.csr_matrix((2 * nn, 2 * nn))
    en = np.concatenate([space.section_edge_nodes[k] for k in keys])
    M, _, _ = _edge_local(space, en)
    return _vector_from_scalar(space, _scalar_edge_matrix(space, en, M, nn))


def _inlet_scalar(space: FeSpace, which: str):
    en = space.boundary_edge_nodes[BoundaryTag.INLET]
    M, S, _ = _edge_local(space, en)
    A = _scalar_edge_matrix(space, en, M if which == "mass" else S, space.n_nodes)
    idx = space.inlet_nodes
    return A[idx][:, idx].tocsr()


def assemble_inlet_regularizer(space: FeSpace, kind: str = "dirichlet") -> sp.csr_matrix:
    """Tangential-derivative stiffness along the inlet.

    ``kind="dirichlet"``: both velocity components on the control nodes (the
    pinned corners are dropped, which makes the matrix positive definite).
    ``kind="neumann"``: scalar stiffness on all inlet nodes.
    """
    S = _inlet_scalar(space, "stiffness")
    if kind == "neumann":
        return S
    keep = np.flatnonzero(~np.isin(space.inlet_nodes, space.wall_nodes))
    Sc = S[keep][:, keep]
    return sp.block_diag([Sc, Sc], format="csr")


def assemble_inlet_mass(space: FeSpace, kind: str = "vector") -> sp.csr_matrix:
    """Inlet mass matrix: over all velocity dofs ("vector") or inlet nodes ("scalar")."""
    if kind == "scalar":
        return _inlet_scalar(space, "mass")
    en = space.boundary_edge_nodes[BoundaryTag.INLET]
    M, _, _ = _edge_local(space, en)
    return _vector_from_scalar(space, _scalar_edge_matrix(space, en, M, space.n_nodes))


def assemble_domain_mass(space: FeSpace) -> sp.csr_matrix:
    g = space.geom
    M = np.einsum("eq,qa,qb->eab", g.w, g.phi, g.phi)
    return _vel_block(space, M)


def assemble_neumann_operator(space: FeSpace) -> sp.csr_matrix:
    """Map inlet scalar values ``g`` to the load ``int_inlet g n . phi_i``.

    Shape (n_u, n_inlet); column ``k`` belongs to ``space.inlet_nodes[k]``.
    """
    en = space.boundary_edge_nodes[BoundaryTag.INLET]
    n = _outward_normals(space, en[:, :2], space.boundary_edge_cells[BoundaryTag.INLET])
    M, _, _ = _edge_local(space, en)
    pos = np.full(space.n_nodes, -1, dtype=np.int64)
    pos[space.inlet_nodes] = np.arange(len(space.inlet_nodes))
    cols = np.broadcast_to(pos[en][:, None, :], M.shape)
    rows = np.broadcast_to(en[:, :, None], M.shape)
    nn = space.n_nodes
    parts = [to_csr(rows + c * nn, cols, M * n[:, c, None, None], space.n_u, len(space.inlet_nodes))
             for c in range(2)]
    return (parts[0] + parts[1]).tocsr()


def compute_wss(space: FeSpace, U, mu: float) -> np.ndarray:
    """Wall shear stress magnitude per wall edge, ``|mu t . (grad u) n|`` (N/m^2).

    The velocity gradient comes from the element owning the edge, evaluated
    at the edge midpoint.
    """
    tag = BoundaryTag.WALL
    vpairs = space.mesh.edges_with_tag(tag)
    cells = space.boundary_edge_cells[tag]
    if len(vpairs) == 0:
        return np.zeros(0)
    tri = space.mesh.triangles[cells]
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    i0 = (tri == vpairs[:, [0]]).argmax(axis=1)
    i1 = (tri == vpairs[:, [1]]).argmax(axis=1)
    xi = 0.5 * (ref[i0] + ref[i1])
    if space.degree == 2:
        dref = p2_basis(xi)[1]
    else:
        dref = p1_basis(xi)[1]
    dphi = np.einsum("eak,ekd->ead", dref, space.geom.inv_jac[cells])
    Ue = element_velocity(space, U)[cells]
    G = np.einsum("ead,eac->ecd", dphi, Ue)
    n = _outward_normals(space, vpairs, cells)
    v = space.mesh.vertices
    t = v[vpairs[:, 1]] - v[vpairs[:, 0]]
    t /= np.linalg.norm(t, axis=1)[:, None]
    return np.abs(mu * np.einsum("ec,ecd,ed->e", t, G, n))
