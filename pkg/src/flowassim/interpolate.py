"""Evaluation of finite element fields at arbitrary points and between meshes.

Transfers first match nodes that coincide (to 1e-12) and copy those values
unchanged, so same-mesh extraction is bit-identical.  Remaining points are
located in the source triangulation and the source basis is evaluated there.
Points slightly outside the source domain (curved walls are resolved by
chords of a different length on different meshes) are evaluated by
extending the polynomial of the nearest triangle.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .fem import FeSpace, p1_basis, p2_basis

__all__ = [
    "OutsideDomainError",
    "PointLocator",
    "evaluate_velocity",
    "evaluate_pressure",
    "transfer_velocity",
    "transfer_pressure",
]

MATCH_TOL = 1e-12
# accepted distance outside the source mesh, relative to its h_max
EXTRAPOLATION_TOL = 0.05


class OutsideDomainError(ValueError):
    pass


class PointLocator:
    """Find the triangle containing each query point and its reference coordinates."""

    def __init__(self, space: FeSpace):
        self.space = space
        mesh = space.mesh
        self._P0 = mesh.vertices[mesh.triangles[:, 0]]
        self._tree = cKDTree(mesh.vertices[mesh.triangles].mean(axis=1))
        self._node_tree = cKDTree(space.nodes)

    def locate(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ne = self.space.mesh.n_triangles
        cells = np.full(len(points), -1, dtype=np.int64)
        xi = np.zeros((len(points), 2))
        todo = np.arange(len(points))
        for k in (min(16, ne), min(128, ne)):
            if len(todo) == 0:
                break
            c, bary, x = self._candidates(points[todo], k)
            inside = bary.min(axis=2) >= -1e-12
            found = inside.any(axis=1)
            pick = inside.argmax(axis=1)
            rows = np.flatnonzero(found)
            cells[todo[rows]] = c[rows, pick[rows]]
            xi[todo[rows]] = x[rows, pick[rows]]
            if k == min(128, ne):
                # nearest triangle by least negative barycentric coordinate
                rest = np.flatnonzero(~found)
                j = bary[rest].min(axis=2).argmax(axis=1)
                cand = c[rest, j]
                b = bary[rest, j]
                dist = self._outside_distance(cand, b)
                tol = EXTRAPOLATION_TOL * self.space.mesh.h_max
                if (dist > tol).any():
                    bad = points[todo[rest[dist > tol][0]]]
                    raise OutsideDomainError(f"point {bad.tolist()} lies outside the source mesh")
                cells[todo[rest]] = cand
                xi[todo[rest]] = x[rest, j]
                break
            todo = todo[~found]
        return cells, xi

    def _candidates(self, points, k):
        _, c = self._tree.query(points, k=k)
        c = np.asarray(c).reshape(len(points), k)
        d = points[:, None, :] - self._P0[c]
        x = np.einsum("nkij,nkj->nki", self.space.geom.inv_jac[c], d)
        bary = np.stack([1 - x[..., 0] - x[..., 1], x[..., 0], x[..., 1]], axis=2)
        return c, bary, x

    def _outside_distance(self, cells, bary):
        # barycentric coordinate times the height over the opposite edge
        v = self.space.mesh.vertices[self.space.mesh.triangles[cells]]
        opp = np.linalg.norm(v[:, [2, 0, 1]] - v[:, [1, 2, 0]], axis=2)
        height = 2 * self.space.geom.area[cells][:, None] / opp
        return np.max(np.maximum(-bary, 0) * height, axis=1)

    def matching_nodes(self, points):
        """Index of the coinciding source node per point, -1 where none."""
        d, j = self._node_tree.query(np.atleast_2d(points))
        return np.where(d <= MATCH_TOL, j, -1)


def _velocity_basis(space, xi):
    return p2_basis(xi)[0] if space.degree == 2 else p1_basis(xi)[0]


def evaluate_velocity(space: FeSpace, U, points, locator: PointLocator | None = None) -> np.ndarray:
    """Velocity (n, 2) of the field ``U`` at ``points``."""
    locator = locator or PointLocator(space)
    cells, xi = locator.locate(points)
    phi = _velocity_basis(space, xi)
    cn = space.cell_nodes[cells]
    nn = space.n_nodes
    return np.stack([(phi * U[cn]).sum(1), (phi * U[cn + nn]).sum(1)], axis=1)


def evaluate_pressure(space: FeSpace, P, points, locator: PointLocator | None = None) -> np.ndarray:
    locator = locator or PointLocator(space)
    cells, xi = locator.locate(points)
    psi = p1_basis(xi)[0]
    return (psi * P[space.mesh.triangles[cells]]).sum(1)


def transfer_velocity(src: FeSpace, U, dst: FeSpace, nodes=None,
                      locator: PointLocator | None = None) -> np.ndarray:
    """Velocity coefficients on ``dst`` (all nodes, or the subset ``nodes``).

    Returns the blocked vector ``[ux, uy]`` over the selected nodes.
    """
    locator = locator or PointLocator(src)
    sel = np.arange(dst.n_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    pts = dst.nodes[sel]
    out = np.empty((len(sel), 2))
    j = locator.matching_nodes(pts)
    hit = j >= 0
    out[hit, 0] = U[j[hit]]
    out[hit, 1] = U[j[hit] + src.n_nodes]
    if (~hit).any():
        out[~hit] = evaluate_velocity(src, U, pts[~hit], locator)
    return np.concatenate([out[:, 0], out[:, 1]])


def transfer_pressure(src: FeSpace, P, dst: FeSpace, locator: PointLocator | None = None) -> np.ndarray:
    locator = locator or PointLocator(src)
    pts = dst.mesh.vertices
    out = np.empty(len(pts))
    d, j = cKDTree(src.mesh.vertices).query(pts)
    hit = d <= MATCH_TOL
    out[hit] = P[j[hit]]
    if (~hit).any():
        out[~hit] = evaluate_pressure(src, P, pts[~hit], locator)
    return out
