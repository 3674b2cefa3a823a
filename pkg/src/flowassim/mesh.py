"""Structured triangular meshes for straight and curved 2D channels.

Vertices are laid out column by column along the channel centerline: vertex
``i * (ny + 1) + j`` sits at centerline station ``columns[i]`` and normal
offset ``offsets[j]``.  Each quad cell is split into two right triangles; the
diagonal flips at the centerline so the mesh is mirror-symmetric about it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "BoundaryTag",
    "ChannelKind",
    "ChannelSpec",
    "Centerline",
    "Mesh",
    "MeshError",
    "MisalignedObservationError",
    "InvalidGeometryError",
    "build_straight_channel",
    "build_curved_channel",
    "build_channel",
    "bend_station",
    "truncate",
    "truncate_at",
    "signed_areas",
    "check_mesh",
]

_ALIGN_TOL = 1e-9


class MeshError(ValueError):
    pass


class MisalignedObservationError(MeshError):
    """A requested section or truncation does not fall on a node column."""


class InvalidGeometryError(MeshError):
    pass


class BoundaryTag(enum.IntEnum):
    INLET = 0
    OUTLET = 1
    WALL = 2


class ChannelKind(str, enum.Enum):
    STRAIGHT = "straight"
    CURVED = "curved"


@dataclass(frozen=True)
class ChannelSpec:
    """Channel geometry in meters.

    For a curved channel, ``length`` is the upstream straight segment; the
    bend (angle in degrees, centerline radius) and the downstream straight
    follow it.  ``truncation_x`` is a centerline station where the working
    domain starts.
    """

    length: float = 5.0
    half_height: float = 0.5
    kind: ChannelKind = ChannelKind.STRAIGHT
    bend_angle_deg: float = 90.0
    bend_radius: float = 1.5
    downstream_length: float = 2.5
    truncation_x: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        if not self.length > 0:
            raise InvalidGeometryError(f"length must be positive, got {self.length}")
        if not self.half_height > 0:
            raise InvalidGeometryError(
                f"half_height must be positive, got {self.half_height}")
        if self.kind is ChannelKind.CURVED:
            if self.bend_angle_deg < 0:
                raise InvalidGeometryError("bend angle must be nonnegative")
            if self.bend_angle_deg > 0 and not self.bend_radius > self.half_height:
                raise InvalidGeometryError(
                    "bend radius must exceed the half height "
                    f"({self.bend_radius} <= {self.half_height}): the inner wall "
                    "would self-intersect")
            if self.downstream_length < 0:
                raise InvalidGeometryError("downstream length must be nonnegative")

    @property
    def bend_angle(self) -> float:
        return math.radians(self.bend_angle_deg) if self.kind is ChannelKind.CURVED else 0.0

    @property
    def total_length(self) -> float:
        """Centerline length of the whole channel."""
        if self.kind is ChannelKind.STRAIGHT:
            return self.length
        return self.length + self.bend_radius * self.bend_angle + self.downstream_length


@dataclass(frozen=True)
class Centerline:
    """Straight / circular-arc / straight centerline, parametrized by arc length.

    The bend turns left (counterclockwise).  A point at station ``s`` and
    normal offset ``eta`` is ``c(s) + eta * n(s)`` with ``n`` the left normal.
    """

    upstream: float
    radius: float = 1.0
    angle: float = 0.0
    downstream: float = 0.0

    @property
    def arc_length(self) -> float:
        return self.radius * self.angle

    @property
    def total(self) -> float:
        return self.upstream + self.arc_length + self.downstream

    def frame(self, s):
        """Return centerline points and unit tangents at stations ``s``."""
        s = np.asarray(s, dtype=float)
        L1, R, th = self.upstream, self.radius, self.angle
        phi = np.clip((s - L1) / R, 0.0, th) if th > 0 else np.zeros_like(s)
        tx, ty = np.cos(phi), np.sin(phi)
        # position: straight part, arc part, then straight continuation
        x = np.minimum(s, L1) + R * np.sin(phi)
        y = R * (1.0 - np.cos(phi))
        extra = np.maximum(s - L1 - self.arc_length, 0.0)
        x = x + extra * tx
        y = y + extra * ty
        return np.stack([x, y], axis=-1), np.stack([tx, ty], axis=-1)

    def map(self, s, eta):
        c, t = self.frame(s)
        eta = np.asarray(eta, dtype=float)
        n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        return c + eta[..., None] * n


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated channel with tagged boundary edges and observation sections.

    ``section_edges[k]`` lists the interior edges of observation section ``k``
    whose centerline station is ``section_stations[k]``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    section_edges: dict
    section_stations: tuple
    h_max: float
    columns: np.ndarray
    offsets: np.ndarray
    centerline: Centerline
    parent_vertices: np.ndarray | None = field(default=None)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def ny(self) -> int:
        return len(self.offsets) - 1

    def edges_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == tag]

    def column_vertices(self, i: int) -> np.ndarray:
        n = len(self.offsets)
        return np.arange(i * n, (i + 1) * n)

    def section_id(self, station: float) -> int:
        for k, s in enumerate(self.section_stations):
            if abs(s - station) <= _ALIGN_TOL * max(1.0, abs(station)):
                return k
        raise KeyError(f"no observation section at station {station}")

    def area(self) -> float:
        return float(signed_areas(self).sum())


def signed_areas(mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _n_cells(extent: float, h: float, what: str) -> int:
    n = extent / h
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-6 * max(1.0, n):
        raise MisalignedObservationError(
            f"h={h} does not divide the {what} {extent} into whole cells")
    return k


def _match_column(columns: np.ndarray, station: float) -> int:
    i = int(np.argmin(np.abs(columns - station)))
    scale = max(1.0, abs(station))
    if abs(columns[i] - station) > _ALIGN_TOL * scale:
        raise MisalignedObservationError(
            f"station {station} does not coincide with a node column "
            f"(nearest column at {columns[i]:.12g})")
    return i


def _structured(columns, half_height, ny, centerline, sections, h_max):
    columns = np.asarray(columns, dtype=float)
    nx = len(columns) - 1
    # exact mirror symmetry about the centerline
    offsets = half_height * (2.0 * np.arange(ny + 1) - ny) / ny
    S, E = np.meshgrid(columns, offsets, indexing="ij")
    vertices = centerline.map(S.ravel(), E.ravel())

    n = ny + 1
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * n + j
    b = (i + 1) * n + j
    c = (i + 1) * n + j + 1
    d = i * n + j + 1
    lower = j < ny // 2
    t1 = np.where(lower[:, None], np.stack([a, b, c], 1), np.stack([a, b, d], 1))
    t2 = np.where(lower[:, None], np.stack([a, c, d], 1), np.stack([b, c, d], 1))
    triangles = np.stack([t1, t2], axis=1).reshape(-1, 3)

    jj = np.arange(ny)
    ii = np.arange(nx)
    inlet = np.stack([jj, jj + 1], 1)
    outlet = np.stack([nx * n + jj + 1, nx * n + jj], 1)
    bottom = np.stack([ii * n, (ii + 1) * n], 1)
    top = np.stack([(ii + 1) * n + ny, ii * n + ny], 1)
    boundary_edges = np.concatenate([inlet, outlet, bottom, top]).astype(np.int64)
    boundary_tags = np.concatenate([
        np.full(ny, BoundaryTag.INLET),
        np.full(ny, BoundaryTag.OUTLET),
        np.full(2 * nx, BoundaryTag.WALL),
    ]).astype(np.int64)

    section_edges = {}
    stations = []
    for k, s in enumerate(sections):
        if not (columns[0] < s < columns[-1]):
            raise MisalignedObservationError(
                f"section station {s} lies outside the open interval "
                f"({columns[0]}, {columns[-1]})")
        col = _match_column(columns, s)
        section_edges[k] = np.stack([col * n + jj, col * n + jj + 1], 1).astype(np.int64)
        stations.append(float(columns[col]))

    return Mesh(
        vertices=vertices,
        triangles=triangles.astype(np.int64),
        boundary_edges=boundary_edges,
        boundary_tags=boundary_tags,
        section_edges=section_edges,
        section_stations=tuple(stations),
        h_max=float(h_max),
        columns=columns,
        offsets=offsets,
        centerline=centerline,
    )


def build_straight_channel(spec: ChannelSpec, h: float, sections=()) -> Mesh:
    """Mesh ``[0, length] x [-half_height, half_height]`` with cell size ``h``.

    Raises
    ------
    MisalignedObservationError
        If ``h`` does not tile the channel or a section station is not a
        node column.
    """
    nx = _n_cells(spec.length, h, "length")
    ny = _n_cells(2 * spec.half_height, h, "height")
    columns = np.linspace(0.0, spec.length, nx + 1)
    cl = Centerline(upstream=spec.length)
    hm = max(spec.length / nx, 2 * spec.half_height / ny)
    return _structured(columns, spec.half_height, ny, cl, list(sections), hm)


def build_curved_channel(spec: ChannelSpec, h: float, sections=()) -> Mesh:
    """Mesh a straight / circular bend / straight channel.

    The structured rectangle in (station, offset) coordinates is mapped
    through the centerline.  Columns are spaced ``h`` on the straight parts
    and uniformly on the arc; the arc cell count is the multiple of 6 nearest
    to ``R * angle / h`` so stations at every sixth of the bend angle are node
    columns (see :func:`bend_station`).
    """
    if spec.kind is not ChannelKind.CURVED:
        raise InvalidGeometryError("build_curved_channel needs a curved ChannelSpec")
    R, th = spec.bend_radius, spec.bend_angle
    if th > 0 and R <= spec.half_height:
        raise InvalidGeometryError("self-intersecting parametrization")
    ny = _n_cells(2 * spec.half_height, h, "height")
    n1 = _n_cells(spec.length, h, "upstream length")
    cols = [np.linspace(0.0, spec.length, n1 + 1)]
    arc = R * th
    if arc > 0:
        n_arc = 6 * max(1, int(round(arc / (6 * h))))
        cols.append(spec.length + np.linspace(0.0, arc, n_arc + 1)[1:])
    if spec.downstream_length > 0:
        n2 = _n_cells(spec.downstream_length, h, "downstream length")
        cols.append(spec.length + arc + np.linspace(0.0, spec.downstream_length, n2 + 1)[1:])
    columns = np.concatenate(cols)
    for s in sections:
        if s >= columns[-1] or s <= 0:
            raise MisalignedObservationError(
                f"section station {s} is outside the centerline (0, {columns[-1]:.6g})")
    cl = Centerline(upstream=spec.length, radius=R, angle=th,
                    downstream=spec.downstream_length)
    return _structured(columns, spec.half_height, ny, cl, list(sections), h)


def bend_station(spec: ChannelSpec, angle_deg: float) -> float:
    """Centerline station at ``angle_deg`` into the bend."""
    return spec.length + spec.bend_radius * math.radians(angle_deg)


def build_channel(spec: ChannelSpec, h: float, sections=()) -> Mesh:
    if spec.kind is ChannelKind.CURVED:
        return build_curved_channel(spec, h, sections)
    return build_straight_channel(spec, h, sections)


def truncate_at(mesh: Mesh, station: float) -> Mesh:
    """Keep the part of ``mesh`` downstream of ``station``.

    The truncation column becomes the inlet.  Sections strictly downstream
    are kept and renumbered from 0 in upstream-to-downstream order.
    """
    i0 = _match_column(mesh.columns, station)
    if i0 == 0:
        return mesh
    if i0 >= len(mesh.columns) - 1:
        raise MisalignedObservationError("truncation leaves no cells")
    n = len(mesh.offsets)
    nx = len(mesh.columns) - 1
    ny = n - 1
    keep_v = np.arange(i0 * n, len(mesh.vertices))
    old_to_new = np.full(len(mesh.vertices), -1, dtype=np.int64)
    old_to_new[keep_v] = np.arange(len(keep_v))

    # triangles are stored cell by cell, 2 per cell, cells ordered by column
    first_tri = 2 * i0 * ny
    triangles = old_to_new[mesh.triangles[first_tri:]]
    assert (triangles >= 0).all()

    be, bt = mesh.boundary_edges, mesh.boundary_tags
    col_of = lambda v: v // n  # noqa: E731
    keep_e = (col_of(be) >= i0).all(axis=1) & (bt != BoundaryTag.INLET)
    jj = np.arange(ny)
    inlet = np.stack([i0 * n + jj, i0 * n + jj + 1], 1)
    boundary_edges = np.concatenate([inlet, be[keep_e]])
    boundary_tags = np.concatenate([np.full(ny, BoundaryTag.INLET), bt[keep_e]])
    boundary_edges = old_to_new[boundary_edges]

    section_edges, stations = {}, []
    for k in sorted(mesh.section_edges):
        s = mesh.section_stations[k]
        if s > mesh.columns[i0] + _ALIGN_TOL * max(1.0, abs(s)):
            section_edges[len(stations)] = old_to_new[mesh.section_edges[k]]
            stations.append(s)

    parent = keep_v if mesh.parent_vertices is None else mesh.parent_vertices[keep_v]
    assert nx >= i0
    return replace(
        mesh,
        vertices=mesh.vertices[keep_v],
        triangles=triangles,
        boundary_edges=boundary_edges.astype(np.int64),
        boundary_tags=boundary_tags.astype(np.int64),
        section_edges=section_edges,
        section_stations=tuple(stations),
        columns=mesh.columns[i0:],
        parent_vertices=parent,
    )


def truncate(mesh: Mesh, spec: ChannelSpec) -> Mesh:
    if spec.truncation_x is None:
        return mesh
    return truncate_at(mesh, spec.truncation_x)


def check_mesh(mesh: Mesh) -> None:
    """Raise ``MeshError`` if a structural invariant is violated."""
    if (signed_areas(mesh) <= 0).any():
        raise MeshError("nonpositive triangle area")
    tri = mesh.triangles
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if (counts > 2).any():
        raise MeshError("edge shared by more than two triangles")
    boundary = {tuple(x) for x in uniq[counts == 1]}
    tagged = [tuple(x) for x in np.sort(mesh.boundary_edges, axis=1)]
    if len(tagged) != len(set(tagged)) or set(tagged) != boundary:
        raise MeshError("boundary tags do not partition the boundary edges")
    interior = {tuple(x) for x in uniq[counts == 2]}
    for k, edges in mesh.section_edges.items():
        if len(edges) == 0:
            raise MeshError(f"section {k} is empty")
        if not all(tuple(x) in interior for x in np.sort(edges, axis=1)):
            raise MeshError(f"section {k} contains non-interior edges")
        # consecutive edges chain into one polyline
        if not (edges[1:, 0] == edges[:-1, 1]).all():
            raise MeshError(f"section {k} is not a connected polyline")
        wall = set(mesh.edges_with_tag(BoundaryTag.WALL).ravel())
        if edges[0, 0] not in wall or edges[-1, 1] not in wall:
            raise MeshError(f"section {k} does not span wall to wall")
