"""Triangle meshes, ROI extraction, topology checks and mesh-to-mesh resampling.

Meshes are plain numpy containers. All arrays are made read-only on
construction so a mesh can be shared freely between workers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DisconnectedRoi, EmptySource, InvalidMesh, NotADisk, ShapeMismatch


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SignalSeries:
    """Per-vertex time series.

    Parameters
    ----------
    values : array_like, shape (V, T)
        BOLD amplitude per vertex and time step.
    tr_seconds : float
        Sampling interval.
    """

    values: np.ndarray
    tr_seconds: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch(f"signal values must be (V, T), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("signal values must be finite")
        if not self.tr_seconds > 0:
            raise ValueError("tr_seconds must be positive")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "tr_seconds", float(self.tr_seconds))

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]

    def take(self, index) -> "SignalSeries":
        return SignalSeries(self.values[np.asarray(index)], self.tr_seconds)


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle surface with per-vertex region labels.

    Faces are 0-based vertex index triples, counter-clockwise when seen from
    the outward normal.
    """

    vertices: np.ndarray
    faces: np.ndarray
    labels: Optional[np.ndarray] = None
    signals: Optional[SignalSeries] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidMesh(f"vertices must be (V, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise InvalidMesh(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidMesh("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidMesh("degenerate face (repeated vertex index)")
        if self.labels is None:
            labels = np.full(len(v), "", dtype=object)
        else:
            labels = np.asarray(self.labels, dtype=object)
            if labels.shape != (len(v),):
                raise InvalidMesh("labels must have one entry per vertex")
        if self.signals is not None and self.signals.n_vertices != len(v):
            raise ShapeMismatch("signals must have one row per vertex")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "labels", _frozen(labels, dtype=object))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted, shape (E, 2)."""
        return unique_edges(self.faces)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.faces, self.labels, self.signals)


@dataclass(frozen=True)
class RoiPatch:
    """Disk-topology submesh cut out of a parent mesh.

    ``boundary`` is the single boundary loop, counter-clockwise as seen from
    the outward normals (it follows the direction the boundary edges have in
    their faces).
    """

    submesh: SurfaceMesh
    parent_index: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "parent_index", _frozen(self.parent_index, dtype=np.int64))
        object.__setattr__(self, "boundary", _frozen(self.boundary, dtype=np.int64))
        if len(np.unique(self.parent_index)) != len(self.parent_index):
            raise InvalidMesh("parent_index must be injective")
        if len(self.parent_index) != self.submesh.n_vertices:
            raise InvalidMesh("parent_index must have one entry per submesh vertex")

    @property
    def vertices(self) -> np.ndarray:
        return self.submesh.vertices

    @property
    def faces(self) -> np.ndarray:
        return self.submesh.faces

    @property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.submesh.n_vertices, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class TopologyReport:
    n_vertices: int
    n_edges: int
    n_faces: int
    euler: int
    n_boundary_loops: int
    oriented: bool
    manifold: bool
    n_components: int

    @property
    def is_disk(self) -> bool:
        return (
            self.euler == 1
            and self.n_boundary_loops == 1
            and self.oriented
            and self.manifold
            and self.n_components == 1
        )


def unique_edges(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _directed_edges(faces):
    f = np.asarray(faces)
    return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])


def boundary_loops(faces: np.ndarray) -> tuple[list[np.ndarray], bool]:
    """Trace boundary loops of an oriented triangle soup.

    Returns
    -------
    loops : list of ndarray
        Each loop follows the direction of its edges in the faces and starts at
        its smallest vertex index.
    manifold : bool
        False when a boundary vertex has more than one outgoing boundary edge
        (pinched boundary) or an edge is shared by more than two faces.
    """
    d = _directed_edges(faces)
    if len(d) == 0:
        return [], True
    und = np.sort(d, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    manifold = bool(np.all(counts <= 2))
    fwd = {tuple(e) for e in d.tolist()}
    bnd = [e for e in d.tolist() if (e[1], e[0]) not in fwd]
    nxt: dict[int, list[int]] = {}
    for a, b in bnd:
        nxt.setdefault(a, []).append(b)
    if any(len(v) > 1 for v in nxt.values()):
        manifold = False
    loops = []
    remaining = {a: sorted(bs) for a, bs in nxt.items()}
    while remaining:
        start = min(remaining)
        loop = [start]
        cur = start
        while True:
            outs = remaining.get(cur)
            if not outs:
                break
            nb = outs.pop(0)
            if not outs:
                del remaining[cur]
            if nb == start:
                break
            loop.append(nb)
            cur = nb
        loops.append(np.array(loop, dtype=np.int64))
    return loops, manifold


def _is_oriented(faces) -> bool:
    d = _directed_edges(faces)
    if len(d) == 0:
        return True
    _, counts = np.unique(d, axis=0, return_counts=True)
    return bool(np.all(counts == 1))


def _n_components(faces, n_vertices) -> int:
    f = np.asarray(faces)
    used = np.unique(f)
    if len(used) == 0:
        return 0
    d = _directed_edges(f)
    adj = sparse.coo_matrix((np.ones(len(d)), (d[:, 0], d[:, 1])), shape=(n_vertices, n_vertices))
    _, comp = connected_components(adj, directed=False)
    return len(np.unique(comp[used]))


def validate_topology(patch) -> TopologyReport:
    """Combinatorial summary of a patch or mesh. Never raises; failures are flags."""
    mesh = patch.submesh if isinstance(patch, RoiPatch) else patch
    f = mesh.faces
    used = np.unique(f)
    loops, manifold = boundary_loops(f)
    n_e = len(unique_edges(f)) if len(f) else 0
    return TopologyReport(
        n_vertices=int(len(used)),
        n_edges=int(n_e),
        n_faces=int(len(f)),
        euler=int(len(used) - n_e + len(f)),
        n_boundary_loops=len(loops),
        oriented=_is_oriented(f),
        manifold=manifold,
        n_components=_n_components(f, mesh.n_vertices),
    )


def extract_roi(mesh: SurfaceMesh, label_set: Iterable[str]) -> RoiPatch:
    """Cut the faces whose three vertices all carry a tag in ``label_set``.

    Raises
    ------
    DisconnectedRoi
        The induced submesh is empty or has more than one component.
    NotADisk
        The submesh is connected but is not a topological disk.
    """
    labels = set(label_set)
    if not labels:
        raise ValueError("label_set must be nonempty")
    inside = np.isin(mesh.labels, list(labels))
    keep = inside[mesh.faces].all(axis=1)
    faces = mesh.faces[keep]
    if len(faces) == 0:
        raise DisconnectedRoi("no face lies entirely inside the ROI labels")
    parent = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[parent] = np.arange(len(parent))
    sub_faces = remap[faces]
    signals = mesh.signals.take(parent) if mesh.signals is not None else None
    sub = SurfaceMesh(mesh.vertices[parent], sub_faces, mesh.labels[parent], signals)
    report = validate_topology(sub)
    if report.n_components != 1:
        raise DisconnectedRoi(f"ROI has {report.n_components} connected components")
    if not report.is_disk:
        raise NotADisk(
            f"ROI is not a disk: euler={report.euler}, loops={report.n_boundary_loops}, "
            f"manifold={report.manifold}, oriented={report.oriented}"
        )
    loops, _ = boundary_loops(sub_faces)
    return RoiPatch(sub, parent, loops[0])


# ---------------------------------------------------------------------------
# closest-point barycentric resampling


def closest_point_barycentric(p, a, b, c):
    """Vectorized closest point on triangles (a, b, c) to points p.

    All inputs have shape (n, 3). Returns barycentric weights (n, 3) of the
    closest point. Vertex and edge regions return exact 0/1 weights.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    w = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, wa, wb, wc):
        m = mask & ~done
        w[m, 0] = wa[m] if np.ndim(wa) else wa
        w[m, 1] = wb[m] if np.ndim(wb) else wb
        w[m, 2] = wc[m] if np.ndim(wc) else wc
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        v_ab = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v_ab, v_ab, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        w_ac = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w_ac, 0.0, w_ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - w_bc, w_bc)
        denom = 1.0 / (va + vb + vc)
        vv = vb * denom
        ww = vc * denom
        assign(np.ones(n, dtype=bool), 1.0 - vv - ww, vv, ww)
    return w


def barycentric_projection(src: SurfaceMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Closest source face and barycentric weights for every query point.

    Ties in distance are broken by the lowest face index.
    """
    if src.n_faces == 0:
        raise EmptySource("source mesh has no faces")
    pts = np.asarray(points, dtype=np.float64)
    tri = src.vertices[src.faces]
    centroids = tri.mean(axis=1)
    radius = np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2))
    ctree = cKDTree(centroids)
    # an upper bound on the closest distance: the nearest source vertex
    vdist, _ = cKDTree(src.vertices).query(pts)
    face_idx = np.empty(len(pts), dtype=np.int64)
    weights = np.empty((len(pts), 3))
    for i, p in enumerate(pts):
        cand = np.array(sorted(ctree.query_ball_point(p, vdist[i] + radius + 1e-12)), dtype=np.int64)
        t = tri[cand]
        w = closest_point_barycentric(np.broadcast_to(p, (len(cand), 3)), t[:, 0], t[:, 1], t[:, 2])
        q = np.einsum("ij,ijk->ik", w, t)
        d2 = np.sum((q - p) ** 2, axis=1)
        k = int(np.argmin(d2))  # first minimum -> lowest face index among ties
        face_idx[i] = cand[k]
        weights[i] = w[k]
    return face_idx, weights


def resample_operator(src: SurfaceMesh, dst: SurfaceMesh) -> sparse.csr_matrix:
    """Sparse (V_dst, V_src) matrix mapping source vertex values to destination vertices."""
    face_idx, w = barycentric_projection(src, dst.vertices)
    rows = np.repeat(np.arange(dst.n_vertices), 3)
    cols = src.faces[face_idx].ravel()
    op = sparse.coo_matrix((w.ravel(), (rows, cols)), shape=(dst.n_vertices, src.n_vertices))
    return op.tocsr()


def resample_between_meshes(src: SurfaceMesh, signals: SignalSeries, dst: SurfaceMesh) -> SignalSeries:
    """Transfer a per-vertex series from ``src`` to ``dst`` by closest-point projection.

    Each destination vertex takes the barycentric interpolation of the source
    face closest to it. The number of time steps is preserved.
    """
    if src.n_vertices == 0 or src.n_faces == 0:
        raise EmptySource("source mesh is empty")
    if signals.n_vertices != src.n_vertices:
        raise ShapeMismatch("signals do not match the source mesh")
    face_idx, w = barycentric_projection(src, dst.vertices)
    corners = src.faces[face_idx]
    vals = signals.values
    out = (
        w[:, 0:1] * vals[corners[:, 0]]
        + w[:, 1:2] * vals[corners[:, 1]]
        + w[:, 2:3] * vals[corners[:, 2]]
    )
    return SignalSeries(out, signals.tr_seconds)


# ---------------------------------------------------------------------------
# mesh generators used by the synthetic dataset and the tests


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> SurfaceMesh:
    """Subdivided icosahedron with outward-facing counter-clockwise faces.

    Subdivision levels are nested: the vertices of level ``k`` are the first
    vertices of level ``k + 1``.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = list(faces)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return SurfaceMesh(np.array(v) * radius, np.array(f))


def bumpy(mesh: SurfaceMesh, amplitude: float = 0.08, frequency: int = 3, seed: int = 0) -> SurfaceMesh:
    """Radially perturb a sphere-like mesh with a smooth random field.

    The perturbation depends only on the vertex direction, so nested meshes
    stay nested.
    """
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(frequency * 2, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=len(dirs))
    u = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    field_ = np.sin(frequency * (u @ dirs.T) + phase).mean(axis=1)
    return mesh.with_vertices(mesh.vertices * (1.0 + amplitude * field_)[:, None])


def hemisphere_patch(subdivisions: int = 3, zmin: float = 1e-9, label: str = "roi") -> RoiPatch:
    """Upper cap (z > zmin) of an icosphere as a disk patch."""
    sphere = icosphere(subdivisions)
    labels = np.where(sphere.vertices[:, 2] > zmin, label, "other")
    return extract_roi(SurfaceMesh(sphere.vertices, sphere.faces, labels), {label})


def planar_grid(n: int, size: float = 1.0) -> SurfaceMesh:
    """Regular (n+1) x (n+1) grid on [0, size]^2 in the z=0 plane, split into triangles."""
    xs = np.linspace(0.0, size, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return SurfaceMesh(verts, faces)


def disk_mesh(n_rings: int = 8, n_boundary: int = 48) -> SurfaceMesh:
    """Delaunay triangulation of the unit disk with equally spaced boundary vertices.

    Vertex 0 is the boundary vertex at angle 0. Rings are concentric with
    point counts proportional to their radius.
    """
    from scipy.spatial import Delaunay

    pts = []
    for k in range(n_rings, 0, -1):
        r = k / n_rings
        m = max(6, int(round(n_boundary * r)))
        ang = 2 * np.pi * np.arange(m) / m + (0.0 if k == n_rings else 0.5 * np.pi / m * (k % 2))
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
    pts.append(np.zeros((1, 2)))
    xy = np.concatenate(pts)
    tri = Delaunay(xy).simplices
    p = xy[tri]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (
        p[:, 2, 0] - p[:, 0, 0]
    )
    tri = np.where((cross < 0)[:, None], tri[:, [0, 2, 1]], tri)
    return SurfaceMesh(np.column_stack([xy, np.zeros(len(xy))]), tri)


def as_patch(mesh: SurfaceMesh) -> RoiPatch:
    """Wrap a whole disk-topology mesh as a patch (identity parent index)."""
    labels = np.full(mesh.n_vertices, "roi", dtype=object)
    sub = SurfaceMesh(mesh.vertices, mesh.faces, labels, mesh.signals)
    return extract_roi(sub, {"roi"})


def _lift(xy, south=False):
    r = np.minimum(np.linalg.norm(xy, axis=1), 1.0)
    phi = np.arctan2(xy[:, 1], xy[:, 0])
    th = r * np.pi / 2
    if south:
        th = np.pi - th
    return np.column_stack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)])


def lifted_hemisphere(n_rings: int = 8, n_boundary: int = 48, stretch=(1.0, 1.0, 1.0)) -> RoiPatch:
    """Upper unit hemisphere built by lifting :func:`disk_mesh` (equal-angle lift).

    The boundary loop is the equator. ``stretch`` scales the axes, e.g.
    ``(1.5, 1, 1)`` gives a half-ellipsoid.
    """
    d = disk_mesh(n_rings, n_boundary)
    v = _lift(d.vertices[:, :2]) * np.asarray(stretch, dtype=float)
    return as_patch(SurfaceMesh(v, d.faces))


def lifted_sphere(n_rings: int = 8, n_boundary: int = 48) -> SurfaceMesh:
    """Closed sphere from two lifted disk meshes glued along the equator.

    The northern half occupies the first vertices; its first ``n_boundary``
    vertices are the equator, shared with the southern half.
    """
    d = disk_mesh(n_rings, n_boundary)
    xy = d.vertices[:, :2]
    nv = len(xy)
    north = _lift(xy)
    south = _lift(xy[n_boundary:], south=True)
    remap = np.concatenate([np.arange(n_boundary), nv + np.arange(nv - n_boundary)])
    faces = np.concatenate([d.faces, remap[d.faces][:, ::-1]])
    return SurfaceMesh(np.concatenate([north, south]), faces)
