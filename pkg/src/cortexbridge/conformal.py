"""Disk conformal parameterization of ROI patches.

The map is built in two stages. A harmonic map onto the unit disk is obtained
from the cotangent Laplacian with the boundary loop pinned to the circle by
arc length. A refinement stage then lets the boundary slide along the circle
while minimizing the least-squares conformal energy, which drives the per-face
Beltrami coefficient towards zero.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import BijectivityLost, DegenerateFace, SolverFailure
from .mesh import RoiPatch

logger = logging.getLogger(__name__)

COT_CLAMP = 1e-8
DAMPING = 0.5


@dataclass(frozen=True)
class ConformalOptions:
    eps_mu: float = 0.1
    max_refine_iters: int = 20
    solver_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.eps_mu < 1.0:
            raise ValueError("eps_mu must lie in (0, 1)")
        if self.max_refine_iters < 0:
            raise ValueError("max_refine_iters must be >= 0")


@dataclass(frozen=True)
class DiskParameterization:
    """Per-vertex disk coordinates of a patch.

    Attributes
    ----------
    uv : ndarray, shape (V, 2)
    mu : ndarray, shape (F,), complex
        Beltrami coefficient of each face.
    energy : float
        Dirichlet energy of the map (cotangent weights).
    info : dict
        Stage diagnostics: ``iterations``, ``mu_history``, ``converged``,
        ``n_flipped``.
    """

    uv: np.ndarray
    mu: np.ndarray
    energy: float
    info: dict = field(default_factory=dict, compare=False)

    @property
    def mu_sup(self) -> float:
        return float(np.max(np.abs(self.mu))) if len(self.mu) else 0.0

    def n_flipped(self, faces) -> int:
        return int(np.sum(signed_areas(self.uv, faces) <= 0))


def signed_areas(uv, faces) -> np.ndarray:
    p = np.asarray(uv)[np.asarray(faces)]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def flatten_faces(vertices, faces) -> np.ndarray:
    """Isometric 2-D copy of every 3-D triangle, shape (F, 3, 2), counter-clockwise.

    The in-plane frame of a face is the global x axis projected onto the face
    plane (y axis when x is nearly normal to it), so planar patches in z=0 keep
    their own coordinates and Beltrami phases refer to a fixed direction.
    """
    p = np.asarray(vertices, dtype=float)[np.asarray(faces)]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(nn > 0, nn, 1.0)
    ref = np.tile([1.0, 0.0, 0.0], (len(p), 1))
    ref[np.abs(n[:, 0]) > 0.9] = [0.0, 1.0, 0.0]
    t1 = ref - np.einsum("ij,ij->i", ref, n)[:, None] * n
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    d = p - p[:, :1]
    return np.stack([np.einsum("fkj,fj->fk", d, t1), np.einsum("fkj,fj->fk", d, t2)], axis=-1)


def cotangent_weights(vertices, faces, clamp: float = COT_CLAMP) -> sparse.csr_matrix:
    """Symmetric matrix of edge weights 0.5 * (cot a + cot b), clamped from below."""
    v = np.asarray(vertices)
    f = np.asarray(faces)
    n = len(v)
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        a = v[i] - v[o]
        b = v[j] - v[o]
        cross = np.cross(a, b)
        cross_n = np.linalg.norm(cross, axis=1) if cross.ndim == 2 else np.abs(cross)
        cot = np.einsum("ij,ij->i", a, b) / np.maximum(cross_n, 1e-300)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    W.sum_duplicates()
    W.data = np.maximum(W.data, clamp)
    return W


def dirichlet_energy(W: sparse.spmatrix, uv) -> float:
    Wc = sparse.triu(W, k=1).tocoo()
    d = uv[Wc.row] - uv[Wc.col]
    return float(np.sum(Wc.data * np.sum(d * d, axis=1)))


def _beltrami(flat, uv_tri):
    """Beltrami coefficients without degeneracy checks; orientation reversals give |mu| >= 1."""
    q1 = flat[:, 1] - flat[:, 0]
    q2 = flat[:, 2] - flat[:, 0]
    w1 = uv_tri[:, 1] - uv_tri[:, 0]
    w2 = uv_tri[:, 2] - uv_tri[:, 0]
    det = q1[:, 0] * q2[:, 1] - q1[:, 1] * q2[:, 0]
    # J = [w1 w2] @ inv([q1 q2])
    inv00 = q2[:, 1] / det
    inv01 = -q2[:, 0] / det
    inv10 = -q1[:, 1] / det
    inv11 = q1[:, 0] / det
    a = w1[:, 0] * inv00 + w2[:, 0] * inv10  # du/dx
    b = w1[:, 0] * inv01 + w2[:, 0] * inv11  # du/dy
    c = w1[:, 1] * inv00 + w2[:, 1] * inv10  # dv/dx
    d = w1[:, 1] * inv01 + w2[:, 1] * inv11  # dv/dy
    fz = 0.5 * ((a + d) + 1j * (c - b))
    fzbar = 0.5 * ((a - d) + 1j * (c + b))
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = fzbar / fz
    mu = np.where(fz == 0, complex(np.inf, 0.0), mu)
    return mu


def beltrami_coefficient(patch: RoiPatch, param) -> np.ndarray:
    """Per-face complex Beltrami coefficient of the piecewise-linear map patch -> disk.

    ``param`` is a :class:`DiskParameterization` or a (V, 2) array. Faces that
    reverse orientation get ``|mu| > 1`` (infinite for a pure reflection).
    """
    uv = param.uv if isinstance(param, DiskParameterization) else np.asarray(param, dtype=float)
    if uv.shape != (patch.submesh.n_vertices, 2):
        raise ValueError("parameterization does not cover the patch vertices")
    flat = flatten_faces(patch.vertices, patch.faces)
    area3 = 0.5 * np.abs(
        (flat[:, 1, 0] - flat[:, 0, 0]) * (flat[:, 2, 1] - flat[:, 0, 1])
        - (flat[:, 1, 1] - flat[:, 0, 1]) * (flat[:, 2, 0] - flat[:, 0, 0])
    )
    area2 = signed_areas(uv, patch.faces)
    bad = np.flatnonzero((area3 <= 0) | (area2 == 0))
    if len(bad):
        raise DegenerateFace(f"{len(bad)} face(s) with zero area, first index {bad[0]}")
    return _beltrami(flat, uv[patch.faces])


def _boundary_angles(patch: RoiPatch) -> np.ndarray:
    b = patch.boundary
    p = patch.vertices[b]
    seg = np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    return 2 * np.pi * s / seg.sum()


def harmonic_disk_map(patch: RoiPatch, opts: ConformalOptions = ConformalOptions()) -> DiskParameterization:
    """Harmonic map of the patch onto the unit disk.

    The boundary loop is placed on the unit circle proportionally to its
    cumulative arc length (first boundary vertex at angle 0) and the interior
    solves the cotangent Laplace equation.
    """
    n = patch.submesh.n_vertices
    W = cotangent_weights(patch.vertices, patch.faces)
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    b = patch.boundary
    inner = patch.interior
    theta = _boundary_angles(patch)
    uv = np.zeros((n, 2))
    uv[b, 0] = np.cos(theta)
    uv[b, 1] = np.sin(theta)
    if len(inner):
        L = L.tocsr()
        A = L[inner][:, inner].tocsc()
        rhs = -(L[inner][:, b] @ uv[b])
        with warnings.catch_warnings():
            warnings.simplefilter("error", sparse.linalg.MatrixRankWarning)
            try:
                x = spsolve(A, rhs)
            except (sparse.linalg.MatrixRankWarning, RuntimeError) as exc:
                raise SolverFailure(f"Laplace solve failed: {exc}") from exc
        x = np.asarray(x).reshape(len(inner), 2)
        if not np.all(np.isfinite(x)):
            raise SolverFailure("Laplace solve produced non-finite values")
        res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if res > opts.solver_tol:
            raise SolverFailure(f"Laplace residual {res:.3e} exceeds tolerance {opts.solver_tol:.1e}")
        uv[inner] = x
    flat = flatten_faces(patch.vertices, patch.faces)
    mu = _beltrami(flat, uv[patch.faces])
    n_flip = int(np.sum(signed_areas(uv, patch.faces) <= 0))
    if n_flip:
        warnings.warn(f"harmonic map has {n_flip} flipped face(s)", stacklevel=2)
    info = {"stage": "harmonic", "n_flipped": n_flip, "iterations": 0}
    return DiskParameterization(uv, mu, dirichlet_energy(W, uv), info)


# ---------------------------------------------------------------------------
# refinement


def _dzbar_operator(flat, faces, n_vertices) -> sparse.csr_matrix:
    """Real (2F, 2V) operator mapping stacked [u; v] to sqrt(area) * (Re, Im) of f_zbar per face."""
    q = flat
    area = 0.5 * (
        (q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1])
        - (q[:, 1, 1] - q[:, 0, 1]) * (q[:, 2, 0] - q[:, 0, 0])
    )
    F = len(faces)
    rows, cols, vals = [], [], []
    s = np.sqrt(area)
    for k in range(3):
        # gradient of the hat function of corner k: rot90(opposite edge) / (2 area)
        e = q[:, (k + 2) % 3] - q[:, (k + 1) % 3]
        gx = -e[:, 1] / (2 * area)
        gy = e[:, 0] / (2 * area)
        a = 0.5 * gx * s
        bb = 0.5 * gy * s
        vi = faces[:, k]
        # (a + i b)(u + i v) = (a u - b v) + i (b u + a v)
        rows += [np.arange(F), np.arange(F), F + np.arange(F), F + np.arange(F)]
        cols += [vi, n_vertices + vi, vi, n_vertices + vi]
        vals += [a, -bb, bb, a]
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * F, 2 * n_vertices)
    ).tocsr()


def _sliding_conformal_target(patch, uv, D, pins):
    """Minimize the conformal energy with boundary vertices sliding along their tangents."""
    n = len(uv)
    b = patch.boundary
    inner = patch.interior
    pinned = b[pins]
    sliding = np.setdiff1d(b, pinned, assume_unique=False)
    ni, ns = len(inner), len(sliding)
    # x = B y + x0, y = [u_inner, v_inner, s_sliding]
    rows = np.concatenate([inner, n + inner, sliding, n + sliding])
    cols = np.concatenate([np.arange(ni), ni + np.arange(ni), 2 * ni + np.arange(ns), 2 * ni + np.arange(ns)])
    theta = np.arctan2(uv[sliding, 1], uv[sliding, 0])
    vals = np.concatenate([np.ones(ni), np.ones(ni), -np.sin(theta), np.cos(theta)])
    B = sparse.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * ni + ns)).tocsc()
    x0 = np.zeros(2 * n)
    x0[b] = uv[b, 0]
    x0[n + b] = uv[b, 1]
    DB = D @ B
    A = (DB.T @ DB).tocsc()
    rhs = -(DB.T @ (D @ x0))
    y = spsolve(A, rhs)
    if not np.all(np.isfinite(y)):
        raise SolverFailure("conformal refinement solve produced non-finite values")
    x = B @ y + x0
    return np.column_stack([x[:n], x[n:]])


def _project_boundary(uv, boundary):
    out = uv.copy()
    r = np.linalg.norm(out[boundary], axis=1, keepdims=True)
    out[boundary] = out[boundary] / r
    return out


def mobius_normalize(uv, faces, weights, first_boundary, iters: int = 100) -> np.ndarray:
    """Disk automorphism sending the weighted face-centroid to 0, then a rotation
    placing ``first_boundary`` at angle 0."""
    z = uv[:, 0] + 1j * uv[:, 1]
    w = np.asarray(weights) / np.sum(weights)
    for _ in range(iters):
        c = np.sum(w * z[faces].mean(axis=1))
        if abs(c) < 1e-13:
            break
        z = (z - c) / (1 - np.conj(c) * z)
    z = z * np.exp(-1j * np.angle(z[first_boundary]))
    return np.column_stack([z.real, z.imag])


def refine_conformal(
    patch: RoiPatch, param: DiskParameterization, opts: ConformalOptions = ConformalOptions()
) -> DiskParameterization:
    """Iteratively reduce the Beltrami sup-norm of a disk map.

    Each iteration solves for the least-squares conformal map whose boundary
    slides along the circle (three boundary vertices held as gauge), moves the
    current map half way towards it, re-projects the boundary onto the circle
    and applies the Moebius normalization. Steps that would flip a face or
    raise the sup-norm are halved until accepted; when no step is accepted the
    iteration stops. ``info['converged']`` reports whether ``eps_mu`` was met.
    """
    faces = patch.faces
    flat = flatten_faces(patch.vertices, faces)
    uv = np.array(param.uv, dtype=float)
    mu = _beltrami(flat, uv[faces])
    sup = float(np.max(np.abs(mu)))
    history = [sup]
    if sup <= opts.eps_mu:
        info = dict(param.info)
        info.update(stage="refined", iterations=0, mu_history=history, converged=True)
        return replace(param, info=info)

    W = cotangent_weights(patch.vertices, faces)
    D = _dzbar_operator(flat, faces, len(uv))
    area3 = patch.submesh.face_areas()
    nb = len(patch.boundary)
    pins = np.unique(np.array([0, nb // 3, (2 * nb) // 3]))
    iterations = 0
    for _ in range(opts.max_refine_iters):
        target = _sliding_conformal_target(patch, uv, D, pins)
        step = DAMPING
        accepted = False
        while step >= DAMPING / 64:
            cand = _project_boundary(uv + step * (target - uv), patch.boundary)
            cand = mobius_normalize(cand, faces, area3, patch.boundary[0])
            if np.all(signed_areas(cand, faces) > 0):
                cmu = _beltrami(flat, cand[faces])
                csup = float(np.max(np.abs(cmu)))
                if csup <= sup:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            logger.info("refinement stalled at sup|mu|=%.4g", sup)
            break
        uv, mu, sup = cand, cmu, csup
        iterations += 1
        history.append(sup)
        if sup <= opts.eps_mu:
            break

    if np.any(signed_areas(uv, faces) <= 0):
        raise BijectivityLost("refined map has flipped faces")
    info = {
        "stage": "refined",
        "iterations": iterations,
        "mu_history": history,
        "converged": bool(sup <= opts.eps_mu),
        "n_flipped": 0,
    }
    if not info["converged"]:
        logger.warning("refinement reached sup|mu|=%.4g > eps_mu=%.3g", sup, opts.eps_mu)
    return DiskParameterization(uv, mu, dirichlet_energy(W, uv), info)


def conformal_disk_map(patch: RoiPatch, opts: ConformalOptions = ConformalOptions()) -> DiskParameterization:
    """Harmonic map followed by conformal refinement."""
    return refine_conformal(patch, harmonic_disk_map(patch, opts), opts)
