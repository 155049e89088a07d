import numpy as np
import pytest
from scipy.spatial import Delaunay

from cortexbridge.conformal import (
    ConformalOptions,
    beltrami_coefficient,
    harmonic_disk_map,
    mobius_normalize,
    refine_conformal,
    signed_areas,
)
from cortexbridge.errors import DegenerateFace
from cortexbridge.mesh import SurfaceMesh, as_patch, disk_mesh, extract_roi, lifted_hemisphere, planar_grid


def gradient_energy(vertices, faces, uv):
    """Sum over faces of area * |grad u|^2 + |grad v|^2, computed per triangle."""
    total = 0.0
    for f in faces:
        p = vertices[f]
        e1, e2 = p[1] - p[0], p[2] - p[0]
        n = np.cross(e1, e2)
        area = 0.5 * np.linalg.norm(n)
        # gradient of the linear interpolant in the triangle plane
        G = np.array([e1, e2])
        for k in range(2):
            d = np.array([uv[f[1], k] - uv[f[0], k], uv[f[2], k] - uv[f[0], k]])
            g = np.linalg.lstsq(G, d, rcond=None)[0]
            total += area * g @ g
    return total


@pytest.fixture(scope="module")
def hemi_ellipsoid():
    return lifted_hemisphere(8, 48, stretch=(1.5, 1.0, 1.0))


def test_flat_disk_is_fixed():
    mesh = disk_mesh(6, 36)
    patch = as_patch(mesh)
    h = harmonic_disk_map(patch)
    np.testing.assert_allclose(h.uv, mesh.vertices[:, :2], atol=1e-6)
    assert h.mu_sup <= 1e-6


def test_square_grid_energy():
    g = planar_grid(100, 2.0)
    v = g.vertices - [1.0, 1.0, 0.0]
    labels = np.where(np.linalg.norm(v[:, :2], axis=1) <= 1.0, "roi", "other")
    patch = extract_roi(SurfaceMesh(v, g.faces, labels), {"roi"})
    h = harmonic_disk_map(patch)
    direct = gradient_energy(patch.vertices, patch.faces, h.uv)
    assert abs(h.energy - direct) <= 1e-6 * direct
    # a conformal map onto the unit disk has Dirichlet energy 2 * pi
    assert abs(h.energy - 2 * np.pi) <= 0.01 * 2 * np.pi


def test_hemisphere_boundary_on_circle(hemi_ellipsoid):
    for patch in (lifted_hemisphere(8, 48), hemi_ellipsoid):
        h = harmonic_disk_map(patch)
        r = np.linalg.norm(h.uv[patch.boundary], axis=1)
        assert np.max(np.abs(r - 1.0)) <= 1e-9
        assert np.all(np.linalg.norm(h.uv[patch.interior], axis=1) < 1.0)
        assert h.n_flipped(patch.faces) == 0


def test_boundary_arc_length_placement():
    patch = lifted_hemisphere(4, 24, stretch=(2.0, 1.0, 1.0))
    h = harmonic_disk_map(patch)
    p = patch.vertices[patch.boundary]
    seg = np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)
    ang = np.unwrap(np.arctan2(h.uv[patch.boundary, 1], h.uv[patch.boundary, 0]))
    np.testing.assert_allclose(np.diff(ang), 2 * np.pi * seg[:-1] / seg.sum(), atol=1e-12)
    assert ang[0] == pytest.approx(0.0, abs=1e-15)


def test_beltrami_identity_is_zero():
    patch = as_patch(planar_grid(5))
    mu = beltrami_coefficient(patch, patch.vertices[:, :2])
    assert np.max(np.abs(mu)) <= 1e-12


def test_beltrami_anisotropic_scaling():
    patch = as_patch(planar_grid(5))
    uv = patch.vertices[:, :2] * [2.0, 1.0]
    mu = beltrami_coefficient(patch, uv)
    np.testing.assert_allclose(np.abs(mu), 1.0 / 3.0, atol=1e-10)


def test_beltrami_general_linear_map():
    """mu = (a - d + i(c + b)) / (a + d + i(c - b)) for uv = J @ xy."""
    rng = np.random.default_rng(3)
    patch = as_patch(planar_grid(3))
    a, b, c, d = 1.3, 0.4, -0.2, 0.9
    uv = patch.vertices[:, :2] @ np.array([[a, b], [c, d]]).T
    mu = beltrami_coefficient(patch, uv)
    expected = (a - d + 1j * (c + b)) / (a + d + 1j * (c - b))
    np.testing.assert_allclose(mu, expected, atol=1e-12)
    # |mu| does not depend on how the patch sits in 3-D
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    rotated = as_patch(SurfaceMesh(patch.vertices @ q.T, patch.faces))
    np.testing.assert_allclose(np.abs(beltrami_coefficient(rotated, uv)), abs(expected), atol=1e-12)


def test_reflected_triangle_flagged():
    patch = as_patch(SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    mu = beltrami_coefficient(patch, np.array([[0, 0], [2, 0], [0, -1.0]]))
    assert np.abs(mu[0]) > 1


def test_degenerate_face_raises():
    patch = as_patch(SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    with pytest.raises(DegenerateFace):
        beltrami_coefficient(patch, np.array([[0, 0], [1, 0], [2, 0.0]]))


def test_refine_fixed_point():
    patch = as_patch(disk_mesh(5, 30))
    h = harmonic_disk_map(patch)
    r = refine_conformal(patch, h, ConformalOptions(eps_mu=0.1))
    assert r.info["iterations"] == 0
    assert np.array_equal(r.uv, h.uv)


def test_refine_hemisphere(hemi_ellipsoid):
    patch = hemi_ellipsoid
    opts = ConformalOptions(eps_mu=0.1)
    h = harmonic_disk_map(patch, opts)
    r = refine_conformal(patch, h, opts)
    assert h.mu_sup > 0.1
    assert r.mu_sup <= 0.1
    assert r.mu_sup < h.mu_sup
    assert r.info["converged"]
    hist = r.info["mu_history"]
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert r.n_flipped(patch.faces) == 0
    rad = np.linalg.norm(r.uv[patch.boundary], axis=1)
    assert np.max(np.abs(rad - 1.0)) <= 1e-9
    np.testing.assert_allclose(np.abs(beltrami_coefficient(patch, r)), np.abs(r.mu), atol=1e-14)


def test_refine_normalization(hemi_ellipsoid):
    patch = hemi_ellipsoid
    r = refine_conformal(patch, harmonic_disk_map(patch))
    z = r.uv[:, 0] + 1j * r.uv[:, 1]
    w = patch.submesh.face_areas()
    c = np.sum(w * z[patch.faces].mean(axis=1)) / w.sum()
    assert abs(c) < 1e-10
    assert abs(np.angle(z[patch.boundary[0]])) < 1e-12


def test_mobius_normalize_keeps_circle():
    patch = as_patch(disk_mesh(5, 30))
    uv = mobius_normalize(patch.vertices[:, :2] * 1.0, patch.faces, np.ones(patch.submesh.n_faces), 3)
    np.testing.assert_allclose(np.linalg.norm(uv[patch.boundary], axis=1), 1.0, atol=1e-12)


def sliver_hemisphere(seed):
    rng = np.random.default_rng(seed)
    nb = 40
    ang = 2 * np.pi * np.arange(nb) / nb
    r = np.sqrt(rng.uniform(0, 0.9, size=120))
    t = rng.uniform(0, 2 * np.pi, size=120)
    xy = np.concatenate([np.column_stack([np.cos(ang), np.sin(ang)]), np.column_stack([r * np.cos(t), r * np.sin(t)])])
    tri = Delaunay(xy).simplices
    sa = signed_areas(xy, tri)
    tri = np.where((sa < 0)[:, None], tri[:, [0, 2, 1]], tri)
    rr = np.linalg.norm(xy, axis=1)
    th = rr * np.pi / 2
    phi = np.arctan2(xy[:, 1], xy[:, 0])
    v = np.column_stack([1.3 * np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)])
    return as_patch(SurfaceMesh(v, tri))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_refine_sliver_mesh(seed):
    patch = sliver_hemisphere(seed)
    h = harmonic_disk_map(patch)
    r = refine_conformal(patch, h)
    assert r.n_flipped(patch.faces) == 0
    assert r.mu_sup <= h.mu_sup
    assert r.info["converged"] or r.info["iterations"] <= ConformalOptions().max_refine_iters
    assert np.isfinite(r.mu_sup)


def test_resolution_stability():
    opts = ConformalOptions(eps_mu=1e-3, max_refine_iters=40)
    sups = []
    for n_rings, n_b in [(4, 24), (8, 48), (16, 96)]:
        patch = lifted_hemisphere(n_rings, n_b, stretch=(1.5, 1.0, 1.0))
        sups.append(refine_conformal(patch, harmonic_disk_map(patch, opts), opts).mu_sup)
    assert sups[0] >= sups[1] >= sups[2]
