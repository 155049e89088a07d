"""Brain disks: per-time-step rasterization of ROI signals on the unit disk.

Pixel ``(i, j)`` of an ``R x R`` disk has its center at

    u = -1 + (j + 0.5) * 2 / R,    v = -1 + (i + 0.5) * 2 / R,

so row 0 is the bottom of the disk (smallest v). A pixel is *masked in* when
its center lies inside the unit circle and inside some parameter triangle;
shared edges go to the lowest face index. Unmasked pixels hold 0.

Values are normalized per series: the 1st and 99th percentiles of all
vertex values of the series are mapped to -1 and 1 and the result is
clipped to [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from .conformal import DiskParameterization, signed_areas
from .errors import NotBijective, ShapeMismatch
from .mesh import RoiPatch, SignalSeries

NORM_POLICY = "per-series-p1-p99"
_INSIDE_TOL = 1e-12


@dataclass(frozen=True)
class Normalization:
    """Affine map ``x -> (x - offset) / scale``."""

    offset: float
    scale: float

    @classmethod
    def fit(cls, values) -> "Normalization":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return cls(0.0, 1.0)
        p1, p99 = np.percentile(v, [1.0, 99.0])
        scale = 0.5 * (p99 - p1)
        return cls(float(0.5 * (p1 + p99)), float(scale) if scale > 0 else 1.0)

    def apply(self, x) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=np.float64) - self.offset) / self.scale, -1.0, 1.0)

    def invert(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.scale + self.offset


@dataclass(frozen=True)
class BrainDisk:
    grid: np.ndarray
    mask: np.ndarray
    norm: Normalization
    time_index: int = 0

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]


class DiskSeries:
    """Stack of brain disks sharing one mask and one normalization.

    Parameters
    ----------
    grids : array_like, shape (T, H, W)
    mask : array_like of bool, shape (H, W)
    norm : Normalization
    """

    def __init__(self, grids, mask, norm: Normalization, policy: str = NORM_POLICY):
        g = np.array(grids, dtype=np.float64)
        m = np.array(mask, dtype=bool)
        if g.ndim != 3 or g.shape[1:] != m.shape:
            raise ShapeMismatch(f"grids {g.shape} do not match mask {m.shape}")
        g[:, ~m] = 0.0
        g.setflags(write=False)
        m.setflags(write=False)
        self.grids = g
        self.mask = m
        self.norm = norm
        self.policy = policy

    def __len__(self) -> int:
        return self.grids.shape[0]

    def __getitem__(self, t) -> BrainDisk:
        return BrainDisk(self.grids[t], self.mask, self.norm, int(t))

    @property
    def disks(self) -> list[BrainDisk]:
        return [self[t] for t in range(len(self))]

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def with_grids(self, grids, norm: Optional[Normalization] = None) -> "DiskSeries":
        return DiskSeries(grids, self.mask, self.norm if norm is None else norm, self.policy)

    def vertex_values(self, param: DiskParameterization) -> tuple[np.ndarray, int]:
        """Resample every disk back to vertices; returns ``(V x T values, n_fallback)``."""
        plan = SamplePlan(param.uv, self.mask)
        return self.norm.invert(plan.apply(self.grids.reshape(len(self), -1).T)), plan.n_fallback


def pixel_centers(resolution: int) -> np.ndarray:
    c = -1.0 + (np.arange(resolution) + 0.5) * 2.0 / resolution
    return c


class RasterPlan:
    """Sparse pixel-by-vertex barycentric operator for one parameterization.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix, shape (R*R, V)
    mask : ndarray of bool, shape (R, R)
    face_of_pixel : ndarray of int, shape (R, R), -1 where unmasked
    """

    def __init__(self, uv, faces, resolution: int):
        uv = np.asarray(uv, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        if np.any(signed_areas(uv, faces) <= 0):
            raise NotBijective("parameterization has flipped or degenerate faces")
        r = int(resolution)
        step = 2.0 / r
        tri = uv[faces]
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        # candidate pixel ranges per face from the bounding box
        j0 = np.clip(np.ceil((lo[:, 0] + 1.0) / step - 0.5 - 1e-9), 0, r).astype(np.int64)
        j1 = np.clip(np.floor((hi[:, 0] + 1.0) / step - 0.5 + 1e-9), -1, r - 1).astype(np.int64)
        i0 = np.clip(np.ceil((lo[:, 1] + 1.0) / step - 0.5 - 1e-9), 0, r).astype(np.int64)
        i1 = np.clip(np.floor((hi[:, 1] + 1.0) / step - 0.5 + 1e-9), -1, r - 1).astype(np.int64)
        nj = np.maximum(j1 - j0 + 1, 0)
        ni = np.maximum(i1 - i0 + 1, 0)
        counts = ni * nj
        fidx = np.repeat(np.arange(len(faces)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ii = i0[fidx] + local // nj[fidx]
        jj = j0[fidx] + local % nj[fidx]
        centers = pixel_centers(r)
        p = np.column_stack([centers[jj], centers[ii]])
        a, b, c = tri[fidx, 0], tri[fidx, 1], tri[fidx, 2]
        area = _cross(b - a, c - a)
        wa = _cross(b - p, c - p) / area
        wb = _cross(c - p, a - p) / area
        wc = 1.0 - wa - wb
        inside = (wa >= -_INSIDE_TOL) & (wb >= -_INSIDE_TOL) & (wc >= -_INSIDE_TOL)
        inside &= np.einsum("ij,ij->i", p, p) <= 1.0
        pix = (ii * r + jj)[inside]
        fsel = fidx[inside]
        w = np.column_stack([wa, wb, wc])[inside]
        # lowest face index wins on shared edges and vertices
        order = np.lexsort((fsel, pix))
        pix, fsel, w = pix[order], fsel[order], w[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, fsel, w = pix[first], fsel[first], w[first]
        self.resolution = r
        self.n_vertices = len(uv)
        self.matrix = sparse.csr_matrix(
            (w.ravel(), (np.repeat(pix, 3), faces[fsel].ravel())), shape=(r * r, len(uv))
        )
        self.matrix.sum_duplicates()
        mask = np.zeros(r * r, dtype=bool)
        mask[pix] = True
        fop = np.full(r * r, -1, dtype=np.int64)
        fop[pix] = fsel
        self.mask = mask.reshape(r, r)
        self.face_of_pixel = fop.reshape(r, r)

    def apply(self, values) -> np.ndarray:
        """Linear rasterization of ``(V,)`` or ``(V, T)`` values to ``(R, R)`` or ``(T, R, R)``."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape[0] != self.n_vertices:
            raise ShapeMismatch(f"expected {self.n_vertices} vertex values, got {v.shape[0]}")
        out = self.matrix @ v
        r = self.resolution
        return out.reshape(r, r) if v.ndim == 1 else out.T.reshape(-1, r, r)


def _cross(a, b):
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


class SamplePlan:
    """Mask-aware bilinear sampling of disk grids at vertex (u, v) positions.

    Bilinear weights of unmasked neighbours are dropped and the rest
    renormalized. A vertex with no masked neighbour takes the value of the
    nearest masked pixel center. ``n_fallback`` counts the vertices that had
    at least one unmasked neighbour.
    """

    def __init__(self, uv, mask):
        uv = np.asarray(uv, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        h, w = mask.shape
        x = np.clip((uv[:, 0] + 1.0) * w / 2.0 - 0.5, 0.0, w - 1.0)
        y = np.clip((uv[:, 1] + 1.0) * h / 2.0 - 0.5, 0.0, h - 1.0)
        x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
        y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
        wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
        m = mask.ravel()[cols]
        touched = (wts > 0) & ~m
        wts = np.where(m, wts, 0.0)
        tot = wts.sum(axis=1)
        ok = tot > 0
        wts[ok] /= tot[ok, None]
        bad = np.flatnonzero(~ok)
        if len(bad):
            masked = np.flatnonzero(mask.ravel())
            if len(masked) == 0:
                raise ShapeMismatch("disk mask is empty")
            cy, cx = np.divmod(masked, w)
            pc = np.column_stack([pixel_centers(w)[cx], pixel_centers(h)[cy]])
            d = ((uv[bad, None, :] - pc[None]) ** 2).sum(axis=2)
            cols[bad] = masked[np.argmin(d, axis=1)][:, None]
            wts[bad] = [1.0, 0.0, 0.0, 0.0]
        self.n_fallback = int(np.sum(touched.any(axis=1) | ~ok))
        rows = np.repeat(np.arange(len(uv)), 4)
        self.matrix = sparse.csr_matrix((wts.ravel(), (rows, cols.ravel())), shape=(len(uv), h * w))

    def apply(self, flat_grids) -> np.ndarray:
        return self.matrix @ flat_grids


# ---------------------------------------------------------------------------
# operations


def rasterize(
    patch: RoiPatch,
    param: DiskParameterization,
    values,
    resolution: int,
    norm: Optional[Normalization] = None,
    time_index: int = 0,
    plan: Optional[RasterPlan] = None,
) -> BrainDisk:
    """Rasterize one time step of per-vertex values onto an ``R x R`` disk.

    Parameters
    ----------
    norm : Normalization, optional
        Defaults to the percentile normalization fitted on ``values``.
    plan : RasterPlan, optional
        Reuse a precomputed plan for the same parameterization.

    Raises
    ------
    NotBijective
        If any parameter triangle is flipped or degenerate.
    """
    values = np.asarray(values, dtype=np.float64)
    if plan is None:
        plan = RasterPlan(param.uv, patch.faces, resolution)
    norm = Normalization.fit(values) if norm is None else norm
    grid = np.where(plan.mask, plan.apply(norm.apply(values)), 0.0)
    return BrainDisk(grid, plan.mask, norm, time_index)


def rasterize_series(
    patch: RoiPatch,
    param: DiskParameterization,
    signals: SignalSeries,
    resolution: int,
    norm: Optional[Normalization] = None,
) -> DiskSeries:
    """Rasterize all time steps with one per-series normalization."""
    plan = RasterPlan(param.uv, patch.faces, resolution)
    norm = Normalization.fit(signals.values) if norm is None else norm
    grids = plan.apply(norm.apply(signals.values))
    return DiskSeries(grids, plan.mask, norm)


def resample_to_vertices(disk: BrainDisk, param: DiskParameterization) -> tuple[np.ndarray, int]:
    """Bilinear sample of a disk at every vertex, denormalized.

    Returns
    -------
    values : ndarray, shape (V,)
    n_fallback : int
        Vertices whose bilinear neighbourhood touched unmasked pixels.
    """
    plan = SamplePlan(param.uv, disk.mask)
    return disk.norm.invert(plan.apply(np.asarray(disk.grid).ravel())), plan.n_fallback


def roundtrip_error(patch: RoiPatch, param: DiskParameterization, values, resolution: int) -> float:
    """Relative L2 error of ``resample(rasterize(values))``."""
    values = np.asarray(values, dtype=np.float64)
    back, _ = resample_to_vertices(rasterize(patch, param, values, resolution), param)
    denom = np.linalg.norm(values)
    num = np.linalg.norm(back - values)
    if denom == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / denom)


# ---------------------------------------------------------------------------
# figure export


def colorize(grid, mask) -> np.ndarray:
    """Fixed diverging colormap for display.

    -1 maps to blue (0, 0, 255), 0 to white and +1 to red (255, 0, 0), linearly
    in each channel; unmasked pixels are black. Row 0 of the grid becomes the
    bottom image row.
    """
    g = np.clip(np.asarray(grid, dtype=np.float64), -1.0, 1.0)
    pos = np.clip(g, 0, 1)
    neg = np.clip(-g, 0, 1)
    rgb = np.stack([255 * (1 - neg), 255 * (1 - pos - neg), 255 * (1 - pos)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[~np.asarray(mask, dtype=bool)] = 0
    return rgb[::-1]


def grayscale(grid, mask) -> np.ndarray:
    """-1..1 mapped linearly to gray levels 1..255; unmasked pixels are 0."""
    g = np.clip(np.asarray(grid, dtype=np.float64), -1.0, 1.0)
    out = np.rint(1 + (g + 1.0) * 127.0).astype(np.uint8)
    out[~np.asarray(mask, dtype=bool)] = 0
    return out[::-1]


def export_image(path, disk: BrainDisk):
    """Write a disk as PNG (color) or PGM (grayscale) depending on the suffix."""
    from pathlib import Path

    from PIL import Image

    from .io import open_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pgm":
        img = Image.fromarray(grayscale(disk.grid, disk.mask), mode="L")
        fmt = "PPM"
    else:
        img = Image.fromarray(colorize(disk.grid, disk.mask), mode="RGB")
        fmt = "PNG"
    with open_file(path, "wb") as fh:
        img.save(fh, format=fmt)
