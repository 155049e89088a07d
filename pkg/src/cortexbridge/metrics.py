"""Mask-aware image and distribution metrics for brain disks.

SSIM and MS-SSIM are implemented with torch so that the training losses can
differentiate through them; the public functions accept numpy arrays or
tensors. Every metric first replaces unmasked pixels by 0, so values outside
the disk never influence a result.

Conventions
-----------
* Data range ``L`` defaults to 2 (disks are normalized to [-1, 1]).
* SSIM uses an 11x11 Gaussian window with sigma 1.5. Local statistics are
  mask-normalized, and a window position counts if the window weight that
  falls on masked-in pixels is at least 0.5.
* MS-SSIM combines the per-level terms as ``2 * prod(((1 + c_j) / 2) ** w_j) - 1``
  with the canonical level weights renormalized to the levels used. This
  keeps the value in [-1, 1] and equals SSIM exactly for one level. Levels
  are reduced until the smallest side is at least ``7 * 2 ** (levels - 1)``.
* The Frechet distance uses a fixed seeded random projection of the masked
  pixels to 64 features in place of Inception features.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

DATA_RANGE = 2.0
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MIN_WINDOW_FRACTION = 0.5
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_MIN_SIDE = 7
PSNR_CAP_DB = 99.0
FEATURE_DIM = 64
JITTER = 1e-6


class TooSmallForLevels(UserWarning):
    """MS-SSIM levels were reduced to fit the image size."""


class IdenticalImages(UserWarning):
    """PSNR is infinite; the capped sentinel was returned."""


class SingularCovariance(UserWarning):
    """A feature covariance was singular; diagonal jitter was added."""


# ---------------------------------------------------------------------------
# torch core


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _filter(x, win):
    # x: (B, H, W); zero padding treats the outside of the image as unmasked
    pad = win.shape[-1] // 2
    return F.conv2d(x.unsqueeze(1), win[None, None], padding=pad).squeeze(1)


def _ssim_terms(a, b, m, data_range):
    """Per-sample mean luminance*cs and cs over counted windows.

    a, b: (B, H, W) already zeroed outside the mask; m: (H, W) float mask.
    """
    win = gaussian_window(dtype=a.dtype)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    w = _filter(m[None], win)[0]
    valid = w >= MIN_WINDOW_FRACTION
    if not bool(valid.any()):
        raise ShapeMismatch("no SSIM window has enough masked-in pixels")
    ws = torch.where(valid, w, torch.ones_like(w))
    mu_a = _filter(a, win) / ws
    mu_b = _filter(b, win) / ws
    saa = _filter(a * a, win) / ws - mu_a * mu_a
    sbb = _filter(b * b, win) / ws - mu_b * mu_b
    sab = _filter(a * b, win) / ws - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    n = valid.sum()
    vf = valid.to(a.dtype)
    return (lum * cs * vf).sum(dim=(-2, -1)) / n, (cs * vf).sum(dim=(-2, -1)) / n


def _prepare(a, b, mask):
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).to(torch.bool)
    if tuple(m.shape) != tuple(a.shape[-2:]):
        raise ShapeMismatch(f"mask {tuple(m.shape)} does not match images {tuple(a.shape)}")
    squeeze = a.dim() == 2
    if squeeze:
        a, b = a[None], b[None]
    zero = torch.zeros((), dtype=a.dtype)
    a = torch.where(m, a, zero)
    b = torch.where(m, b, zero)
    return a, b, m, squeeze


def ssim_t(a, b, mask, data_range: float = DATA_RANGE) -> torch.Tensor:
    """Differentiable SSIM, one value per image of a (B, H, W) batch."""
    a, b, m, squeeze = _prepare(a, b, mask)
    s, _ = _ssim_terms(a, b, m.to(a.dtype), data_range)
    return s[0] if squeeze else s


def ms_levels(shape, levels: int = 5) -> int:
    side = min(shape[-2:])
    used = levels
    while used > 1 and side < MS_MIN_SIDE * 2 ** (used - 1):
        used -= 1
    return used


def _pool(x, m):
    # mask-aware 2x2 average; odd trailing rows/columns are dropped
    num = F.avg_pool2d((x * m).unsqueeze(1), 2).squeeze(1)
    den = F.avg_pool2d(m[None, None], 2)[0, 0]
    out = torch.where(den > 0, num / torch.where(den > 0, den, torch.ones_like(den)), torch.zeros_like(num))
    return out, (den >= 0.5).to(x.dtype)


def ms_ssim_t(a, b, mask, levels: int = 5, data_range: float = DATA_RANGE) -> torch.Tensor:
    """Differentiable MS-SSIM, one value per image of a (B, H, W) batch."""
    a, b, m, squeeze = _prepare(a, b, mask)
    used = ms_levels(a.shape, levels)
    if used < levels:
        warnings.warn(f"MS-SSIM reduced from {levels} to {used} levels for size {tuple(a.shape[-2:])}", TooSmallForLevels)
    weights = torch.tensor(MS_WEIGHTS[:used], dtype=a.dtype)
    weights = weights / weights.sum()
    mf = m.to(a.dtype)
    acc = torch.ones(a.shape[0], dtype=a.dtype)
    for j in range(used):
        full, cs = _ssim_terms(a * mf, b * mf, mf, data_range)
        term = full if j == used - 1 else cs
        acc = acc * ((1 + term) / 2).clamp_min(0) ** weights[j]
        if j < used - 1:
            a, _ = _pool(a, mf)
            b, mf = _pool(b, mf)
    out = 2 * acc - 1
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# numpy-facing metrics


def _scalar(t: torch.Tensor):
    t = t.detach()
    return float(t) if t.dim() == 0 else t.numpy().copy()


def ssim(a, b, mask, data_range: float = DATA_RANGE):
    """Masked SSIM of two images (or per image of two stacks)."""
    return _scalar(ssim_t(a, b, mask, data_range))


def ms_ssim(a, b, mask, levels: int = 5, data_range: float = DATA_RANGE):
    """Masked MS-SSIM; levels are reduced for small images (see module notes)."""
    return _scalar(ms_ssim_t(a, b, mask, levels, data_range))


def psnr(a, b, mask, data_range: float = DATA_RANGE, return_flag: bool = False):
    """Masked PSNR in dB; identical images give the capped 99 dB sentinel.

    With ``return_flag`` the result is ``(value, capped)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    m = np.asarray(mask, dtype=bool)
    mse = float(np.mean((a[..., m] - b[..., m]) ** 2))
    capped = mse == 0.0
    if capped:
        warnings.warn("identical images, PSNR capped", IdenticalImages)
        value = PSNR_CAP_DB
    else:
        value = min(PSNR_CAP_DB, 10.0 * np.log10(data_range**2 / mse))
    return (value, capped) if return_flag else value


def projection_features(images, mask, feature_seed: int = 0, dim: int = FEATURE_DIM) -> np.ndarray:
    """Seeded Gaussian random projection of masked pixels, shape (N, dim)."""
    x = np.asarray(images, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    pix = x[:, m]
    rng = np.random.default_rng(feature_seed)
    proj = rng.standard_normal((m.size, dim))[np.flatnonzero(m.ravel())] / np.sqrt(max(int(m.sum()), 1))
    return pix @ proj


def _gaussian_stats(feat):
    mu = feat.mean(axis=0)
    cov = np.cov(feat, rowvar=False) if len(feat) > 1 else np.zeros((feat.shape[1], feat.shape[1]))
    return mu, np.atleast_2d(cov)


def sqrtm_psd(a) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    s = scipy.linalg.sqrtm(0.5 * (a + a.T))
    s = np.real(s)
    return 0.5 * (s + s.T)


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> tuple[float, bool]:
    """Frechet distance between two Gaussians; returns ``(value, jittered)``."""
    jittered = False
    covs = []
    for c in (cov_a, cov_b):
        ev = np.linalg.eigvalsh(c)
        if ev.min() <= 1e-12 * max(ev.max(), 1e-300):
            c = c + JITTER * np.eye(len(c))
            jittered = True
        covs.append(c)
    ca, cb = covs

    def cross_trace(x, y):
        rx = sqrtm_psd(x)
        return float(np.trace(sqrtm_psd(rx @ y @ rx)))

    # average both orders so the value is exactly symmetric
    tr = 0.5 * (cross_trace(ca, cb) + cross_trace(cb, ca))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * tr)
    if jittered:
        warnings.warn("singular feature covariance, added diagonal jitter", SingularCovariance)
    return max(d, 0.0), jittered


def frechet_feature_distance(set_a, set_b, mask, feature_seed: int = 0, dim: int = FEATURE_DIM, return_flag: bool = False):
    """Frechet distance between Gaussian fits of random-projection features.

    Parameters
    ----------
    set_a, set_b : array_like, shape (N, H, W)
    mask : array_like of bool, shape (H, W)
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch("image sets have different image shapes")
    if min(len(a), len(b)) < 2 * dim:
        warnings.warn(f"fewer than {2 * dim} samples per set; covariance estimate is rank deficient", UserWarning)
    fa = projection_features(a, mask, feature_seed, dim)
    fb = projection_features(b, mask, feature_seed, dim)
    d, jittered = frechet_from_stats(*_gaussian_stats(fa), *_gaussian_stats(fb))
    return (d, jittered) if return_flag else d


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    ssim: float
    ms_ssim: float
    psnr_db: float
    frechet_distance: float
    n_slices: int
    vertex_mse: float | None = None
    per_slice: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv_rows(self) -> tuple[list[str], list[list]]:
        header = ["slice", "ssim", "ms_ssim", "psnr_db"]
        return header, [[r["slice"], r["ssim"], r["ms_ssim"], r["psnr_db"]] for r in self.per_slice]


def evaluate_sets(pred, ref, mask, feature_seed: int = 0, data_range: float = DATA_RANGE, vertex_mse=None) -> MetricReport:
    """Per-slice SSIM / MS-SSIM / PSNR and the set-level Frechet distance."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 3:
        raise ShapeMismatch(f"expected matching (N, H, W) stacks, got {pred.shape} and {ref.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = np.atleast_1d(ssim(pred, ref, mask, data_range))
        ms = np.atleast_1d(ms_ssim(pred, ref, mask, data_range=data_range))
        p = np.array([psnr(x, y, mask, data_range) for x, y in zip(pred, ref)])
        fd = frechet_feature_distance(pred, ref, mask, feature_seed)
    per = [
        {"slice": i, "ssim": float(s[i]), "ms_ssim": float(ms[i]), "psnr_db": float(p[i])} for i in range(len(pred))
    ]
    return MetricReport(
        ssim=float(s.mean()),
        ms_ssim=float(ms.mean()),
        psnr_db=float(p.mean()),
        frechet_distance=float(fd),
        n_slices=len(pred),
        vertex_mse=None if vertex_mse is None else float(vertex_mse),
        per_slice=per,
    )
