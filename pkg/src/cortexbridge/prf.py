"""Population receptive field model: forward prediction, fitting and scoring.

The predicted BOLD series of a vertex is

    y(t) = beta * (sum_x r(x; v, sigma) s(t, x)) * h(t)

with a Gaussian receptive field ``r`` normalized to unit sum over the
stimulus grid, the stimulus aperture ``s`` and a causal double-gamma HRF
``h`` sampled at the repetition time. Fitting uses a coarse grid over
``(v1, v2, sigma)`` with ``beta`` solved in closed form, then Nelder-Mead on
``(v1, v2, log sigma)`` from the best grid seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .errors import FlatSeries, ShapeMismatch, ZeroVariance


@dataclass(frozen=True)
class StimulusMovie:
    """Aperture movie on a G x G grid covering [-extent, extent]^2 degrees.

    Row ``i`` of a frame is at ``y = -extent + (i + 0.5) * 2 * extent / G``
    and column ``j`` at the same formula in ``x``.
    """

    frames: np.ndarray
    extent_deg: float
    tr_seconds: float

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[1] != f.shape[2]:
            raise ShapeMismatch(f"frames must be (T, G, G), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() > 1):
            raise ValueError("stimulus contrast must lie in [0, 1]")
        if not (self.extent_deg > 0 and self.tr_seconds > 0):
            raise ValueError("extent_deg and tr_seconds must be positive")
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def grid_size(self) -> int:
        return self.frames.shape[1]

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid_size
        c = -self.extent_deg + (np.arange(g) + 0.5) * 2 * self.extent_deg / g
        x, y = np.meshgrid(c, c)
        return x, y


@dataclass(frozen=True)
class HrfModel:
    """Canonical double-gamma HRF (SPM-style parameterization).

    ``h(t) = g(t; peak/d1, d1) - ratio * g(t; undershoot/d2, d2)`` with ``g``
    the gamma density of given shape and scale, sampled on ``[0, length)``
    and normalized to unit sum.
    """

    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    length_seconds: float = 32.0

    def kernel(self, tr_seconds: float) -> np.ndarray:
        t = np.arange(0.0, self.length_seconds, tr_seconds)
        h = stats.gamma.pdf(t, self.peak_delay / self.peak_dispersion, scale=self.peak_dispersion)
        h = h - self.undershoot_ratio * stats.gamma.pdf(
            t, self.undershoot_delay / self.undershoot_dispersion, scale=self.undershoot_dispersion
        )
        total = h.sum()
        if not total > 0:
            raise ValueError("HRF kernel must integrate to a positive value")
        return h / total


@dataclass(frozen=True)
class PrfParams:
    v1_deg: float
    v2_deg: float
    sigma_deg: float
    beta: float
    r2_percent: float = float("nan")

    def __post_init__(self):
        if not self.sigma_deg > 0:
            raise ValueError("sigma_deg must be positive")
        if self.r2_percent > 100.0 + 1e-9:
            raise ValueError("r2_percent cannot exceed 100")


@dataclass(frozen=True)
class PrfFitOptions:
    n_centers: int = 8
    sigma_factors: tuple = (0.5, 1.0, 2.0, 4.0)
    refine: bool = True
    maxfev: int = 500
    xatol: float = 1e-6
    fatol: float = 1e-6


def gaussian_rf(v, sigma, x, y) -> np.ndarray:
    """Gaussian receptive field on the grid ``(x, y)``, normalized to unit sum."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d2 = (np.asarray(x) - v[0]) ** 2 + (np.asarray(y) - v[1]) ** 2
    e = -(d2 - d2.min()) / (2.0 * sigma**2)
    w = np.exp(e)
    return w / w.sum()


def convolve_hrf(drive, kernel) -> np.ndarray:
    """Causal discrete convolution along the last axis, truncated to its length."""
    drive = np.asarray(drive, dtype=np.float64)
    t = drive.shape[-1]
    k = np.asarray(kernel)[:t]
    out = np.zeros_like(drive)
    for lag, h in enumerate(k):
        out[..., lag:] += h * drive[..., : t - lag]
    return out


def predict_timeseries(params: PrfParams, stim: StimulusMovie, hrf: HrfModel = HrfModel()) -> np.ndarray:
    x, y = stim.coordinates()
    rf = gaussian_rf((params.v1_deg, params.v2_deg), params.sigma_deg, x, y)
    drive = stim.frames.reshape(stim.n_frames, -1) @ rf.ravel()
    return params.beta * convolve_hrf(drive, hrf.kernel(stim.tr_seconds))


def variance_explained(pred, obs) -> float:
    """``100 * (1 - sum((pred - obs)^2) / sum((obs - mean(obs))^2))``."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ShapeMismatch("pred and obs must have the same shape")
    sst = np.sum((obs - obs.mean()) ** 2)
    if sst == 0:
        raise ZeroVariance("observed series is constant")
    return float(100.0 * (1.0 - np.sum((pred - obs) ** 2) / sst))


class PrfModel:
    """Precomputed stimulus, HRF and grid-search design for one experiment."""

    def __init__(self, stim: StimulusMovie, hrf: HrfModel = HrfModel(), opts: PrfFitOptions = PrfFitOptions()):
        self.stim = stim
        self.hrf = hrf
        self.opts = opts
        self.kernel = hrf.kernel(stim.tr_seconds)
        self.x, self.y = stim.coordinates()
        self.frames = stim.frames.reshape(stim.n_frames, -1)
        e = stim.extent_deg
        n = opts.n_centers
        c = -e + (np.arange(n) + 0.5) * 2 * e / n
        sig = np.asarray(opts.sigma_factors, dtype=np.float64) * e / 10.0
        # lattice order: v1 slowest, then v2, then sigma
        v1, v2, s = np.meshgrid(c, c, sig, indexing="ij")
        self.grid = np.column_stack([v1.ravel(), v2.ravel(), s.ravel()])
        d2 = (self.x.ravel()[None] - self.grid[:, :1]) ** 2 + (self.y.ravel()[None] - self.grid[:, 1:2]) ** 2
        rf = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2 * self.grid[:, 2:] ** 2))
        rf /= rf.sum(axis=1, keepdims=True)
        self.design = convolve_hrf(rf @ self.frames.T, self.kernel)
        self.design_norm = np.einsum("ij,ij->i", self.design, self.design)

    def unit_prediction(self, v1, v2, sigma) -> np.ndarray:
        rf = gaussian_rf((v1, v2), sigma, self.x, self.y)
        return convolve_hrf(self.frames @ rf.ravel(), self.kernel)

    def _profile_sse(self, theta, y):
        p = self.unit_prediction(theta[0], theta[1], np.exp(theta[2]))
        pp = p @ p
        beta = (p @ y) / pp if pp > 0 else 0.0
        r = y - beta * p
        return float(r @ r), beta

    def grid_search(self, series) -> np.ndarray:
        """Best lattice index per series (lowest index on ties); series is (N, T)."""
        y = np.atleast_2d(series)
        py = self.design @ y.T
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(self.design_norm[:, None] > 0, py**2 / self.design_norm[:, None], 0.0)
        return np.argmax(gain, axis=0)

    def fit(self, series) -> PrfParams:
        y = np.asarray(series, dtype=np.float64)
        if y.shape != (self.stim.n_frames,):
            raise ShapeMismatch(f"series must have {self.stim.n_frames} samples, got {y.shape}")
        if np.all(y == y[0]):
            raise FlatSeries("series has zero variance")
        best = self.grid[self.grid_search(y)[0]]
        theta = np.array([best[0], best[1], np.log(best[2])])
        if self.opts.refine:
            res = optimize.minimize(
                lambda th: self._profile_sse(th, y)[0],
                theta,
                method="Nelder-Mead",
                options={"maxfev": self.opts.maxfev, "xatol": self.opts.xatol, "fatol": self.opts.fatol},
            )
            if res.fun <= self._profile_sse(theta, y)[0]:
                theta = res.x
        _, beta = self._profile_sse(theta, y)
        params = PrfParams(float(theta[0]), float(theta[1]), float(np.exp(theta[2])), float(beta))
        pred = beta * self.unit_prediction(params.v1_deg, params.v2_deg, params.sigma_deg)
        return PrfParams(params.v1_deg, params.v2_deg, params.sigma_deg, params.beta, variance_explained(pred, y))

    def fit_many(self, series) -> list[PrfParams]:
        return [self.fit(s) for s in np.atleast_2d(series)]


def fit_prf(series, stim: StimulusMovie, hrf: HrfModel = HrfModel(), opts: PrfFitOptions = PrfFitOptions()) -> PrfParams:
    """Fit one vertex series. Raises FlatSeries for a constant series."""
    return PrfModel(stim, hrf, opts).fit(series)


def bar_sweep(
    n_frames: int = 100,
    grid_size: int = 32,
    extent_deg: float = 10.0,
    tr_seconds: float = 1.5,
    n_directions: int = 8,
    bar_width_deg: float | None = None,
) -> StimulusMovie:
    """Moving-bar stimulus inside a circular aperture.

    The bar crosses the aperture once per direction (directions evenly spaced
    over 360 degrees); frames left over after ``n_directions`` equal sweeps
    are blank.
    """
    width = extent_deg / 4.0 if bar_width_deg is None else bar_width_deg
    g = grid_size
    c = -extent_deg + (np.arange(g) + 0.5) * 2 * extent_deg / g
    x, y = np.meshgrid(c, c)
    aperture = x**2 + y**2 <= extent_deg**2
    per = n_frames // n_directions
    frames = np.zeros((n_frames, g, g))
    reach = extent_deg + width / 2
    for d in range(n_directions):
        ang = 2 * np.pi * d / n_directions
        proj = x * np.cos(ang) + y * np.sin(ang)
        for k, pos in enumerate(np.linspace(-reach, reach, per)):
            frames[d * per + k] = (np.abs(proj - pos) <= width / 2) & aperture
    return StimulusMovie(frames, extent_deg, tr_seconds)
