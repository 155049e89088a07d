"""Desk-scale synthetic retinotopy dataset and the down-sampling corruption.

Every subject shares one fine template sphere (as subjects share a standard
surface after registration). A cap around the north pole is split into four
visual-cortex labels by azimuth; vertices inside the cap get a smooth
retinotopic map (polar angle follows azimuth, eccentricity follows distance
from the pole) with per-subject rotation, eccentricity scale and amplitude,
and their BOLD series come from the pRF forward model plus small noise.

The degraded copy emulates a lower-resolution acquisition: the series are
resampled fine -> coarse -> fine and Gaussian noise is added per vertex and
time step.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import io
from ..errors import ConfigInvalid
from ..mesh import SignalSeries, SurfaceMesh, lifted_sphere, resample_between_meshes
from ..prf import HrfModel, PrfModel, PrfParams, bar_sweep

logger = logging.getLogger(__name__)

ROI_LABELS = ("lateraloccipital", "cuneus", "pericalcarine", "lingual")
OTHER_LABEL = "other"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Parameters of the synthetic dataset.

    Mesh resolutions are ``(n_rings, n_boundary)`` of the lifted-disk sphere;
    ``cap_fraction`` is the ROI radius as a fraction of the pole-to-equator
    distance. Ground-truth pRFs: eccentricity ``ecc_max_deg * (r / cap)``
    scaled per subject by ``U(1 - ecc_jitter, 1 + ecc_jitter)``, polar angle
    equal to the vertex azimuth plus a per-subject rotation
    ``U(-rotation_jitter_deg, rotation_jitter_deg)``, size
    ``sigma_intercept_deg + sigma_slope * ecc`` times ``U(0.9, 1.1)`` per
    vertex, amplitude ``U(*beta_range)`` per subject times ``U(0.9, 1.1)``
    per vertex. ``gt_noise_sd`` is the small acquisition noise of the fine
    data; ``noise_sd`` the corruption noise of the degraded copy.
    """

    fine_resolution: tuple = (32, 128)
    coarse_resolution: tuple = (12, 48)
    cap_fraction: float = 0.5
    n_subjects: int = 8
    n_timepoints: int = 100
    tr_seconds: float = 1.5
    stimulus_grid: int = 32
    extent_deg: float = 10.0
    n_directions: int = 8
    ecc_max_deg: float = 8.0
    ecc_jitter: float = 0.1
    rotation_jitter_deg: float = 10.0
    sigma_intercept_deg: float = 0.5
    sigma_slope: float = 0.2
    beta_range: tuple = (20.0, 40.0)
    gt_noise_sd: float = 0.1
    noise_sd: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "fine_resolution", tuple(int(x) for x in self.fine_resolution))
        object.__setattr__(self, "coarse_resolution", tuple(int(x) for x in self.coarse_resolution))
        object.__setattr__(self, "beta_range", tuple(float(x) for x in self.beta_range))
        if self.fine_resolution[0] < self.coarse_resolution[0] or self.fine_resolution[1] < self.coarse_resolution[1]:
            raise ConfigInvalid("fine mesh resolution must not be below the coarse resolution")
        if self.noise_sd < 0 or self.gt_noise_sd < 0:
            raise ConfigInvalid("noise standard deviations must be >= 0")
        if not 0 < self.cap_fraction < 1:
            raise ConfigInvalid("cap_fraction must lie in (0, 1)")
        if self.n_subjects < 1 or self.n_timepoints < 2:
            raise ConfigInvalid("need at least one subject and two time points")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fine_resolution", "coarse_resolution", "beta_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown dataset fields: {sorted(unknown)}")
        return cls(**d)


def subject_name(k: int) -> str:
    return f"sub-{k:02d}"


def template_meshes(spec: SyntheticDatasetSpec) -> tuple[SurfaceMesh, SurfaceMesh]:
    """Fine labelled template and the coarse mesh used for the corruption."""
    fine = lifted_sphere(*spec.fine_resolution)
    coarse = lifted_sphere(*spec.coarse_resolution)
    return label_template(fine, spec.cap_fraction), coarse


def _polar(vertices):
    theta = np.arccos(np.clip(vertices[:, 2], -1.0, 1.0))  # angle from the north pole
    phi = np.arctan2(vertices[:, 1], vertices[:, 0])
    return theta, phi


def label_template(mesh: SurfaceMesh, cap_fraction: float) -> SurfaceMesh:
    """Label the polar cap ``theta <= cap * pi/2`` with four azimuth quadrants."""
    theta, phi = _polar(mesh.vertices)
    inside = theta <= cap_fraction * np.pi / 2 + 1e-9
    quadrant = np.floor(np.mod(phi, 2 * np.pi) / (np.pi / 2)).astype(int) % 4
    labels = np.where(inside, np.array(ROI_LABELS, dtype=object)[quadrant], OTHER_LABEL)
    return SurfaceMesh(mesh.vertices, mesh.faces, labels)


def ground_truth_prfs(mesh: SurfaceMesh, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> list[PrfParams]:
    """Retinotopic pRF parameters for every vertex (outside the cap: far periphery)."""
    theta, phi = _polar(mesh.vertices)
    cap = spec.cap_fraction * np.pi / 2
    rot = np.deg2rad(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg))
    ecc_scale = rng.uniform(1 - spec.ecc_jitter, 1 + spec.ecc_jitter)
    beta0 = rng.uniform(*spec.beta_range)
    n = mesh.n_vertices
    ecc = np.minimum(spec.ecc_max_deg * ecc_scale * theta / cap, 1.5 * spec.extent_deg)
    ang = phi + rot
    sigma = (spec.sigma_intercept_deg + spec.sigma_slope * ecc) * rng.uniform(0.9, 1.1, n)
    beta = beta0 * rng.uniform(0.9, 1.1, n)
    return [PrfParams(float(e * np.cos(a)), float(e * np.sin(a)), float(s), float(b))
            for e, a, s, b in zip(ecc, ang, sigma, beta)]


def stimulus(spec: SyntheticDatasetSpec):
    return bar_sweep(spec.n_timepoints, spec.stimulus_grid, spec.extent_deg, spec.tr_seconds, spec.n_directions)


def simulate_bold(params: list[PrfParams], stim, hrf: HrfModel = HrfModel()) -> np.ndarray:
    """Noise-free forward model for many vertices, shape (V, T)."""
    model = PrfModel(stim, hrf)
    return np.array([p.beta * model.unit_prediction(p.v1_deg, p.v2_deg, p.sigma_deg) for p in params])


def make_synthetic_dataset(spec: SyntheticDatasetSpec, out_dir, seed: int = 42) -> dict:
    """Write the fine (ground-truth) dataset and its manifest.

    Layout::

        template.bmesh  coarse.bmesh  stimulus.bstm
        sub-XX/gt.bsig  sub-XX/gt_prf.csv
        manifest.json   (spec, seed, subjects, files with sha256)

    Only vertices inside the ROI cap carry retinotopic signal; the rest of
    the sphere is simulated too so that the whole-mesh resampling sees a
    complete surface.

    Returns
    -------
    dict
        The manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fine, coarse = template_meshes(spec)
    stim = stimulus(spec)
    hrf = HrfModel()
    io.write_mesh(out / "template.bmesh", fine)
    io.write_mesh(out / "coarse.bmesh", coarse)
    io.write_stimulus(out / "stimulus.bstm", stim)
    subjects = []
    for k in range(1, spec.n_subjects + 1):
        rng = np.random.default_rng([seed, k])
        params = ground_truth_prfs(fine, spec, rng)
        clean = simulate_bold(params, stim, hrf)
        values = clean + rng.normal(0.0, spec.gt_noise_sd, clean.shape) if spec.gt_noise_sd > 0 else clean
        d = out / subject_name(k)
        io.write_signals(d / "gt.bsig", SignalSeries(values, spec.tr_seconds))
        io.write_prf_csv(d / "gt_prf.csv", np.arange(len(params)), params)
        subjects.append(subject_name(k))
        logger.info("synthesized %s", subject_name(k))
    manifest = {
        "spec": spec.to_dict(),
        "seed": int(seed),
        "subjects": subjects,
        "roi_labels": list(ROI_LABELS),
        "n_vertices": fine.n_vertices,
        "n_roi_vertices": int(np.isin(fine.labels, ROI_LABELS).sum()),
    }
    return _write_manifest(out, manifest)


def _write_manifest(out: Path, manifest: dict) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {**manifest, "files": {str(p.relative_to(out)): io.sha256(p) for p in files}}
    io.write_json(out / "manifest.json", manifest)
    return manifest


def degrade_series(fine: SurfaceMesh, coarse: SurfaceMesh, series: SignalSeries, noise_sd: float,
                   rng: np.random.Generator) -> SignalSeries:
    """Fine -> coarse -> fine round trip plus i.i.d. N(0, noise_sd) noise."""
    low = resample_between_meshes(fine, series, coarse)
    back = resample_between_meshes(coarse, low, fine)
    values = back.values
    if noise_sd > 0:
        values = values + rng.normal(0.0, noise_sd, values.shape)
    return SignalSeries(values, series.tr_seconds)


def run_downsample(dataset_dir, spec: SyntheticDatasetSpec | None = None, seed: int | None = None) -> dict:
    """Write ``sub-XX/degraded.bsig`` for every subject and refresh the manifest.

    ``spec`` and ``seed`` default to the values stored in the manifest; the
    noise stream of subject ``k`` is seeded by ``(seed, k, 1)``.
    """
    d = Path(dataset_dir)
    manifest = io.read_json(d / "manifest.json")
    spec = SyntheticDatasetSpec.from_dict(manifest["spec"]) if spec is None else spec
    seed = manifest["seed"] if seed is None else seed
    fine = io.read_mesh(d / "template.bmesh")
    coarse = io.read_mesh(d / "coarse.bmesh")
    for k, name in enumerate(manifest["subjects"], start=1):
        series = io.read_signals(d / name / "gt.bsig")
        rng = np.random.default_rng([seed, k, 1])
        io.write_signals(d / name / "degraded.bsig", degrade_series(fine, coarse, series, spec.noise_sd, rng))
    manifest = {k: v for k, v in manifest.items() if k != "files"}
    manifest["spec"] = spec.to_dict()
    manifest["degraded"] = True
    return _write_manifest(d, manifest)

