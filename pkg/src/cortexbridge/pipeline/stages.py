"""Pipeline stages over one run directory.

Run directory layout::

    dataset/                 synthetic dataset (synth)
    param/param.buv          disk parameterization of the template ROI (param)
    param/info.json
    disks/<sub>_gt.bdsk      ground-truth and degraded disk series (rasterize)
    disks/<sub>_degraded.bdsk
    train/generator.bgen     trained models, history, split, access log (train)
    enhance/<sub>_enhanced.bdsk   enhanced test disks (enhance)
    resample/<sub>_enhanced.bsig  enhanced ROI vertex series (resample)
    prf/<sub>_<kind>.csv     pRF fits of gt / degraded / enhanced (prf)
    eval/metrics.json        image metrics and mean R^2 (eval)
    report/                  report.json, report.csv, figures (report)

Each stage checks its upstream artifacts and raises MissingUpstream when
one is absent. Re-running a stage overwrites its outputs deterministically.
"""
from __future__ import annotations

import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from .. import io
from ..braindisk import DiskSeries, Normalization, rasterize_series
from ..bridge import enhance, load_model, save_model, train
from ..bridge.train import write_history
from ..conformal import conformal_disk_map
from ..errors import CortexBridgeError, MissingUpstream
from ..mesh import SignalSeries, extract_roi
from ..metrics import evaluate_sets, ssim
from ..prf import PrfModel
from .config import ExperimentConfig
from .synthetic import make_synthetic_dataset, run_downsample

logger = logging.getLogger(__name__)

STAGES = ("synth", "param", "rasterize", "train", "enhance", "resample", "prf", "eval", "report")
KINDS = ("gt", "degraded", "enhanced")
LOCK_NAME = ".lock"


class RunLocked(CortexBridgeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive lock file; a second writer fails instead of waiting."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{path} exists: another process is writing this run (remove it if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingUpstream("missing upstream artifacts: " + ", ".join(missing))


class Run:
    """Paths and shared loaders for one experiment run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir()
        self.dataset = cfg.dataset_dir()

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def subject_file(self, subject, name) -> Path:
        return self.dataset / subject / name

    def disk_file(self, subject, kind) -> Path:
        if kind == "enhanced":
            return self.path("enhance", f"{subject}_enhanced.bdsk")
        return self.path("disks", f"{subject}_{kind}.bdsk")

    def prf_file(self, subject, kind) -> Path:
        return self.path("prf", f"{subject}_{kind}.csv")

    @property
    def subjects(self) -> list[str]:
        return self.cfg.train_subjects + self.cfg.test_subjects

    def roi(self):
        _require(self.dataset / "template.bmesh")
        return extract_roi(io.read_mesh(self.dataset / "template.bmesh"), self.cfg.raw["roi_labels"])

    def param(self):
        _require(self.path("param", "param.buv"))
        return io.read_param(self.path("param", "param.buv"))

    def roi_signals(self, subject, kind, roi) -> SignalSeries:
        if kind == "enhanced":
            path = self.path("resample", f"{subject}_enhanced.bsig")
            _require(path)
            return io.read_signals(path)
        path = self.subject_file(subject, f"{kind}.bsig")
        _require(path)
        return io.read_signals(path).take(roi.parent_index)


# ---------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> dict:
    """Generate the synthetic fine dataset and its degraded copy."""
    spec = run.cfg.dataset_spec
    make_synthetic_dataset(spec, run.dataset, seed=run.cfg.seed)
    return run_downsample(run.dataset, spec, seed=run.cfg.seed)


def stage_param(run: Run) -> dict:
    roi = run.roi()
    param = conformal_disk_map(roi, run.cfg.conformal)
    io.write_param(run.path("param", "param.buv"), param)
    info = {
        "n_vertices": int(roi.submesh.n_vertices),
        "n_faces": int(roi.submesh.n_faces),
        "mu_sup": float(param.mu_sup),
        "n_flipped": int(param.n_flipped(roi.faces)),
        "energy": float(param.energy),
    }
    io.write_json(run.path("param", "info.json"), info)
    return info


def stage_rasterize(run: Run) -> dict:
    roi = run.roi()
    param = run.param()
    out = {}
    for sub in run.subjects:
        for kind in ("gt", "degraded"):
            series = rasterize_series(roi, param, run.roi_signals(sub, kind, roi), run.cfg.resolution)
            io.write_disks(run.disk_file(sub, kind), series)
            out[f"{sub}_{kind}"] = {"offset": series.norm.offset, "scale": series.norm.scale}
    io.write_json(run.path("disks", "norms.json"), out)
    return out


def split_slices(n_slices: int, fraction: float, seed: int, subject_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, validation) time indices; ``round(fraction * n)`` go to validation."""
    rng = np.random.default_rng([seed, subject_index, 2])
    perm = rng.permutation(n_slices)
    n_valid = int(round(fraction * n_slices))
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def _train_inputs(run: Run):
    cfg = run.cfg
    paths = [run.disk_file(s, k) for s in cfg.train_subjects for k in ("gt", "degraded")]
    _require(*paths)
    src, tgt, val_src, val_tgt, split = [], [], [], [], {}
    for i, sub in enumerate(cfg.train_subjects):
        gt = io.read_disks(run.disk_file(sub, "gt"))
        dg = io.read_disks(run.disk_file(sub, "degraded"))
        tr, va = split_slices(len(gt), cfg.valid_fraction, cfg.seed, i)
        split[sub] = {"train": tr.tolist(), "valid": va.tolist()}
        src.append(dg.with_grids(dg.grids[tr]))
        tgt.append(gt.with_grids(gt.grids[tr]))
        val_src.append(dg.with_grids(dg.grids[va]))
        val_tgt.append(gt.with_grids(gt.grids[va]))
    return src, tgt, val_src, val_tgt, split


def reference_norm(target_series) -> Normalization:
    """Target-domain normalization used to denormalize enhanced disks."""
    return Normalization(
        float(np.mean([s.norm.offset for s in target_series])),
        float(np.mean([s.norm.scale for s in target_series])),
    )


def in_norm(series: DiskSeries, norm: Normalization) -> np.ndarray:
    """Express a disk series in another series' normalization (no clipping)."""
    phys = series.norm.invert(np.asarray(series.grids, dtype=np.float64))
    return np.where(series.mask, (phys - norm.offset) / norm.scale, 0.0)


def stage_train(run: Run) -> dict:
    """Train on the train subjects only; every file read is logged to access.json."""
    cfg = run.cfg
    out = run.path("train")
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    with io.record_access() as rec:
        src, tgt, val_src, val_tgt, split = _train_inputs(run)
    opts = cfg.train_options
    opts = type(opts)(**{**opts.__dict__, "checkpoint_dir": str(ckpt), "seed": cfg.seed + opts.seed})
    gen, critic, history = train(cfg.bridge, src, tgt, opts)
    save_model(out / "generator.bgen", gen, cfg.bridge, epochs=opts.epochs)
    save_model(out / "critic.bgen", critic, cfg.bridge, epochs=opts.epochs)
    write_history(out / "history.csv", history)
    ref = reference_norm(tgt)
    io.write_json(out / "reference_norm.json", {"offset": ref.offset, "scale": ref.scale})
    io.write_json(out / "split.json", split)
    valid = {}
    if sum(len(s) for s in val_src):
        deg, enh = [], []
        for s, t in zip(val_src, val_tgt):
            if len(s) == 0:
                continue
            e, _ = enhance(s, gen, cfg.bridge, seed=cfg.raw["enhance"]["seed"], norm=ref)
            deg.append(np.atleast_1d(ssim(in_norm(s, t.norm), t.grids, t.mask)))
            enh.append(np.atleast_1d(ssim(in_norm(e, t.norm), t.grids, t.mask)))
        valid = {"ssim_degraded": float(np.concatenate(deg).mean()), "ssim_enhanced": float(np.concatenate(enh).mean())}
    io.write_json(out / "validation.json", valid)
    root = run.dir.resolve()
    reads = []
    for p in rec.read_paths():
        try:
            reads.append(str(Path(p).relative_to(root)))
        except ValueError:
            reads.append(p)
    io.write_json(out / "access.json", {"read": sorted(reads)})
    return {"final": history[-1] if history else {}, "validation": valid}


def stage_enhance(run: Run) -> dict:
    cfg = run.cfg
    _require(run.path("train", "generator.bgen"), run.path("train", "reference_norm.json"))
    gen, _, _ = load_model(run.path("train", "generator.bgen"))
    r = io.read_json(run.path("train", "reference_norm.json"))
    ref = Normalization(r["offset"], r["scale"])
    diagnostics = {}
    for sub in cfg.test_subjects:
        _require(run.disk_file(sub, "degraded"))
        series = io.read_disks(run.disk_file(sub, "degraded"))
        out, diag = enhance(series, gen, cfg.bridge, seed=cfg.raw["enhance"]["seed"], norm=ref)
        io.write_disks(run.disk_file(sub, "enhanced"), out)
        diagnostics[sub] = {k: float(np.mean(v)) for k, v in diag.items()}
    io.write_json(run.path("enhance", "diagnostics.json"), diagnostics)
    return diagnostics


def stage_resample(run: Run) -> dict:
    param = run.param()
    tr = run.cfg.dataset_spec.tr_seconds
    out = {}
    for sub in run.cfg.test_subjects:
        _require(run.disk_file(sub, "enhanced"))
        series = io.read_disks(run.disk_file(sub, "enhanced"))
        values, n_fallback = series.vertex_values(param)
        io.write_signals(run.path("resample", f"{sub}_enhanced.bsig"), SignalSeries(values, tr))
        out[sub] = {"n_fallback": int(n_fallback)}
    io.write_json(run.path("resample", "info.json"), out)
    return out


def stage_prf(run: Run) -> dict:
    roi = run.roi()
    _require(run.dataset / "stimulus.bstm")
    model = PrfModel(io.read_stimulus(run.dataset / "stimulus.bstm"), opts=run.cfg.prf_options)
    out = {}
    for sub in run.cfg.test_subjects:
        for kind in KINDS:
            series = run.roi_signals(sub, kind, roi)
            params = model.fit_many(series.values)
            io.write_prf_csv(run.prf_file(sub, kind), np.arange(len(params)), params)
            out[f"{sub}_{kind}"] = float(np.mean([p.r2_percent for p in params]))
    return out


def stage_eval(run: Run) -> dict:
    cfg = run.cfg
    roi = run.roi()
    needed = [run.disk_file(s, k) for s in cfg.test_subjects for k in KINDS]
    needed += [run.prf_file(s, k) for s in cfg.test_subjects for k in KINDS]
    _require(*needed)
    stacks = {"degraded": [], "enhanced": [], "gt": []}
    vertex_mse = {"degraded": [], "enhanced": []}
    mask = None
    for sub in cfg.test_subjects:
        gt = io.read_disks(run.disk_file(sub, "gt"))
        mask = gt.mask
        stacks["gt"].append(np.asarray(gt.grids, dtype=np.float64))
        for kind in ("degraded", "enhanced"):
            s = io.read_disks(run.disk_file(sub, kind))
            stacks[kind].append(in_norm(s, gt.norm))
        g = run.roi_signals(sub, "gt", roi).values
        for kind in ("degraded", "enhanced"):
            vertex_mse[kind].append(np.mean((run.roi_signals(sub, kind, roi).values - g) ** 2))
    ref = np.concatenate(stacks["gt"])
    seed = cfg.raw["metrics"]["feature_seed"]
    reports = {
        kind: evaluate_sets(np.concatenate(stacks[kind]), ref, mask, feature_seed=seed,
                            vertex_mse=float(np.mean(vertex_mse[kind])))
        for kind in ("degraded", "enhanced")
    }
    r2 = {}
    for kind in KINDS:
        vals = [p.r2_percent for s in cfg.test_subjects for p in io.read_prf_csv(run.prf_file(s, kind))[1]]
        r2[kind] = float(np.mean(vals))
    result = {
        "metrics": {k: {f: v for f, v in r.to_dict().items() if f != "per_slice"} for k, r in reports.items()},
        "per_slice": {k: r.per_slice for k, r in reports.items()},
        "mean_r2": r2,
    }
    io.write_json(run.path("eval", "metrics.json"), result)
    return result


def stage_report(run: Run) -> dict:
    from .report import export_report

    return export_report(run)


HANDLERS = {
    "synth": stage_synth,
    "param": stage_param,
    "rasterize": stage_rasterize,
    "train": stage_train,
    "enhance": stage_enhance,
    "resample": stage_resample,
    "prf": stage_prf,
    "eval": stage_eval,
    "report": stage_report,
}


def run_stage(stage: str, cfg: ExperimentConfig) -> dict:
    """Run one stage (or ``"all"``) under the run-directory lock."""
    if stage != "all" and stage not in HANDLERS:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)} or all")
    run = Run(cfg)
    with run_lock(run.dir):
        cfg.save(run.path("config.json"))
        if stage == "all":
            return {s: HANDLERS[s](run) for s in STAGES}
        logger.info("stage %s in %s", stage, run.dir)
        return HANDLERS[stage](run)
