import json

import jsonschema
import numpy as np
import pytest

from cortexbridge import io
from cortexbridge.braindisk import rasterize_series
from cortexbridge.conformal import conformal_disk_map
from cortexbridge.errors import ConfigInvalid, MissingUpstream
from cortexbridge.mesh import extract_roi
from cortexbridge.metrics import ssim
from cortexbridge.pipeline import ExperimentConfig, SyntheticDatasetSpec, make_synthetic_dataset, run_downsample
from cortexbridge.pipeline.cli import main, parse_overrides
from cortexbridge.pipeline.report import REPORT_SCHEMA, validate_report
from cortexbridge.pipeline.stages import Run, run_lock, run_stage, split_slices
from cortexbridge.pipeline.synthetic import ROI_LABELS
from cortexbridge.prf import PrfModel

SMALL_SPEC = dict(fine_resolution=[12, 48], coarse_resolution=[6, 24], n_subjects=3, n_timepoints=40)


def tiny_config(run_dir, **extra):
    d = {
        "name": "tiny",
        "run_dir": str(run_dir),
        "resolution": 16,
        "dataset": SMALL_SPEC,
        "split": {"train": ["sub-01", "sub-02"], "test": ["sub-03"], "valid_fraction": 0.2},
        "train": {"epochs": 1, "generator_arch": {"base_channels": 4}, "critic_arch": {"base_channels": 4}},
        "prf": {"n_centers": 4, "maxfev": 40},
    }
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# synthetic data


def test_spec_validation():
    with pytest.raises(ConfigInvalid):
        SyntheticDatasetSpec(fine_resolution=(4, 16), coarse_resolution=(8, 32))
    with pytest.raises(ConfigInvalid):
        SyntheticDatasetSpec(noise_sd=-1.0)
    assert SyntheticDatasetSpec().noise_sd == 5.0


def test_dataset_deterministic_and_manifest(tmp_path):
    spec = SyntheticDatasetSpec(**SMALL_SPEC)
    m1 = make_synthetic_dataset(spec, tmp_path / "a", seed=7)
    m2 = make_synthetic_dataset(spec, tmp_path / "b", seed=7)
    assert m1["files"] == m2["files"]
    assert set(m1["files"]) == {
        str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*") if p.name != "manifest.json"
        and p.is_file()
    }
    for name, digest in m1["files"].items():
        assert io.sha256(tmp_path / "a" / name) == digest
    m3 = make_synthetic_dataset(spec, tmp_path / "c", seed=8)
    assert m3["files"]["sub-01/gt.bsig"] != m1["files"]["sub-01/gt.bsig"]


def test_noiseless_dataset_refits(tmp_path):
    spec = SyntheticDatasetSpec(**{**SMALL_SPEC, "n_subjects": 1, "n_timepoints": 100, "gt_noise_sd": 0.0})
    make_synthetic_dataset(spec, tmp_path, seed=1)
    roi = extract_roi(io.read_mesh(tmp_path / "template.bmesh"), ROI_LABELS)
    series = io.read_signals(tmp_path / "sub-01" / "gt.bsig").take(roi.parent_index)
    model = PrfModel(io.read_stimulus(tmp_path / "stimulus.bstm"))
    r2 = np.array([p.r2_percent for p in model.fit_many(series.values)])
    assert len(r2) == roi.submesh.n_vertices
    assert r2.min() >= 99.9


def test_downsample_identity_when_noiseless_same_mesh(tmp_path):
    spec = SyntheticDatasetSpec(**{**SMALL_SPEC, "coarse_resolution": [12, 48], "noise_sd": 0.0, "n_subjects": 1})
    make_synthetic_dataset(spec, tmp_path, seed=2)
    run_downsample(tmp_path)
    gt = io.read_signals(tmp_path / "sub-01" / "gt.bsig").values
    dg = io.read_signals(tmp_path / "sub-01" / "degraded.bsig").values
    np.testing.assert_allclose(dg, gt, rtol=0, atol=1e-12)


def test_downsample_lowers_ssim(tmp_path):
    spec = SyntheticDatasetSpec(**{**SMALL_SPEC, "n_subjects": 1})
    make_synthetic_dataset(spec, tmp_path, seed=3)
    roi = extract_roi(io.read_mesh(tmp_path / "template.bmesh"), ROI_LABELS)
    param = conformal_disk_map(roi)

    def disks(name):
        s = io.read_signals(tmp_path / "sub-01" / name).take(roi.parent_index)
        return rasterize_series(roi, param, s, 16)

    gt = disks("gt.bsig")
    scores = {}
    for sd in (0.0, 5.0):
        run_downsample(tmp_path, SyntheticDatasetSpec(**{**SMALL_SPEC, "n_subjects": 1, "noise_sd": sd}))
        d = disks("degraded.bsig")
        phys = d.norm.invert(d.grids)
        scores[sd] = np.mean(ssim((phys - gt.norm.offset) / gt.norm.scale * gt.mask, gt.grids, gt.mask))
    assert scores[5.0] < scores[0.0] < 1.0


# ---------------------------------------------------------------------------
# configuration and CLI parsing


def test_config_defaults_and_overrides(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict()
    assert cfg.valid_fraction == 0.2 and cfg.seed == 42 and cfg.resolution == 32
    assert cfg.train_subjects == [f"sub-0{k}" for k in range(1, 7)] and cfg.test_subjects == ["sub-07", "sub-08"]
    assert cfg.bridge.lambda_reg_patchnce == 0.5 and cfg.train_options.epochs == 30
    c2 = ExperimentConfig.load(None, {"bridge.tau": 0.05, "train.generator_arch.base_channels": 8})
    assert c2.bridge.tau == 0.05 and c2.train_options.generator_arch == {"base_channels": 8}
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.load(None, {"bridge.taux": 1})
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_dict({"split": {"train": ["sub-01"], "test": ["sub-01"]}})
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_dict({"bridge": {"tau": -1.0}})
    monkeypatch.setenv("CORTEXBRIDGE_RUN_ROOT", str(tmp_path))
    assert cfg.run_dir() == tmp_path / "desk"
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"resolution": 16}))
    assert ExperimentConfig.load(p, {"seed": 3}).raw["resolution"] == 16


def test_parse_overrides():
    got = parse_overrides(["--bridge.tau", "0.05", "--name=x", "--split.train", '["a"]'])
    assert got == {"bridge.tau": 0.05, "name": "x", "split.train": ["a"]}
    with pytest.raises(ValueError):
        parse_overrides(["--bridge.tau"])


def test_split_slices():
    tr, va = split_slices(100, 0.2, 42, 0)
    assert len(va) == 20 and len(tr) == 80
    assert set(tr) | set(va) == set(range(100)) and not set(tr) & set(va)
    assert np.array_equal(va, split_slices(100, 0.2, 42, 0)[1])


def test_missing_upstream_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(tiny_config(tmp_path / "run")))
    assert main(["eval", "--config", str(cfg)]) == 2
    with pytest.raises(MissingUpstream):
        run_stage("eval", ExperimentConfig.load(cfg))
    assert main(["param", "--config", str(cfg), "--bogus.key", "1"]) == 1


def test_lock_blocks_second_writer(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(tiny_config(tmp_path / "run")))
    with run_lock(tmp_path / "run"):
        assert main(["synth", "--config", str(cfg)]) == 1
    assert not (tmp_path / "run" / ".lock").exists()


# ---------------------------------------------------------------------------
# end to end on a tiny configuration


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(root / "run")))
    for stage in ("synth", "param", "rasterize", "train", "enhance", "resample", "prf", "eval", "report"):
        assert main([stage, "--config", str(cfg_path)]) == 0, stage
    return root, ExperimentConfig.load(cfg_path)


def test_param_stage_quality(tiny_run):
    root, cfg = tiny_run
    info = io.read_json(root / "run" / "param" / "info.json")
    param = io.read_param(root / "run" / "param" / "param.buv")
    assert info["mu_sup"] <= 0.1 and info["n_flipped"] == 0
    assert np.abs(param.mu).max() <= 0.1


def test_report_contents(tiny_run):
    root, cfg = tiny_run
    report = io.read_json(root / "run" / "report" / "report.json")
    validate_report(report)
    assert report["table"]["columns"] == ["Down-Sampled", "Enhanced", "GT"]
    assert report["table"]["rows"]["R2"] == [report["mean_r2"][k] for k in ("degraded", "enhanced", "gt")]
    assert set(report["improvement"]) == {"ssim", "psnr", "frechet", "mean_r2", "ssim_margin"}
    broken = json.loads(json.dumps(report))
    del broken["mean_r2"]["gt"]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(broken)
    header, rows = io.read_csv(root / "run" / "report" / "report.csv")
    n_roi = Run(cfg).roi().submesh.n_vertices
    assert len(rows) == n_roi
    assert header[:3] == ["vertex", "u", "v"] and "r2_enhanced_sub-03" in header
    for fig in report["figures"]:
        assert (root / "run" / "report" / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_split_hygiene(tiny_run):
    root, cfg = tiny_run
    reads = io.read_json(root / "run" / "train" / "access.json")["read"]
    assert reads, "train stage must log its reads"
    for test_subject in cfg.test_subjects:
        assert not any(test_subject in p for p in reads)
    assert all(any(s in p for s in cfg.train_subjects) for p in reads)


def test_stage_idempotent(tiny_run):
    root, cfg = tiny_run
    before = (root / "run" / "report" / "report.json").read_bytes()
    run_stage("enhance", cfg)
    run_stage("resample", cfg)
    run_stage("report", cfg)
    assert (root / "run" / "report" / "report.json").read_bytes() == before


def test_end_to_end_determinism(tiny_run, tmp_path):
    root, cfg = tiny_run
    other = ExperimentConfig.from_dict(tiny_config(tmp_path / "again"))
    run_stage("all", other)
    a = (root / "run" / "report" / "report.json").read_bytes()
    b = (tmp_path / "again" / "report" / "report.json").read_bytes()
    assert a == b


def test_schema_is_valid_draft():
    jsonschema.Draft202012Validator.check_schema(REPORT_SCHEMA)
