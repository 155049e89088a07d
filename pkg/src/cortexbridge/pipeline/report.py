"""Final report: JSON summary, per-vertex CSV and disk renders."""
from __future__ import annotations

import numpy as np
import jsonschema

from .. import io
from ..braindisk import BrainDisk, export_image
from ..errors import MissingUpstream

_METRIC = {
    "type": "object",
    "required": ["ssim", "ms_ssim", "psnr_db", "frechet_distance", "n_slices", "vertex_mse"],
    "properties": {
        "ssim": {"type": "number"},
        "ms_ssim": {"type": "number"},
        "psnr_db": {"type": "number"},
        "frechet_distance": {"type": "number", "minimum": 0},
        "n_slices": {"type": "integer", "minimum": 1},
        "vertex_mse": {"type": ["number", "null"]},
    },
}

_NULLABLE = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "seed", "config", "test_subjects", "metrics", "mean_r2", "table", "improvement", "param",
                 "validation", "figures"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "test_subjects": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "metrics": {
            "type": "object",
            "required": ["degraded_vs_gt", "enhanced_vs_gt"],
            "properties": {"degraded_vs_gt": _METRIC, "enhanced_vs_gt": _METRIC},
        },
        "mean_r2": {
            "type": "object",
            "required": ["degraded", "enhanced", "gt"],
            "properties": {k: {"type": "number", "maximum": 100} for k in ("degraded", "enhanced", "gt")},
        },
        "table": {
            "type": "object",
            "required": ["columns", "rows"],
            "properties": {
                "columns": {"const": ["Down-Sampled", "Enhanced", "GT"]},
                "rows": {
                    "type": "object",
                    "required": ["SSIM", "PSNR", "FID", "R2"],
                    "additionalProperties": {"type": "array", "items": _NULLABLE, "minItems": 3, "maxItems": 3},
                },
            },
        },
        "improvement": {
            "type": "object",
            "required": ["ssim", "psnr", "frechet", "mean_r2", "ssim_margin"],
            "properties": {
                "ssim": {"type": "boolean"},
                "psnr": {"type": "boolean"},
                "frechet": {"type": "boolean"},
                "mean_r2": {"type": "boolean"},
                "ssim_margin": {"type": "number"},
            },
        },
        "param": {"type": "object"},
        "validation": {"type": "object"},
        "figures": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_report(report: dict):
    """Raise ``jsonschema.ValidationError`` if the report does not match the schema."""
    jsonschema.validate(report, REPORT_SCHEMA)


def _portable_config(raw: dict) -> dict:
    """Config without machine-specific locations, so reports compare across directories."""
    cfg = {k: v for k, v in raw.items() if k not in ("run_dir", "paths")}
    cfg["train"] = {k: v for k, v in raw["train"].items() if k != "checkpoint_dir"}
    return cfg


def _render(run, subject, t_index) -> list[str]:
    names = []
    for kind in ("gt", "degraded", "enhanced"):
        series = io.read_disks(run.disk_file(subject, kind))
        t = min(t_index, len(series) - 1)
        disk = BrainDisk(series.grids[t], series.mask, series.norm, t)
        name = f"figures/{subject}_{kind}_t{t:03d}.png"
        export_image(run.path("report", name), disk)
        names.append(name)
    return names


def export_report(run) -> dict:
    """Write ``report/report.json``, ``report/report.csv`` and PNG renders.

    The CSV has one row per ROI vertex: its disk coordinates and, for each
    test subject, the R^2 of the ground-truth, degraded and enhanced fits
    (the data behind an R^2 scatter / heat map).
    """
    cfg = run.cfg
    path = run.path("eval", "metrics.json")
    if not path.exists():
        raise MissingUpstream(f"missing upstream artifacts: {path}")
    ev = io.read_json(path)
    param = run.param()
    m_d, m_e = ev["metrics"]["degraded"], ev["metrics"]["enhanced"]
    r2 = ev["mean_r2"]
    report = {
        "name": cfg.raw["name"],
        "seed": cfg.seed,
        "config": _portable_config(cfg.raw),
        "test_subjects": cfg.test_subjects,
        "metrics": {"degraded_vs_gt": m_d, "enhanced_vs_gt": m_e},
        "mean_r2": {"degraded": r2["degraded"], "enhanced": r2["enhanced"], "gt": r2["gt"]},
        "table": {
            "columns": ["Down-Sampled", "Enhanced", "GT"],
            "rows": {
                "SSIM": [m_d["ssim"], m_e["ssim"], None],
                "PSNR": [m_d["psnr_db"], m_e["psnr_db"], None],
                "FID": [m_d["frechet_distance"], m_e["frechet_distance"], None],
                "R2": [r2["degraded"], r2["enhanced"], r2["gt"]],
            },
        },
        "improvement": {
            "ssim": m_e["ssim"] > m_d["ssim"],
            "psnr": m_e["psnr_db"] > m_d["psnr_db"],
            "frechet": m_e["frechet_distance"] < m_d["frechet_distance"],
            "mean_r2": r2["enhanced"] > r2["degraded"],
            "ssim_margin": m_e["ssim"] - m_d["ssim"],
        },
        "param": io.read_json(run.path("param", "info.json")) if run.path("param", "info.json").exists() else {},
        "validation": io.read_json(run.path("train", "validation.json"))
        if run.path("train", "validation.json").exists() else {},
        "figures": [],
    }
    t_mid = cfg.dataset_spec.n_timepoints // 2
    report["figures"] = _render(run, cfg.test_subjects[0], t_mid)

    header = ["vertex", "u", "v"]
    cols = [np.arange(len(param.uv)), param.uv[:, 0], param.uv[:, 1]]
    for sub in cfg.test_subjects:
        for kind in ("gt", "degraded", "enhanced"):
            idx, params = io.read_prf_csv(run.prf_file(sub, kind))
            header.append(f"r2_{kind}_{sub}")
            cols.append(np.array([p.r2_percent for p in params]))
    rows = [[int(c[i]) if j == 0 else float(c[i]) for j, c in enumerate(cols)] for i in range(len(param.uv))]
    io.write_csv(run.path("report", "report.csv"), header, rows)

    validate_report(report)
    io.write_json(run.path("report", "report.json"), report)
    return report
