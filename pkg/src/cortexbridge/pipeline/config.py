"""Experiment configuration: one JSON file plus dotted command-line overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .. import io
from ..bridge import BridgeConfig, TrainOptions
from ..conformal import ConformalOptions
from ..errors import ConfigInvalid
from ..prf import PrfFitOptions
from .synthetic import ROI_LABELS, SyntheticDatasetSpec

RUN_ROOT_ENV = "CORTEXBRIDGE_RUN_ROOT"

DEFAULTS = {
    "name": "desk",
    "seed": 42,
    "run_dir": None,
    "resolution": 32,
    "roi_labels": list(ROI_LABELS),
    "paths": {"dataset": "dataset"},
    "dataset": SyntheticDatasetSpec().to_dict(),
    "split": {
        "train": ["sub-01", "sub-02", "sub-03", "sub-04", "sub-05", "sub-06"],
        "test": ["sub-07", "sub-08"],
        "valid_fraction": 0.2,
    },
    "conformal": {"eps_mu": 0.1, "max_refine_iters": 20, "solver_tol": 1e-10},
    "bridge": BridgeConfig().to_dict(),
    "train": {k: v for k, v in TrainOptions().to_dict().items() if k != "checkpoint_dir"},
    "enhance": {"seed": 0},
    "prf": {"n_centers": 8, "sigma_factors": [0.5, 1.0, 2.0, 4.0], "refine": True, "maxfev": 500,
            "xatol": 1e-6, "fatol": 1e-6},
    "metrics": {"feature_seed": 0},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("generator_arch", "critic_arch"):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """Interpret a command-line value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> dict:
    """Set ``cfg["a"]["b"] = value`` for ``dotted == "a.b"``; unknown keys are errors."""
    out = copy.deepcopy(cfg)
    keys = dotted.split(".")
    node = out
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise ConfigInvalid(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigInvalid(f"{'.'.join(keys[: i + 1])!r} is not a section")
    leaf = keys[-1]
    free = len(keys) >= 2 and keys[-2] in ("generator_arch", "critic_arch")
    if not isinstance(node, dict) or (leaf not in node and not free):
        raise ConfigInvalid(f"unknown config key {dotted!r}")
    node[leaf] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration.

    ``raw`` is the full merged dictionary (defaults + file + overrides); the
    typed option objects are derived from it.
    """

    raw: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = io.read_json(path) if path is not None else {}
        merged = _merge(DEFAULTS, raw)
        for k, v in (overrides or {}).items():
            merged = apply_override(merged, k, v)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        raw = self.raw
        for k, v in dotted.items():
            raw = apply_override(raw, k.replace("__", "."), v)
        cfg = ExperimentConfig(raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def save(self, path):
        io.write_json(path, self.raw)

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def resolution(self) -> int:
        return int(self.raw["resolution"])

    @property
    def train_subjects(self) -> list[str]:
        return list(self.raw["split"]["train"])

    @property
    def test_subjects(self) -> list[str]:
        return list(self.raw["split"]["test"])

    @property
    def valid_fraction(self) -> float:
        return float(self.raw["split"]["valid_fraction"])

    @property
    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec.from_dict(self.raw["dataset"])

    @property
    def conformal(self) -> ConformalOptions:
        return ConformalOptions(**self.raw["conformal"])

    @property
    def bridge(self) -> BridgeConfig:
        return BridgeConfig.from_dict(self.raw["bridge"])

    @property
    def train_options(self) -> TrainOptions:
        d = dict(self.raw["train"])
        d["betas"] = tuple(d["betas"])
        return TrainOptions(**d)

    @property
    def prf_options(self) -> PrfFitOptions:
        d = dict(self.raw["prf"])
        d["sigma_factors"] = tuple(d["sigma_factors"])
        return PrfFitOptions(**d)

    def run_dir(self) -> Path:
        """Explicit ``run_dir``, else ``$CORTEXBRIDGE_RUN_ROOT/<name>``, else ``./runs/<name>``."""
        if self.raw["run_dir"]:
            return Path(self.raw["run_dir"])
        root = os.environ.get(RUN_ROOT_ENV)
        return Path(root if root else "runs") / self.raw["name"]

    def dataset_dir(self) -> Path:
        p = Path(self.raw["paths"]["dataset"])
        return p if p.is_absolute() else self.run_dir() / p

    def validate(self):
        r = self.raw
        try:
            self.dataset_spec
            self.conformal
            self.bridge
            self.train_options
            self.prf_options
        except ConfigInvalid:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        train, test = set(r["split"]["train"]), set(r["split"]["test"])
        if not train or not test:
            raise ConfigInvalid("train and test subject lists must be nonempty")
        if train & test:
            raise ConfigInvalid(f"train and test subjects overlap: {sorted(train & test)}")
        if not 0.0 <= float(r["split"]["valid_fraction"]) < 1.0:
            raise ConfigInvalid("valid_fraction must lie in [0, 1)")
        if int(r["resolution"]) < 8:
            raise ConfigInvalid("resolution must be at least 8")
        if not r["roi_labels"]:
            raise ConfigInvalid("roi_labels must be nonempty")
