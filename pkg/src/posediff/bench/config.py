"""Benchmark configuration (JSON files, every key documented in the README)."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError
from ..metrics import SymmetrySpec
from ..pose_core import CameraIntrinsics


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    symmetry: SymmetrySpec
    size_log_mean: tuple
    size_log_std: tuple
    translation_range: tuple
    scale_context_strength: float = 1.0

    def __post_init__(self):
        if self.id < 1:
            raise ConfigError(f"category {self.name}: id must be >= 1")
        if len(self.size_log_mean) != 3 or len(self.size_log_std) != 3:
            raise ConfigError(f"category {self.name}: size parameters need three entries")
        if any(s <= 0 for s in self.size_log_std):
            raise ConfigError(f"category {self.name}: size_log_std must be positive")
        if not 0 <= self.scale_context_strength <= 1:
            raise ConfigError(f"category {self.name}: scale_context_strength must lie in [0, 1]")
        lo = np.array([r[0] for r in self.translation_range])
        hi = np.array([r[1] for r in self.translation_range])
        if lo.shape != (3,) or np.any(hi < lo) or lo[2] <= 0:
            raise ConfigError(f"category {self.name}: translation_range needs three [lo, hi] pairs with positive depth")

    @property
    def depth_scale_std(self):
        return float(np.mean(self.size_log_std))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        allowed = {"id", "name", "symmetry", "size_median", "size_log_mean", "size_log_std", "translation_range",
                   "scale_context_strength"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown category keys: {sorted(unknown)}")
        if "size_median" in d:
            d["size_log_mean"] = tuple(float(np.log(s)) for s in d.pop("size_median"))
        std = d["size_log_std"]
        d["size_log_std"] = tuple(float(s) for s in (std if not np.isscalar(std) else [std] * 3))
        d["size_log_mean"] = tuple(float(s) for s in d["size_log_mean"])
        d["translation_range"] = tuple(tuple(float(x) for x in r) for r in d["translation_range"])
        d["symmetry"] = SymmetrySpec.from_dict(d.get("symmetry", {}))
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["symmetry"] = {"kind": self.symmetry.kind, "axis": list(self.symmetry.axis)}
        return d


SECTIONS = {
    "experiment_id": "desk",
    "seed": 0,
    "checkpoint": None,
    "camera": {"f_x": 600.0, "f_y": 600.0, "c_x": 320.0, "c_y": 240.0},
    "features": {"d_obs_a": 16, "d_obs_b": 8, "d_global": 4, "world_seed": 7},
    "noise": {"obs_a": 0.02, "obs_b": 0.03, "global": 0.1, "detector": 0.03},
    "data": {"n_train": 40000, "n_test": 1000, "train_seed": None, "test_seed": None,
             "handle_visible_prob": 0.5, "augment_train": True},
    "model": {"obs_embed_dim": 64, "category_embed_dim": 32, "pose_embed_dim": 128, "time_embed_dim": 64,
              "trunk_dim": 256, "trunk_layers": 2, "head_hidden": 128, "head_layers": 3,
              "global_to_rotation": True, "condition_dropout": 0.1, "sigma_min": 0.01, "sigma_max": 50.0,
              "sigma_data": 0.05, "fourier_scale": 4.0, "compute_dtype": "float32"},
    "train": {"n_steps": 60000, "batch_size": 128, "learning_rate": 1e-3, "lr_decay": "cosine",
              "ema_decay": 0.999},
    "sampler": {"K": 50, "num_steps": 500, "t_end": 1e-5, "chunk_rows": 8192},
    "aggregation": {"bandwidth_rot": 0.2, "bandwidth_trans": 0.1, "bandwidth_size": 0.05},
    "metrics": {"rot_deg": 10.0, "trans_cm": 10.0, "iou_levels": [0.5, 0.75], "iou_samples": 10000},
    "experiments": {
        "k_values": [1, 10, 50, 100],
        "n_eval": 400,
        "mode_vs_mean": {"trials": 500, "majority": 35, "minority": 15, "spread": 0.25, "separation": 5.0},
        "condition_ablation": {"n_instances": 500, "K": 10, "num_steps": 200},
        "symmetry_demo": {"n_observations": 10, "K": 50},
        "tracking": {"n_frames": 50, "category": "camera", "max_rot_deg": 2.0, "max_trans_m": 0.01,
                     "noise_std": 0.1, "K": 50, "teleport_frame": None, "teleport_m": 0.3},
    },
    "categories": None,
}

DEFAULT_CATEGORIES = [
    {"id": 1, "name": "bottle", "symmetry": {"kind": "axis_symmetric", "axis": [0, 1, 0]},
     "size_median": [0.08, 0.22, 0.08], "size_log_std": 0.15,
     "translation_range": [[-0.25, 0.25], [-0.2, 0.2], [0.6, 1.4]], "scale_context_strength": 1.0},
    {"id": 2, "name": "bowl", "symmetry": {"kind": "axis_symmetric", "axis": [0, 1, 0]},
     "size_median": [0.17, 0.08, 0.17], "size_log_std": 0.15,
     "translation_range": [[-0.25, 0.25], [-0.2, 0.2], [0.6, 1.4]], "scale_context_strength": 1.0},
    {"id": 3, "name": "camera", "symmetry": {"kind": "asymmetric"},
     "size_median": [0.12, 0.09, 0.10], "size_log_std": 0.15,
     "translation_range": [[-0.25, 0.25], [-0.2, 0.2], [0.6, 1.4]], "scale_context_strength": 1.0},
    {"id": 4, "name": "laptop", "symmetry": {"kind": "asymmetric"},
     "size_median": [0.30, 0.20, 0.25], "size_log_std": 0.15,
     "translation_range": [[-0.25, 0.25], [-0.2, 0.2], [0.6, 1.4]], "scale_context_strength": 1.0},
]


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class BenchConfig:
    raw: dict
    categories: list = field(default_factory=list)
    source: str | None = None

    @classmethod
    def from_dict(cls, d, source=None):
        raw = _merge(SECTIONS, d)
        cats = [CategorySpec.from_dict(c) for c in (raw["categories"] or DEFAULT_CATEGORIES)]
        ids = [c.id for c in cats]
        if len(set(ids)) != len(ids):
            raise ConfigError("category ids must be unique")
        raw["categories"] = [c.to_dict() for c in cats]
        data = raw["data"]
        if data["train_seed"] is None:
            data["train_seed"] = 2 * int(raw["seed"]) + 1
        if data["test_seed"] is None:
            data["test_seed"] = 2 * int(raw["seed"]) + 2
        if data["train_seed"] == data["test_seed"]:
            raise ConfigError("train_seed and test_seed must differ")
        return cls(raw=raw, categories=cats, source=source)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, source=str(path))

    @classmethod
    def builtin(cls, name="desk"):
        text = resources.files("posediff.bench").joinpath("configs", f"{name}.json").read_text()
        return cls.from_dict(json.loads(text), source=f"builtin:{name}")

    def with_seed(self, seed):
        if seed is None:
            return self
        d = copy.deepcopy(self.raw)
        d["seed"] = int(seed)
        d["data"]["train_seed"] = None if self.raw["data"]["train_seed"] == 2 * int(self.raw["seed"]) + 1 else d["data"]["train_seed"]
        d["data"]["test_seed"] = None if self.raw["data"]["test_seed"] == 2 * int(self.raw["seed"]) + 2 else d["data"]["test_seed"]
        return BenchConfig.from_dict(d, self.source)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def intrinsics(self):
        return CameraIntrinsics(**self.raw["camera"])

    @property
    def symmetries(self):
        return {c.id: c.symmetry for c in self.categories}

    def category(self, key):
        for c in self.categories:
            if c.id == key or c.name == key:
                return c
        raise ConfigError(f"no category {key!r}")

    def estimator_params(self):
        f, m, t, s, a = (self.raw[k] for k in ("features", "model", "train", "sampler", "aggregation"))
        return dict(
            n_categories=max(c.id for c in self.categories), d_obs_a=f["d_obs_a"], d_obs_b=f["d_obs_b"],
            d_global=f["d_global"], **m, **t, n_hypotheses=s["K"], n_ode_steps=s["num_steps"], t_end=s["t_end"],
            chunk_rows=s["chunk_rows"], **a, random_state=self.seed)

    def to_json(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]
