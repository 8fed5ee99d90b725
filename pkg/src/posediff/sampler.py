"""Variance-exploding noise schedule and probability-flow ODE sampling."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import NumericalError
from .pose_core import POSE_DIM, CameraIntrinsics, CropSpec, Pose, decode_batch

T_EPS = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric VE schedule ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t``."""

    sigma_min: float = 0.01
    sigma_max: float = 50.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=float)

    def t_of_sigma(self, sigma):
        return np.log(np.asarray(sigma, dtype=float) / self.sigma_min) / np.log(self.sigma_max / self.sigma_min)


def sigma_at(schedule: NoiseSchedule, t):
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    out = schedule.sigma(t)
    return float(out) if out.ndim == 0 else out


def perturb(v0, t, z, schedule: NoiseSchedule):
    """Forward VE perturbation ``v(t) = v0 + sigma(t) z``."""
    sigma = schedule.sigma(t)
    if np.ndim(sigma):
        sigma = sigma[..., None]
    return np.asarray(v0, dtype=float) + sigma * np.asarray(z, dtype=float)


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 50
    num_steps: int = 500
    t_start: float = 1.0
    t_end: float = T_EPS
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.t_end < self.t_start <= 1:
            raise ValueError("need 0 < t_end < t_start <= 1")
        if self.K < 1 or self.num_steps < 1:
            raise ValueError("K and num_steps must be >= 1")


def hypothesis_noise(seed, K, stream=0, dim=POSE_DIM):
    """Standard-normal rows, one independent stream per ``(seed, stream, index)``.

    Drawing hypothesis ``i`` never depends on how many others are drawn, so
    the first ``K`` rows of a larger draw equal a draw of size ``K``.
    """
    out = np.empty((K, dim))
    for i in range(K):
        out[i] = np.random.default_rng([int(seed), int(stream), i]).standard_normal(dim)
    return out


def sample_from_prior_noise(cfg: SamplerConfig, schedule: NoiseSchedule, rng=None, stream=0):
    """Initial hypotheses ``~ N(0, sigma(t_start)^2 I)``.

    With ``rng=None`` rows come from the per-hypothesis streams seeded by
    ``(cfg.seed, stream, i)``; passing a generator draws the whole block from it.
    """
    scale = schedule.sigma(cfg.t_start)
    if rng is not None:
        return scale * rng.standard_normal((cfg.K, POSE_DIM))
    return scale * hypothesis_noise(cfg.seed, cfg.K, stream)


def euler_grid(t_start, t_end, num_steps):
    return np.linspace(t_start, t_end, num_steps + 1)


def integrate_probability_flow(score_fn, init, schedule: NoiseSchedule, t_start, t_end, num_steps,
                               hypotheses_per_row=None):
    """Explicit Euler on the reverse-time probability-flow ODE.

    ``score_fn(v, t)`` receives the whole ``(M, 12)`` state and a scalar time.
    Each step applies ``v += 0.5 * (sigma(t_i)^2 - sigma(t_{i+1})^2) * s(v, t_i)``.

    Returns the final state and the number of score evaluations.
    """
    v = np.array(init, dtype=float, copy=True)
    ts = euler_grid(t_start, t_end, num_steps)
    var = schedule.sigma(ts) ** 2
    for i in range(num_steps):
        s = score_fn(v, ts[i])
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(s), axis=-1))[0])
            if hypotheses_per_row:
                bad = bad % hypotheses_per_row
            raise NumericalError("non-finite score during integration", step=i, index=bad)
        v += 0.5 * (var[i] - var[i + 1]) * s
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(v), axis=-1))[0])
            raise NumericalError("non-finite state during integration", step=i, index=bad)
    return v, num_steps


@dataclass
class HypothesisSet:
    """K sampled 12-vectors for one observation and their decoded poses."""

    raw: np.ndarray
    poses: list = field(default_factory=list)
    clamped: np.ndarray | None = None
    observation_id: str = ""
    seed: int = 0
    config: dict = field(default_factory=dict)
    crop: CropSpec | None = None
    intrinsics: CameraIntrinsics | None = None

    @property
    def K(self):
        return len(self.raw)

    def decode(self):
        if self.crop is None or self.intrinsics is None:
            raise ValueError("decoding needs the crop and camera intrinsics")
        self.poses, self.clamped = decode_batch(self.raw, self.crop, self.intrinsics)
        return self

    def subset(self, k):
        sub = HypothesisSet(self.raw[:k], observation_id=self.observation_id, seed=self.seed,
                            config=dict(self.config, K=k), crop=self.crop, intrinsics=self.intrinsics)
        if self.poses:
            sub.poses = self.poses[:k]
            sub.clamped = self.clamped[:k]
        return sub

    def to_records(self):
        recs = []
        for i, v in enumerate(self.raw):
            rec = {"observation_id": self.observation_id, "index": i, "seed": self.seed, "raw": v.tolist()}
            if self.poses:
                rec["pose"] = self.poses[i].to_dict()
                rec["clamped"] = bool(self.clamped[i])
            if i == 0:
                rec["config"] = self.config
                if self.crop is not None:
                    rec["crop"] = self.crop.to_dict()
                if self.intrinsics is not None:
                    rec["intrinsics"] = asdict(self.intrinsics)
            recs.append(rec)
        return recs

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        if not recs:
            raise ValueError(f"{path}: no hypothesis records")
        head = recs[0]
        hs = cls(
            raw=np.array([r["raw"] for r in recs], dtype=float),
            observation_id=head["observation_id"],
            seed=head.get("seed", 0),
            config=head.get("config", {}),
            crop=CropSpec.from_dict(head["crop"]) if "crop" in head else None,
            intrinsics=CameraIntrinsics(**head["intrinsics"]) if "intrinsics" in head else None,
        )
        if "pose" in head:
            hs.poses = [Pose.from_dict(r["pose"]) for r in recs]
            hs.clamped = np.array([r.get("clamped", False) for r in recs], dtype=bool)
        return hs


def prob_flow_ode_sample(score_fn, cfg: SamplerConfig, schedule: NoiseSchedule, init=None, *,
                         crop=None, intrinsics=None, observation_id="", stream=0):
    """Sample ``cfg.K`` hypotheses for one observation.

    ``score_fn(v, t)`` already has the observation's conditioning bound in.
    Without ``init`` the hypotheses start from prior noise at ``t_start``.
    Poses are decoded once, after integration, when a crop is given.
    """
    if init is None:
        init = sample_from_prior_noise(cfg, schedule, stream=stream)
    init = np.asarray(init, dtype=float)
    raw, _ = integrate_probability_flow(score_fn, init, schedule, cfg.t_start, cfg.t_end, cfg.num_steps)
    hs = HypothesisSet(raw=raw, observation_id=observation_id, seed=cfg.seed, config=asdict(cfg),
                       crop=crop, intrinsics=intrinsics)
    if crop is not None and intrinsics is not None:
        hs.decode()
    return hs
