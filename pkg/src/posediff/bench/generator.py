"""Synthetic scenes and the observation features that stand in for image encoders.

Each feature is built so that what it can and cannot reveal about the pose
is known exactly:

* ``obs_a`` is a fixed linear map of the 9 rotation entries plus noise. For
  symmetric objects the rotation is first spun by a uniform random angle
  about the symmetry axis, so the feature carries no information about it.
* ``obs_b`` encodes the crop-relative offsets and the *relative* depth
  ``log(t_z) - scale``, so depth alone is ambiguous up to object scale.
* ``global_feature`` reveals the scale with informativeness
  ``scale_context_strength``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..pose_core import BBox2D, CameraIntrinsics, CropSpec, Pose, axis_angle_matrix, dzi_augment, \
    dzi_inference_crop, pose_encode
from .config import BenchConfig, CategorySpec

SCHEMA = "POSEBENCH-V1"
OFFSET_GAIN = 5.0


@dataclass(frozen=True)
class NoiseLevels:
    obs_a: float = 0.02
    obs_b: float = 0.03
    global_: float = 0.1
    detector: float = 0.03

    @classmethod
    def from_dict(cls, d):
        return cls(d["obs_a"], d["obs_b"], d["global"], d["detector"])


@dataclass(frozen=True)
class FeatureWorld:
    """Fixed random maps shared by every sample of a benchmark."""

    W_a: np.ndarray
    W_b: np.ndarray
    W_g: np.ndarray

    @classmethod
    def create(cls, d_obs_a=16, d_obs_b=8, d_global=4, seed=7):
        if d_obs_a < 9 or d_obs_b < 3 or d_global < 1:
            raise ValueError("feature widths must be at least 9, 3 and 1")
        rng = np.random.default_rng(seed)
        W_a = np.linalg.qr(rng.standard_normal((d_obs_a, 9)))[0]
        W_b = np.linalg.qr(rng.standard_normal((d_obs_b, 3)))[0]
        g = rng.standard_normal((d_global, 1))
        return cls(W_a, W_b, g / np.linalg.norm(g))

    @classmethod
    def from_config(cls, cfg: BenchConfig):
        f = cfg["features"]
        return cls.create(f["d_obs_a"], f["d_obs_b"], f["d_global"], f["world_seed"])


@dataclass
class SceneSample:
    sample_id: int
    category_id: int
    gt_pose: Pose
    bbox: BBox2D
    crop: CropSpec
    intrinsics: CameraIntrinsics
    obs_a: np.ndarray
    obs_b: np.ndarray
    global_feature: np.ndarray
    handle_visible: bool
    scale_latent: float
    frame_index: int | None = None

    @property
    def target(self):
        return pose_encode(self.gt_pose, self.crop, self.intrinsics)

    def to_record(self):
        return {
            "sample_id": self.sample_id,
            "category_id": self.category_id,
            "gt_pose": self.gt_pose.to_dict(),
            "bbox": [self.bbox.center_x, self.bbox.center_y, self.bbox.height, self.bbox.width],
            "crop": self.crop.to_dict(),
            "intrinsics": [self.intrinsics.f_x, self.intrinsics.f_y, self.intrinsics.c_x, self.intrinsics.c_y],
            "obs_a": self.obs_a.tolist(),
            "obs_b": self.obs_b.tolist(),
            "global_feature": self.global_feature.tolist(),
            "handle_visible": bool(self.handle_visible),
            "scale_latent": self.scale_latent,
            "frame_index": self.frame_index,
        }

    @classmethod
    def from_record(cls, r):
        return cls(
            sample_id=int(r["sample_id"]), category_id=int(r["category_id"]), gt_pose=Pose.from_dict(r["gt_pose"]),
            bbox=BBox2D(*r["bbox"]), crop=CropSpec.from_dict(r["crop"]), intrinsics=CameraIntrinsics(*r["intrinsics"]),
            obs_a=np.array(r["obs_a"]), obs_b=np.array(r["obs_b"]), global_feature=np.array(r["global_feature"]),
            handle_visible=bool(r["handle_visible"]), scale_latent=float(r["scale_latent"]),
            frame_index=r.get("frame_index"))


def random_pose(cat: CategorySpec, rng):
    """Uniform rotation, uniform translation in the category box, log-normal size.

    Returns ``(pose, xi)`` where ``xi`` is the standard-normal scale latent.
    """
    R = Rotation.random(random_state=rng).as_matrix()
    lo = np.array([r[0] for r in cat.translation_range])
    hi = np.array([r[1] for r in cat.translation_range])
    T = lo + (hi - lo) * rng.random(3)
    xi = float(rng.standard_normal())
    size = np.exp(np.asarray(cat.size_log_mean) + np.asarray(cat.size_log_std) * xi)
    return Pose(R, T, size), xi


def projected_bbox(pose: Pose, K: CameraIntrinsics):
    signs = np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)], dtype=float)
    pts = (0.5 * signs * pose.size) @ pose.rotation.T + pose.translation
    u = K.f_x * pts[:, 0] / pts[:, 2] + K.c_x
    v = K.f_y * pts[:, 1] / pts[:, 2] + K.c_y
    return BBox2D(0.5 * (u.min() + u.max()), 0.5 * (v.min() + v.max()), v.max() - v.min(), u.max() - u.min())


def scale_latent(pose: Pose, cat: CategorySpec):
    z = (np.log(pose.size) - np.asarray(cat.size_log_mean)) / np.asarray(cat.size_log_std)
    return float(z.mean())


def make_observation(gt: Pose, cat: CategorySpec, noise: NoiseLevels, rng, *, world: FeatureWorld,
                     K: CameraIntrinsics, augment=False, handle_visible=True, sample_id=0, frame_index=None):
    """Synthesize the detector box, crop and the three feature vectors for ``gt``."""
    box = projected_bbox(gt, K)
    s_o = box.side
    jitter = noise.detector
    box = BBox2D(box.center_x + jitter * s_o * rng.standard_normal(), box.center_y + jitter * s_o * rng.standard_normal(),
                 box.height * np.exp(jitter * rng.standard_normal()), box.width * np.exp(jitter * rng.standard_normal()))
    crop = dzi_augment(box, rng) if augment else dzi_inference_crop(box)
    v = pose_encode(gt, crop, K)

    R_obs = gt.rotation
    if cat.symmetry.is_symmetric(handle_visible):
        R_obs = R_obs @ axis_angle_matrix(cat.symmetry.axis, rng.uniform(-np.pi, np.pi))
    obs_a = world.W_a @ R_obs.reshape(9) + noise.obs_a * rng.standard_normal(len(world.W_a))

    xi = scale_latent(gt, cat)
    rel_depth = np.log(v[8]) - cat.depth_scale_std * xi
    obs_b = world.W_b @ np.array([OFFSET_GAIN * v[6], OFFSET_GAIN * v[7], rel_depth])
    obs_b = obs_b + noise.obs_b * rng.standard_normal(len(world.W_b))

    k = cat.scale_context_strength
    context = k * xi + np.sqrt(1.0 - k * k) * rng.standard_normal()
    g = world.W_g[:, 0] * context + noise.global_ * rng.standard_normal(len(world.W_g))
    return SceneSample(sample_id, cat.id, gt, box, crop, K, obs_a, obs_b, g, bool(handle_visible), xi, frame_index)


def _sample(cfg: BenchConfig, world, split_seed, i, augment):
    cats = cfg.categories
    cat = cats[i % len(cats)]
    rng = np.random.default_rng([split_seed, i])
    gt, _ = random_pose(cat, rng)
    handle = bool(rng.random() < cfg["data"]["handle_visible_prob"])
    return make_observation(gt, cat, NoiseLevels.from_dict(cfg["noise"]), rng, world=world, K=cfg.intrinsics,
                            augment=augment, handle_visible=handle, sample_id=i)


def generate_split(cfg: BenchConfig, split):
    """Samples of one split; category of sample ``i`` is ``categories[i % C]``."""
    world = FeatureWorld.from_config(cfg)
    data = cfg["data"]
    n = data["n_train"] if split == "train" else data["n_test"]
    seed = data["train_seed"] if split == "train" else data["test_seed"]
    augment = split == "train" and data["augment_train"]
    return [_sample(cfg, world, seed, i, augment) for i in range(n)]


def generate_dataset(cfg: BenchConfig, out_dir=None):
    train, test = generate_split(cfg, "train"), generate_split(cfg, "test")
    if out_dir is not None:
        out = Path(out_dir)
        write_samples(out / "train.ndjson", train, cfg, "train")
        write_samples(out / "test.ndjson", test, cfg, "test")
    return train, test


def make_sequence(cfg: BenchConfig, category, n_frames, *, max_rot_deg=2.0, max_trans_m=0.01, seed=0,
                  teleport_frame=None, teleport_m=0.3):
    """Slowly moving object: constant angular and linear velocity within the limits."""
    cat = cfg.category(category)
    world = FeatureWorld.from_config(cfg)
    noise = NoiseLevels.from_dict(cfg["noise"])
    rng = np.random.default_rng([seed, 99])
    pose, _ = random_pose(cat, rng)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    dR = axis_angle_matrix(axis, np.radians(max_rot_deg) * rng.uniform(0.5, 1.0))
    vel = rng.standard_normal(3)
    vel *= max_trans_m * rng.uniform(0.5, 1.0) / np.linalg.norm(vel)
    frames = []
    for f in range(n_frames):
        if f:
            T = pose.translation + vel
            if teleport_frame is not None and f == teleport_frame:
                T = T + np.array([teleport_m, 0.0, 0.0])
            pose = Pose(dR @ pose.rotation, T, pose.size)
        frames.append(make_observation(pose, cat, noise, np.random.default_rng([seed, 100, f]), world=world,
                                       K=cfg.intrinsics, handle_visible=True, sample_id=f, frame_index=f))
    return frames


# -- persistence -------------------------------------------------------------------


def write_samples(path, samples, cfg: BenchConfig | None = None, split=None):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            header = {"schema": SCHEMA, "split": split, "n": len(samples),
                      "config_digest": cfg.digest() if cfg is not None else None}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for s in samples:
                fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc.strerror}") from exc


def read_samples(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc.strerror}") from exc
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}: expected schema {SCHEMA}, found {header.get('schema')!r}")
    return [SceneSample.from_record(json.loads(line)) for line in lines[1:] if line.strip()]


def features(samples):
    """``(X, y)`` arrays for :class:`~posediff.estimator.DiffusionPoseEstimator`."""
    from ..estimator import pack_conditions

    X = pack_conditions([s.category_id for s in samples], np.array([s.obs_a for s in samples]),
                        np.array([s.obs_b for s in samples]), np.array([s.global_feature for s in samples]))
    y = np.array([s.target for s in samples])
    return X, y
