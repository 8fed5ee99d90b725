"""Pose parameterisation.

A pose is a rotation, a metric translation and a metric box size. The
diffusion state packs it into a 12-vector laid out as::

    [a1 (3) | a2 (3) | dx dy tz (3) | sx sy sz (3)]

where ``a1, a2`` are the first two columns of the rotation (6-D
representation) and ``(dx, dy, tz)`` is the scale-invariant translation
relative to a zoomed crop of the object.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import CropDomainError, DegenerateRotationError, InvalidRotationError

ROT = slice(0, 6)
SITE_SLICE = slice(6, 9)
SIZE = slice(9, 12)
POSE_DIM = 12

ORTHONORMAL_TOL = 1e-6
MIN_NORM = 1e-9
MIN_ANGLE = 1e-6
TZ_MIN = 1e-3

ZOOM_RATIO = 1.5
DZI_SHIFT_RATIO = 0.25
DZI_SCALE_RATIO = 0.25
PATCH_SIZE = 256.0


def _check_rotation(R, tol=ORTHONORMAL_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise InvalidRotationError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3g})")
    if np.linalg.det(R) <= 0:
        raise InvalidRotationError("matrix has negative determinant")
    return R


@dataclass(frozen=True)
class Pose:
    """Rigid pose plus metric 3-D box size."""

    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        s = np.asarray(self.size, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        if not np.all(s > 0):
            raise ValueError(f"size components must be strictly positive, got {s}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "size", s)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and np.array_equal(self.size, other.size)
        )

    __hash__ = None

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "size": self.size.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]), np.array(d["size"]))


@dataclass(frozen=True)
class BBox2D:
    center_x: float
    center_y: float
    height: float
    width: float

    def __post_init__(self):
        if not (self.height > 0 and self.width > 0):
            raise ValueError(f"bounding box needs positive height and width, got h={self.height} w={self.width}")

    @property
    def side(self):
        return max(self.height, self.width)


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, point):
        X, Y, Z = np.asarray(point, dtype=float)
        return self.f_x * X / Z + self.c_x, self.f_y * Y / Z + self.c_y

    def as_matrix(self):
        return np.array([[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CropSpec:
    """Crop centre and box in image pixels plus the zoom ratio ``r = s_zoom / s_o``."""

    center_x: float
    center_y: float
    box_h: float
    box_w: float
    s_zoom: float
    ratio: float

    def __post_init__(self):
        if not (self.ratio > 0 and self.s_zoom > 0):
            raise ValueError("crop ratio and zoomed patch size must be positive")

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in ("center_x", "center_y", "box_h", "box_w", "s_zoom", "ratio")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


# --- rotations -------------------------------------------------------------


def _cross(a, b):
    # np.cross has a large fixed overhead for single 3-vectors
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def rot6d_to_matrix(r6, *, index_offset=0):
    """Gram-Schmidt map from ``[a1 | a2]`` to a rotation matrix.

    Accepts a single 6-vector or an ``(..., 6)`` batch and returns ``(..., 3, 3)``
    with columns ``b1, b2, b3``.

    Raises:
        DegenerateRotationError: ``a1`` vanishes or ``a2`` is parallel to it.
            For batches the error carries the flat index of the first bad row.
    """
    r6 = np.asarray(r6, dtype=float)
    if r6.shape[-1] != 6:
        raise ValueError(f"6-D rotation must have trailing dimension 6, got {r6.shape}")
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    cross = np.linalg.norm(_cross(a1, a2), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sin_angle = cross / (n1 * n2)
    bad = ~(n1 > MIN_NORM) | ~(n2 > MIN_NORM) | ~(sin_angle > np.sin(MIN_ANGLE))
    if np.any(bad):
        flat = int(np.flatnonzero(np.ravel(bad))[0]) + index_offset
        idx = flat if r6.ndim > 1 else None
        raise DegenerateRotationError("6-D rotation is degenerate (zero or parallel columns)", index=idx)
    b1 = a1 / n1[..., None]
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    b3 = _cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R):
    """First two columns of a rotation, concatenated."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        _check_rotation(R)
    else:
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(axis=(-1, -2))
        if np.any(err > ORTHONORMAL_TOL) or np.any(np.linalg.det(R) <= 0):
            raise InvalidRotationError("batch contains a non-rotation matrix")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# --- scale-invariant translation --------------------------------------------


def site_encode(object_center, T_z, crop: CropSpec):
    """Offsets of the projected object centre from the crop centre, plus zoomed depth.

    Returns ``np.array([dx, dy, tz])``.
    """
    if crop.box_w == 0 or crop.box_h == 0:
        raise CropDomainError(f"crop box has zero extent (h={crop.box_h}, w={crop.box_w})")
    O_x, O_y = object_center
    return np.array(
        [
            (O_x - crop.center_x) / crop.box_w,
            (O_y - crop.center_y) / crop.box_h,
            T_z / crop.ratio,
        ]
    )


def site_decode(site, crop: CropSpec, K: CameraIntrinsics):
    """Metric translation from SITE values.

    The crop centre is taken relative to the principal point, so the usual
    pinhole back-projection holds for off-centre principal points too.
    """
    dx, dy, tz = np.asarray(site, dtype=float)
    T_z = crop.ratio * tz
    T_x = (dx * crop.box_w + crop.center_x - K.c_x) * T_z / K.f_x
    T_y = (dy * crop.box_h + crop.center_y - K.c_y) * T_z / K.f_y
    return np.array([T_x, T_y, T_z])


def pose_encode(pose: Pose, crop: CropSpec, K: CameraIntrinsics):
    """Pack a pose into the 12-D diffusion state for a given crop."""
    center = K.project(pose.translation)
    site = site_encode(center, pose.translation[2], crop)
    return np.concatenate([matrix_to_rot6d(pose.rotation), site, pose.size])


def _decode(v, crop, K, index=None):
    v = np.asarray(v, dtype=float)
    if v.shape != (POSE_DIM,):
        raise ValueError(f"pose vector must have shape (12,), got {v.shape}")
    try:
        R = rot6d_to_matrix(v[ROT])
    except DegenerateRotationError as exc:
        raise DegenerateRotationError("cannot decode rotation", index=index) from exc
    site = v[SITE_SLICE].copy()
    clamped = not site[2] > 0
    if clamped:
        site[2] = TZ_MIN
    size = np.maximum(v[SIZE], TZ_MIN)
    clamped = clamped or bool(np.any(v[SIZE] <= 0))
    return Pose(R, site_decode(site, crop, K), size), clamped


def pose_decode(v, crop: CropSpec, K: CameraIntrinsics) -> Pose:
    """Inverse of :func:`pose_encode`.

    Non-positive zoomed depth (or size) is clamped to ``TZ_MIN``; use
    :func:`decode_batch` to learn whether that happened.
    """
    return _decode(v, crop, K)[0]


def decode_batch(V, crop: CropSpec, K: CameraIntrinsics):
    """Decode ``(N, 12)`` vectors; returns ``(poses, clamped_mask)``."""
    V = np.asarray(V, dtype=float)
    poses, flags = [], []
    for i, v in enumerate(V):
        pose, clamped = _decode(v, crop, K, index=i)
        poses.append(pose)
        flags.append(clamped)
    return poses, np.array(flags, dtype=bool)


# --- dynamic zoom-in ---------------------------------------------------------


def dzi_crop(bbox: BBox2D, shift=(0.0, 0.0), scale=1.0, s_zoom=PATCH_SIZE):
    """Square crop around a shifted, rescaled box.

    ``shift`` is in units of the box side ``s_o = max(h, w)``; ``scale``
    multiplies ``s_o``. The crop side is ``ZOOM_RATIO`` times the rescaled side.
    """
    s_o = bbox.side
    s_scaled = s_o * scale
    side = ZOOM_RATIO * s_scaled
    return CropSpec(
        center_x=bbox.center_x + shift[0] * s_o,
        center_y=bbox.center_y + shift[1] * s_o,
        box_h=side,
        box_w=side,
        s_zoom=s_zoom,
        ratio=s_zoom / s_scaled,
    )


def dzi_augment(bbox: BBox2D, rng_seed, s_zoom=PATCH_SIZE):
    """Training-time crop: uniform shift of up to 25% of the box side and 25% rescale."""
    rng = np.random.default_rng(rng_seed)
    shift = rng.uniform(-DZI_SHIFT_RATIO, DZI_SHIFT_RATIO, size=2)
    scale = rng.uniform(1.0 - DZI_SCALE_RATIO, 1.0 + DZI_SCALE_RATIO)
    return dzi_crop(bbox, shift, scale, s_zoom)


def dzi_inference_crop(bbox: BBox2D, s_zoom=PATCH_SIZE):
    return dzi_crop(bbox, (0.0, 0.0), 1.0, s_zoom)
