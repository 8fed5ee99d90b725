"""Pose error measures and threshold accuracies (NOCS-style protocol)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .pose_core import Pose

KINDS = ("asymmetric", "axis_symmetric", "conditional_axis")


@dataclass(frozen=True)
class SymmetrySpec:
    """Rotational symmetry of a category about an object-frame axis.

    ``conditional_axis`` is symmetric only when the disambiguating feature
    (a mug handle, say) is not visible.
    """

    kind: str = "asymmetric"
    axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("symmetry axis must be unit length")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))

    def is_symmetric(self, handle_visible=None):
        if self.kind == "axis_symmetric":
            return True
        if self.kind == "conditional_axis":
            return not handle_visible
        return False

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "asymmetric"), tuple(d.get("axis", (0.0, 1.0, 0.0))))


ASYMMETRIC = SymmetrySpec()


def geodesic_deg(R_a, R_b):
    cos = 0.5 * (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rotation_error_deg(R_pred, R_gt, sym: SymmetrySpec = ASYMMETRIC, handle_visible=None):
    """Rotation error in degrees, ignoring rotation about a symmetry axis."""
    if sym.is_symmetric(handle_visible):
        a = np.asarray(sym.axis)
        u, w = np.asarray(R_pred) @ a, np.asarray(R_gt) @ a
        cos = np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w))
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return geodesic_deg(R_pred, R_gt)


def translation_error_cm(t_pred, t_gt):
    return float(100.0 * np.linalg.norm(np.asarray(t_pred, dtype=float) - np.asarray(t_gt, dtype=float)))


def box_corners(pose):
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    local = 0.5 * signs * pose.size
    return local @ pose.rotation.T + pose.translation


def _inside(points, pose):
    local = (points - pose.translation) @ pose.rotation
    return np.all(np.abs(local) < 0.5 * pose.size, axis=1)


def iou3d(pose_a, pose_b, samples=100_000, seed=0):
    """Monte-Carlo IoU of two oriented boxes.

    Points are drawn uniformly in the axis-aligned bound of both boxes; the
    estimate is deterministic for a given seed.
    """
    if samples < 10_000:
        raise ValueError("use at least 1e4 Monte-Carlo samples")
    same = (np.array_equal(pose_a.rotation, pose_b.rotation)
            and np.array_equal(pose_a.translation, pose_b.translation)
            and np.array_equal(pose_a.size, pose_b.size))
    if same:
        return 1.0
    if np.prod(pose_a.size) <= 0 or np.prod(pose_b.size) <= 0:
        return 0.0
    corners = np.vstack([box_corners(pose_a), box_corners(pose_b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = lo + (hi - lo) * rng.random((samples, 3))
    ina, inb = _inside(pts, pose_a), _inside(pts, pose_b)
    union = np.count_nonzero(ina | inb)
    return 0.0 if union == 0 else np.count_nonzero(ina & inb) / union


@dataclass(frozen=True)
class EvalThresholds:
    rot_deg: float = 10.0
    trans_cm: float = 10.0
    iou_levels: tuple = (0.5, 0.75)

    def __post_init__(self):
        if self.rot_deg <= 0 or self.trans_cm <= 0 or any(l <= 0 for l in self.iou_levels):
            raise ValueError("thresholds must be positive")

    def column_names(self):
        r, c = _fmt(self.rot_deg), _fmt(self.trans_cm)
        return [f"IoU{int(round(l * 100))}" for l in self.iou_levels] + [f"{r}deg", f"{c}cm", f"{r}deg{c}cm"]


def _fmt(x):
    return str(int(x)) if float(x).is_integer() else str(x)


@dataclass
class EvalReport:
    """Per-category and mean accuracy at each threshold, in [0, 1]."""

    columns: list
    per_category: dict
    counts: dict
    mean: dict
    instance_weighted: dict
    config: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_dict(self, with_errors=False):
        d = asdict(self)
        if not with_errors:
            d.pop("errors")
        return d

    def to_json(self, with_errors=False):
        return json.dumps(_rounded(self.to_dict(with_errors)), indent=2, sort_keys=True)

    def to_table(self, names=None):
        names = names or {}
        header = ["category", "n"] + self.columns
        rows = [[names.get(c, str(c)), str(self.counts[c])] + [f"{100 * self.per_category[c][k]:.1f}" for k in self.columns]
                for c in self.per_category]
        rows.append(["mean", str(sum(self.counts.values()))] + [f"{100 * self.mean[k]:.1f}" for k in self.columns])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
                 for row in [header] + rows]
        return "\n".join(lines) + "\n"


def _rounded(obj, ndigits=12):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {str(k): _rounded(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, ndigits) for v in obj]
    if isinstance(obj, np.generic):
        return _rounded(obj.item(), ndigits)
    return obj


def evaluate(predictions, ground_truth, syms, thr: EvalThresholds = EvalThresholds(), handle_visible=None,
             iou_samples=10_000, seed=0):
    """Accuracy-at-threshold report.

    Args:
        predictions: list of ``(Pose, category)`` pairs.
        ground_truth: list of ``Pose`` aligned with ``predictions``.
        syms: mapping ``category -> SymmetrySpec``.
        thr: thresholds; rotation/translation pass strictly below, IoU at or above.
        handle_visible: optional per-instance flags for conditional symmetry.
    """
    if len(predictions) != len(ground_truth) or not predictions:
        raise ValueError("predictions and ground truth must be aligned and non-empty")
    handle_visible = handle_visible if handle_visible is not None else [None] * len(predictions)
    cols = thr.column_names()
    iou_cols, rcol, tcol, jcol = cols[:-3], cols[-3], cols[-2], cols[-1]
    hits, errors = {}, {}
    for i, ((pred, cat), gt) in enumerate(zip(predictions, ground_truth)):
        if cat not in syms:
            raise KeyError(f"unknown category {cat!r}")
        r_err = rotation_error_deg(pred.rotation, gt.rotation, syms[cat], handle_visible[i])
        t_err = translation_error_cm(pred.translation, gt.translation)
        iou = iou3d(pred, gt, iou_samples, seed + i)
        row = {col: iou >= lvl for col, lvl in zip(iou_cols, thr.iou_levels)}
        row[rcol] = r_err < thr.rot_deg
        row[tcol] = t_err < thr.trans_cm
        row[jcol] = row[rcol] and row[tcol]
        hits.setdefault(cat, []).append(row)
        errors.setdefault(cat, []).append({"rot_deg": r_err, "trans_cm": t_err, "iou": iou})
    per_cat = {c: {k: float(np.mean([r[k] for r in rows])) for k in cols} for c, rows in sorted(hits.items())}
    counts = {c: len(rows) for c, rows in sorted(hits.items())}
    mean = {k: float(np.mean([per_cat[c][k] for c in per_cat])) for k in cols}
    n = sum(counts.values())
    weighted = {k: float(sum(per_cat[c][k] * counts[c] for c in per_cat) / n) for k in cols}
    config = {"thresholds": asdict(thr), "iou_samples": iou_samples, "seed": seed}
    return EvalReport(cols, per_cat, counts, mean, weighted, config, {c: errors[c] for c in sorted(errors)})


def precision_curve(errors, threshold_grid):
    """Fraction of errors at or below each threshold."""
    grid = list(threshold_grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be ascending")
    errs = np.asarray(list(errors), dtype=float)
    if errs.size == 0:
        return [(float(t), 0.0) for t in grid]
    return [(float(t), float(np.mean(errs <= t))) for t in grid]


def symmetry_angle(R_pred, R_gt, axis):
    """Signed angle (radians) of ``R_gt^T R_pred`` about ``axis`` after removing tilt."""
    axis = np.asarray(axis, dtype=float)
    rel = np.asarray(R_gt).T @ np.asarray(R_pred)
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    ref = ref - ref.dot(axis) * axis
    ref /= np.linalg.norm(ref)
    moved = rel @ ref
    moved = moved - moved.dot(axis) * axis
    return float(np.arctan2(np.dot(np.cross(ref, moved), axis), np.dot(ref, moved)))


def circular_std_deg(angles_rad):
    angles = np.asarray(angles_rad, dtype=float)
    R = np.abs(np.mean(np.exp(1j * angles)))
    return float(np.degrees(np.sqrt(max(-2.0 * np.log(max(R, 1e-300)), 0.0))))


def mean_pairwise_geodesic_deg(rotations):
    Rs = list(rotations)
    d = [geodesic_deg(Rs[i], Rs[j]) for i in range(len(Rs)) for j in range(i + 1, len(Rs))]
    return float(np.mean(d)) if d else 0.0
