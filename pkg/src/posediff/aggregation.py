"""Reduce a set of pose hypotheses to one pose.

``aggregate_mode`` runs grid-accelerated mean shift separately on the
rotation, translation and size blocks and keeps the most populated mode of
each; ``aggregate_mean`` is the mean-pooling baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DegenerateRotationError
from .pose_core import ROT, SITE_SLICE, SIZE, Pose, decode_batch, pose_decode, rot6d_to_matrix, matrix_to_rot6d

COMPONENTS = (("rotation", ROT), ("translation", SITE_SLICE), ("size", SIZE))


def _grid_shift(X, bandwidth):
    """One MeanShift++ update: each point moves to the mean of the points in
    its own and all adjacent grid cells (cell side = bandwidth)."""
    origin = X.min(axis=0)
    cells = np.floor((X - origin) / bandwidth).astype(np.int64)
    uniq, inv = np.unique(cells, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), X.shape[1]))
    np.add.at(sums, inv, X)
    counts = np.bincount(inv, minlength=len(uniq)).astype(float)
    adj = (np.abs(uniq[:, None, :] - uniq[None, :, :]).max(axis=2) <= 1).astype(float)
    means = (adj @ sums) / (adj @ counts)[:, None]
    return means[inv]


def meanshift_pp(points, bandwidth, max_iters=50, tol=1e-5):
    """Grid-accelerated mean shift.

    Args:
        points: ``(N, d)`` array.
        bandwidth: grid cell side; converged points closer than this merge.
        max_iters: cap on shift iterations.
        tol: stop once no point moves farther than this.

    Returns:
        ``(modes, labels, n_iter)`` with ``modes`` of shape ``(M, d)`` and one
        label per input point.
    """
    X = np.array(points, dtype=float, copy=True)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("points must be a non-empty (N, d) array")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = _grid_shift(X, bandwidth)
        moved = np.sqrt(((new - X) ** 2).sum(axis=1)).max()
        X = new
        if moved < tol:
            break

    labels = np.empty(len(X), dtype=np.int64)
    anchors = []
    for i, x in enumerate(X):
        for m, a in enumerate(anchors):
            if np.sqrt(((x - a) ** 2).sum()) < bandwidth:
                labels[i] = m
                break
        else:
            labels[i] = len(anchors)
            anchors.append(x)
    modes = np.array([X[labels == m].mean(axis=0) for m in range(len(anchors))])
    return modes, labels, n_iter


class MeanShiftPP(ClusterMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`meanshift_pp`."""

    def __init__(self, bandwidth=1.0, max_iter=50, tol=1e-5):
        self.bandwidth = bandwidth
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X)
        self.cluster_centers_, self.labels_, self.n_iter_ = meanshift_pp(X, self.bandwidth, self.max_iter, self.tol)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        d = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)


@dataclass(frozen=True)
class MeanShiftConfig:
    bandwidth_rot: float = 0.2
    bandwidth_trans: float = 0.1
    bandwidth_size: float = 0.05
    max_iters: int = 50
    tol: float = 1e-5

    def __post_init__(self):
        if min(self.bandwidth_rot, self.bandwidth_trans, self.bandwidth_size) <= 0 or self.tol <= 0:
            raise ValueError("bandwidths and tol must be positive")

    def bandwidth(self, component):
        return {"rotation": self.bandwidth_rot, "translation": self.bandwidth_trans, "size": self.bandwidth_size}[component]


def select_mode(points, modes, labels):
    """Index of the most populated mode.

    Ties go to the smaller within-cluster variance of the original points,
    then to the cluster containing the lowest point index.
    """
    best = None
    for m in range(len(modes)):
        members = np.flatnonzero(labels == m)
        pts = points[members]
        var = float(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).mean())
        key = (-len(members), var, int(members[0]))
        if best is None or key < best[0]:
            best = (key, m)
    return best[1]


@dataclass
class ModeEstimate:
    vector: np.ndarray
    pose: Pose | None = None
    cluster_sizes: dict = field(default_factory=dict)
    modes_found: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)
    rotation_fallback: bool = False


def mode_vector(raw, cfg: MeanShiftConfig = MeanShiftConfig()):
    """Per-component mode of ``(K, 12)`` hypotheses as a 12-vector.

    The rotation block of the result is the 6-D form of the projected
    rotation, so it always decodes to a valid matrix.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if len(raw) == 0:
        raise ValueError("need at least one hypothesis")
    out = np.empty(raw.shape[1])
    est = ModeEstimate(vector=out)
    for name, sl in COMPONENTS:
        pts = raw[:, sl]
        modes, labels, _ = meanshift_pp(pts, cfg.bandwidth(name), cfg.max_iters, cfg.tol)
        m = select_mode(pts, modes, labels)
        out[sl] = modes[m]
        est.modes_found[name] = modes
        est.cluster_sizes[name] = np.bincount(labels, minlength=len(modes))
        est.members[name] = np.flatnonzero(labels == m)
    try:
        out[ROT] = matrix_to_rot6d(rot6d_to_matrix(out[ROT]))
    except DegenerateRotationError:
        members = est.members["rotation"]
        nearest = members[np.argmin(((raw[members, ROT] - out[ROT]) ** 2).sum(axis=1))]
        out[ROT] = matrix_to_rot6d(rot6d_to_matrix(raw[nearest, ROT]))
        est.rotation_fallback = True
    return est


def aggregate_mode(h, cfg: MeanShiftConfig = MeanShiftConfig()) -> ModeEstimate:
    """Mode-seeking estimate for a :class:`~posediff.sampler.HypothesisSet`."""
    est = mode_vector(h.raw, cfg)
    if h.crop is not None and h.intrinsics is not None:
        est.pose = pose_decode(est.vector, h.crop, h.intrinsics)
    return est


def mean_vector(raw):
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if len(raw) == 0:
        raise ValueError("need at least one hypothesis")
    out = raw.mean(axis=0)
    out[ROT] = matrix_to_rot6d(rot6d_to_matrix(out[ROT]))
    return out


def aggregate_mean(h) -> Pose:
    """Mean pooling; raises if the averaged rotation block is degenerate."""
    vec = mean_vector(h.raw)
    return decode_batch(vec[None], h.crop, h.intrinsics)[0][0]
