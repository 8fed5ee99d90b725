"""Scikit-learn style front end for the diffusion pose model.

``X`` is a 2-D float array with one row per observation, laid out as
``[category_id | obs_a | obs_b | global_feature]`` (see
:func:`pack_conditions`); ``y`` holds the matching 12-D pose vectors.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .aggregation import MeanShiftConfig, mean_vector, mode_vector
from .pose_core import POSE_DIM
from .sampler import NoiseSchedule, hypothesis_noise, integrate_probability_flow
from .score_net import (ConditioningContext, ScoreModelConfig, ScoreNet, TrainConfig, load_checkpoint,
                        save_checkpoint, train)


def pack_conditions(category, obs_a, obs_b, global_feature):
    category = np.asarray(category, dtype=float).reshape(-1, 1)
    return np.hstack([category, np.atleast_2d(obs_a), np.atleast_2d(obs_b), np.atleast_2d(global_feature)])


def split_conditions(X, d_obs_a, d_obs_b, d_global) -> ConditioningContext:
    X = np.atleast_2d(X)
    expected = 1 + d_obs_a + d_obs_b + d_global
    if X.shape[1] != expected:
        raise ValueError(f"X has {X.shape[1]} columns, expected {expected}")
    cat = X[:, 0]
    if not np.all(cat == np.round(cat)):
        raise ValueError("first column of X must hold integer category ids")
    a = 1 + d_obs_a
    b = a + d_obs_b
    return ConditioningContext(cat.astype(np.int64), X[:, 1:a], X[:, a:b], X[:, b:])


def check_pose_targets(y, n=None):
    y = check_array(y, ensure_2d=True)
    if y.shape[1] != POSE_DIM:
        raise ValueError(f"pose targets need {POSE_DIM} columns, got {y.shape[1]}")
    if n is not None and len(y) != n:
        raise ValueError("X and y have different numbers of rows")
    return y


class DiffusionPoseEstimator(BaseEstimator):
    """Conditional score model + probability-flow sampler + mode aggregation.

    ``fit`` trains the score network by denoising score matching,
    ``sample_hypotheses`` draws ``n_hypotheses`` poses per observation and
    ``predict`` reduces them to one 12-D pose vector per row.
    """

    def __init__(self, n_categories=6, d_obs_a=2048, d_obs_b=2048, d_global=2048, obs_embed_dim=256,
                 category_embed_dim=128, pose_embed_dim=256, time_embed_dim=128, trunk_dim=1024, trunk_layers=2,
                 head_hidden=512, head_layers=3, global_to_rotation=True, condition_dropout=0.1,
                 sigma_min=0.01, sigma_max=50.0, sigma_data=0.05, fourier_scale=4.0, compute_dtype="float64",
                 n_steps=20000, batch_size=64, learning_rate=1e-3,
                 lr_decay="none", ema_decay=0.0, n_hypotheses=50, n_ode_steps=500, t_end=1e-5, aggregation="mode",
                 bandwidth_rot=0.2, bandwidth_trans=0.1, bandwidth_size=0.05, chunk_rows=8192,
                 random_state=0):
        self.n_categories = n_categories
        self.d_obs_a = d_obs_a
        self.d_obs_b = d_obs_b
        self.d_global = d_global
        self.obs_embed_dim = obs_embed_dim
        self.category_embed_dim = category_embed_dim
        self.pose_embed_dim = pose_embed_dim
        self.time_embed_dim = time_embed_dim
        self.trunk_dim = trunk_dim
        self.trunk_layers = trunk_layers
        self.head_hidden = head_hidden
        self.head_layers = head_layers
        self.global_to_rotation = global_to_rotation
        self.condition_dropout = condition_dropout
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.sigma_data = sigma_data
        self.fourier_scale = fourier_scale
        self.compute_dtype = compute_dtype
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.ema_decay = ema_decay
        self.n_hypotheses = n_hypotheses
        self.n_ode_steps = n_ode_steps
        self.t_end = t_end
        self.aggregation = aggregation
        self.bandwidth_rot = bandwidth_rot
        self.bandwidth_trans = bandwidth_trans
        self.bandwidth_size = bandwidth_size
        self.chunk_rows = chunk_rows
        self.random_state = random_state

    # -- configuration helpers --------------------------------------------------

    def model_config(self):
        return ScoreModelConfig(
            d_obs_a=self.d_obs_a, d_obs_b=self.d_obs_b, d_global=self.d_global, num_categories=self.n_categories,
            obs_embed_dim=self.obs_embed_dim, category_embed_dim=self.category_embed_dim,
            pose_embed_dim=self.pose_embed_dim, time_embed_dim=self.time_embed_dim, trunk_dim=self.trunk_dim,
            trunk_layers=self.trunk_layers, head_hidden=self.head_hidden, head_layers=self.head_layers,
            global_to_rotation=self.global_to_rotation, condition_dropout=self.condition_dropout,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max,
            sigma_data=self.sigma_data, fourier_scale=self.fourier_scale, compute_dtype=self.compute_dtype)

    def train_config(self):
        return TrainConfig(steps=self.n_steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           lr_decay=self.lr_decay, ema_decay=self.ema_decay, seed=self.random_state)

    def meanshift_config(self):
        return MeanShiftConfig(self.bandwidth_rot, self.bandwidth_trans, self.bandwidth_size)

    @property
    def schedule(self):
        return NoiseSchedule(self.sigma_min, self.sigma_max)

    def _context(self, X):
        X = check_array(X)
        return split_conditions(X, self.d_obs_a, self.d_obs_b, self.d_global)

    # -- fitting ------------------------------------------------------------------

    def fit(self, X, y, callback=None):
        ctx = self._context(X)
        y = check_pose_targets(y, len(ctx))
        if np.any(ctx.category < 0) or np.any(ctx.category > self.n_categories):
            raise ValueError(f"category ids must lie in 0..{self.n_categories}")
        self.net_ = ScoreNet(self.model_config(), seed=self.random_state)
        self.train_result_ = train(self.net_, y, ctx, self.train_config(), callback)
        self.loss_curve_ = self.train_result_.loss_curve
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else len(X[0])
        return self

    # -- sampling -------------------------------------------------------------------

    def score_function(self, x, drop_mask=None):
        """``score_fn(v, t)`` for a single observation row ``x``."""
        check_is_fitted(self, "net_")
        ctx = self._context(np.atleast_2d(x))
        cache = {}

        def score_fn(v, t):
            n = len(v)
            if cache.get("n") != n:
                cache["n"], cache["ctx"] = n, ctx.repeat(n)
            return self.net_.score(v, cache["ctx"], t, drop_mask)

        return score_fn

    def sample_hypotheses(self, X, n_hypotheses=None, *, drop_mask=None, seed=None, streams=None, init=None,
                          t_start=1.0, n_ode_steps=None):
        """Draw hypotheses for every row of ``X``; returns ``(N, K, 12)``.

        Row ``i`` uses noise streams ``(seed, streams[i], k)``, so results do
        not depend on batching. ``init`` (``(N, K, 12)``) replaces the prior draw.
        """
        check_is_fitted(self, "net_")
        ctx = self._context(X)
        N = len(ctx)
        K = int(n_hypotheses or self.n_hypotheses)
        steps = int(n_ode_steps or self.n_ode_steps)
        seed = self.random_state if seed is None else seed
        streams = np.arange(N) if streams is None else np.asarray(streams)
        sched = self.schedule
        out = np.empty((N, K, POSE_DIM))
        per_chunk = max(1, self.chunk_rows // K)
        self.n_score_evals_ = 0
        for start in range(0, N, per_chunk):
            rows = np.arange(start, min(N, start + per_chunk))
            if init is None:
                v0 = np.concatenate([hypothesis_noise(seed, K, streams[i]) for i in rows]) * sched.sigma(t_start)
            else:
                v0 = np.asarray(init, dtype=float)[rows].reshape(-1, POSE_DIM)
            sub = ctx.take(rows).repeat(K)
            drop = None if drop_mask is None else np.broadcast_to(np.asarray(drop_mask, bool), (len(sub), 4))

            def score_fn(v, t, sub=sub, drop=drop):
                return self.net_.score(v, sub, t, drop)

            final, evals = integrate_probability_flow(score_fn, v0, sched, t_start, self.t_end, steps,
                                                      hypotheses_per_row=K)
            out[rows] = final.reshape(len(rows), K, POSE_DIM)
            self.n_score_evals_ = evals
        return out

    def aggregate(self, H, method=None):
        """Reduce ``(N, K, 12)`` hypotheses to ``(N, 12)``."""
        method = method or self.aggregation
        cfg = self.meanshift_config()
        if method == "mode":
            return np.array([mode_vector(h, cfg).vector for h in H])
        if method == "mean":
            return np.array([mean_vector(h) for h in H])
        raise ValueError(f"unknown aggregation {method!r}")

    def predict(self, X, **sample_kw):
        return self.aggregate(self.sample_hypotheses(X, **sample_kw))

    # -- persistence ------------------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "net_")
        extra = {"estimator_params": self.get_params(), "loss_curve_tail": [float(x) for x in self.loss_curve_[-200:]]}
        save_checkpoint(path, self.net_, extra)

    @classmethod
    def load(cls, path, **overrides):
        net, extra = load_checkpoint(path)
        params = dict(extra.get("estimator_params", {}))
        params.update(overrides)
        est = cls(**params)
        est.net_ = net
        est.loss_curve_ = np.asarray(extra.get("loss_curve_tail", []))
        est.n_features_in_ = 1 + est.d_obs_a + est.d_obs_b + est.d_global
        return est
