"""Conditional score network in plain numpy, with exact backprop.

The network maps a noisy 12-D pose, a diffusion time and four conditions
(two observation encodings, a category id and a global feature) to a score.
It predicts the negative scaled noise ``F`` and returns ``F / sigma(t)``, so
the weighted denoising loss ``sigma^2 * |s - (p0 - pt) / sigma^2|^2``
reduces to ``|F + z|^2``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import CheckpointError, NumericalError, TrainingDivergedError
from .pose_core import POSE_DIM
from .sampler import T_EPS, NoiseSchedule, perturb

HEADS = ("rot_a1", "rot_a2", "trans", "size")
CONDITIONS = ("obs_a", "obs_b", "category", "global")
MAGIC = b"POSESCORE-V1\n"


@dataclass(frozen=True)
class ScoreModelConfig:
    d_obs_a: int = 2048
    d_obs_b: int = 2048
    d_global: int = 2048
    num_categories: int = 6
    obs_embed_dim: int = 256
    category_embed_dim: int = 128
    pose_embed_dim: int = 256
    pose_layers: int = 2
    time_embed_dim: int = 128
    fourier_scale: float = 4.0
    trunk_dim: int = 1024
    trunk_layers: int = 2
    head_hidden: int = 512
    head_layers: int = 3
    global_to_rotation: bool = True
    condition_dropout: tuple = (0.1, 0.1, 0.1, 0.1)
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    sigma_data: float = 0.05
    compute_dtype: str = "float64"

    def __post_init__(self):
        rates = self.condition_dropout
        if np.isscalar(rates):
            rates = (float(rates),) * 4
        rates = tuple(float(r) for r in rates)
        if len(rates) != 4 or not all(0 <= r < 1 for r in rates):
            raise ValueError("condition_dropout needs four rates in [0, 1)")
        object.__setattr__(self, "condition_dropout", rates)
        for f in fields(self):
            if f.type == "int" and getattr(self, f.name) <= 0 and f.name != "num_categories":
                raise ValueError(f"{f.name} must be positive")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.compute_dtype not in ("float64", "float32"):
            raise ValueError("compute_dtype must be 'float64' or 'float32'")
        if self.num_categories < 1 or self.time_embed_dim % 2:
            raise ValueError("need at least one category and an even time_embed_dim")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "condition_dropout" in d and not np.isscalar(d["condition_dropout"]):
            d["condition_dropout"] = tuple(d["condition_dropout"])
        return cls(**d)


@dataclass
class ConditioningContext:
    """Batched conditions; row ``i`` belongs to pose ``i``.

    ``category`` holds integer ids in ``0..L`` with 0 meaning unknown.
    """

    category: np.ndarray
    obs_a: np.ndarray
    obs_b: np.ndarray
    global_feature: np.ndarray

    def __post_init__(self):
        self.category = np.atleast_1d(np.asarray(self.category, dtype=np.int64))
        self.obs_a = np.atleast_2d(np.asarray(self.obs_a, dtype=float))
        self.obs_b = np.atleast_2d(np.asarray(self.obs_b, dtype=float))
        self.global_feature = np.atleast_2d(np.asarray(self.global_feature, dtype=float))
        n = len(self.category)
        if not (len(self.obs_a) == len(self.obs_b) == len(self.global_feature) == n):
            raise ValueError("condition arrays must share the batch dimension")
        for name in ("obs_a", "obs_b", "global_feature"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    def __len__(self):
        return len(self.category)

    def take(self, idx):
        return ConditioningContext(self.category[idx], self.obs_a[idx], self.obs_b[idx], self.global_feature[idx])

    def repeat(self, k):
        """Each row repeated ``k`` times consecutively."""
        return self.take(np.repeat(np.arange(len(self)), k))


def _relu(x):
    return np.maximum(x, 0.0)


def _check(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite activation", layer=layer)
    return x


class ScoreNet:
    """Score model ``s(p, conditions, t)``.

    Parameters live in ``params`` (trainable) and ``buffers`` (the fixed
    Fourier frequencies of the time embedding).
    """

    def __init__(self, config: ScoreModelConfig, seed=0):
        self.config = config
        self.schedule = NoiseSchedule(config.sigma_min, config.sigma_max)
        rng = np.random.default_rng(seed)
        self.buffers = {"time.freq": rng.normal(0.0, config.fourier_scale, config.time_embed_dim // 2)}
        self.params = self._init_params(rng)

    # -- parameters -----------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        p = {}

        def dense(name, fan_in, fan_out, bias=True, gain=2.0):
            p[f"{name}.W"] = rng.normal(0.0, np.sqrt(gain / fan_in), (fan_in, fan_out))
            if bias:
                p[f"{name}.b"] = np.zeros(fan_out)

        dims = [POSE_DIM] + [c.pose_embed_dim] * c.pose_layers
        for i in range(c.pose_layers):
            dense(f"pose.{i}", dims[i], dims[i + 1])
        dense("time", c.time_embed_dim, c.time_embed_dim)
        dense("obs_a", c.d_obs_a, c.obs_embed_dim, bias=False)
        dense("obs_b", c.d_obs_b, c.obs_embed_dim, bias=False)
        p["category.E"] = rng.normal(0.0, 1.0, (c.num_categories + 1, c.category_embed_dim))
        width = self.trunk_input_dim
        for i in range(c.trunk_layers):
            dense(f"trunk.{i}", width, c.trunk_dim)
            width = c.trunk_dim
        for head in HEADS:
            hdims = [c.trunk_dim + c.d_global] + [c.head_hidden] * (c.head_layers - 1) + [3]
            for i in range(c.head_layers):
                last = i == c.head_layers - 1
                dense(f"head.{head}.{i}", hdims[i], hdims[i + 1], gain=0.01 if last else 2.0)
        return p

    @property
    def trunk_input_dim(self):
        c = self.config
        return c.pose_embed_dim + 2 * c.obs_embed_dim + c.category_embed_dim + c.time_embed_dim

    @property
    def condition_dim(self):
        c = self.config
        return 2 * c.obs_embed_dim + c.category_embed_dim + c.d_global

    def _compute_params(self, cache=None):
        """Parameters in the compute dtype (float32 copies are made per call)."""
        if self.config.compute_dtype == "float64":
            return self.params
        if cache is not None and "params" in cache:
            return cache["params"]
        P = {k: v.astype(np.float32) for k, v in self.params.items()}
        if cache is not None:
            cache["params"] = P
        return P

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    # -- forward pieces ---------------------------------------------------------

    def time_embed(self, t, cache=None, P=None):
        P = self.params if P is None else P
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ang = 2.0 * np.pi * t[:, None] * self.buffers["time.freq"][None, :]
        ff = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(P["time.W"].dtype, copy=False)
        pre = ff @ P["time.W"] + P["time.b"]
        if cache is not None:
            cache["time.in"] = ff
            cache["time.pre"] = pre
        return _check(_relu(pre), "time")

    def embed_conditions(self, ctx: ConditioningContext, drop_mask=None, cache=None):
        """Encode the four conditions; dropped ones are nulled at the input.

        ``drop_mask`` is ``(4,)`` or ``(B, 4)`` booleans ordered
        ``obs_a, obs_b, category, global``. Observation encoders have no bias,
        so a dropped observation encodes to zeros; a dropped category maps to
        embedding row 0. Returns the concatenation
        ``[enc(obs_a) | enc(obs_b) | category embedding | global]``.
        """
        parts = self._condition_parts(ctx, drop_mask, cache, self.params)
        return np.concatenate([parts["obs_a"], parts["obs_b"], parts["category"], parts["global"]], axis=1)

    def _condition_parts(self, ctx, drop_mask, cache, P):
        c = self.config
        dt = P["obs_a.W"].dtype
        B = len(ctx)
        if np.any(ctx.category < 0) or np.any(ctx.category > c.num_categories):
            raise ValueError(f"category id out of range 0..{c.num_categories}")
        if ctx.obs_a.shape[1] != c.d_obs_a or ctx.obs_b.shape[1] != c.d_obs_b or ctx.global_feature.shape[1] != c.d_global:
            raise ValueError("condition dimensions do not match the model configuration")
        drop = np.zeros((B, 4), dtype=bool) if drop_mask is None else np.broadcast_to(np.asarray(drop_mask, bool), (B, 4))
        obs_a = np.where(drop[:, 0:1], 0.0, ctx.obs_a).astype(dt, copy=False)
        obs_b = np.where(drop[:, 1:2], 0.0, ctx.obs_b).astype(dt, copy=False)
        cat = np.where(drop[:, 2], 0, ctx.category)
        g = np.where(drop[:, 3:4], 0.0, ctx.global_feature).astype(dt, copy=False)
        pre_a = obs_a @ P["obs_a.W"]
        pre_b = obs_b @ P["obs_b.W"]
        if cache is not None:
            cache.update({"obs_a.in": obs_a, "obs_a.pre": pre_a, "obs_b.in": obs_b, "obs_b.pre": pre_b, "category.idx": cat})
        return {
            "obs_a": _check(_relu(pre_a), "obs_a"),
            "obs_b": _check(_relu(pre_b), "obs_b"),
            "category": P["category.E"][cat],
            "global": g,
        }

    def output_scaling(self, sigma):
        """``(c_skip, c_out)`` with ``F = c_skip * v + c_out * net(v)``.

        The skip term is the exact noise prediction for a zero-mean Gaussian
        target of std ``sigma_data``, so at large sigma the network only has
        to supply a small correction.
        """
        sd2 = self.config.sigma_data ** 2
        var = sigma**2 + sd2
        return -sigma / var, np.sqrt(sd2 / var)

    def forward(self, v, ctx, t, drop_mask=None, cache=None):
        """Network output ``F`` (before division by sigma)."""
        c = self.config
        P = self._compute_params(cache)
        v = np.atleast_2d(np.asarray(v, dtype=float))
        B = len(v)
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        sigma = self.schedule.sigma(t)
        h = (v / np.sqrt(1.0 + sigma**2)[:, None]).astype(P["pose.0.W"].dtype, copy=False)
        for i in range(c.pose_layers):
            pre = h @ P[f"pose.{i}.W"] + P[f"pose.{i}.b"]
            if cache is not None:
                cache[f"pose.{i}.in"], cache[f"pose.{i}.pre"] = h, pre
            h = _check(_relu(pre), f"pose.{i}")
        temb = self.time_embed(t, cache, P)
        parts = self._condition_parts(ctx, drop_mask, cache, P)
        h = np.concatenate([h, parts["obs_a"], parts["obs_b"], parts["category"], temb], axis=1)
        for i in range(c.trunk_layers):
            pre = h @ P[f"trunk.{i}.W"] + P[f"trunk.{i}.b"]
            if cache is not None:
                cache[f"trunk.{i}.in"], cache[f"trunk.{i}.pre"] = h, pre
            h = _check(_relu(pre), f"trunk.{i}")
        g = parts["global"]
        outs = []
        for head in HEADS:
            g_head = g if (c.global_to_rotation or head in ("trans", "size")) else np.zeros_like(g)
            x = np.concatenate([h, g_head], axis=1)
            for i in range(c.head_layers):
                name = f"head.{head}.{i}"
                pre = x @ P[f"{name}.W"] + P[f"{name}.b"]
                if cache is not None:
                    cache[f"{name}.in"], cache[f"{name}.pre"] = x, pre
                x = pre if i == c.head_layers - 1 else _relu(pre)
                _check(x, name)
            outs.append(x)
        c_skip, c_out = self.output_scaling(sigma)
        if cache is not None:
            cache["c_out"] = c_out
        return c_skip[:, None] * v + c_out[:, None] * np.concatenate(outs, axis=1).astype(float, copy=False)

    def score(self, v, ctx, t, drop_mask=None):
        """Score estimate, laid out like the 12-D pose vector."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        sigma = self.schedule.sigma(np.broadcast_to(np.asarray(t, dtype=float), (len(v),)))
        return self.forward(v, ctx, t, drop_mask) / sigma[:, None]

    def backward(self, cache, dF):
        """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dF``."""
        c = self.config
        P = self._compute_params(cache)
        grads = {}
        dF = (dF * cache["c_out"][:, None]).astype(P["pose.0.W"].dtype, copy=False)
        dtrunk = 0.0
        for head in HEADS:
            dx = dF[:, HEADS.index(head) * 3:(HEADS.index(head) + 1) * 3]
            for i in reversed(range(c.head_layers)):
                name = f"head.{head}.{i}"
                if i < c.head_layers - 1:
                    dx = dx * (cache[f"{name}.pre"] > 0)
                grads[f"{name}.W"] = cache[f"{name}.in"].T @ dx
                grads[f"{name}.b"] = dx.sum(axis=0)
                dx = dx @ P[f"{name}.W"].T
            dtrunk = dtrunk + dx[:, : c.trunk_dim]
        dh = dtrunk
        for i in reversed(range(c.trunk_layers)):
            name = f"trunk.{i}"
            dh = dh * (cache[f"{name}.pre"] > 0)
            grads[f"{name}.W"] = cache[f"{name}.in"].T @ dh
            grads[f"{name}.b"] = dh.sum(axis=0)
            dh = dh @ P[f"{name}.W"].T
        o = np.cumsum([0, c.pose_embed_dim, c.obs_embed_dim, c.obs_embed_dim, c.category_embed_dim, c.time_embed_dim])
        dpose, da, db, dcat, dtime = (dh[:, o[k]:o[k + 1]] for k in range(5))

        da = da * (cache["obs_a.pre"] > 0)
        grads["obs_a.W"] = cache["obs_a.in"].T @ da
        db = db * (cache["obs_b.pre"] > 0)
        grads["obs_b.W"] = cache["obs_b.in"].T @ db
        gE = np.zeros_like(P["category.E"])
        np.add.at(gE, cache["category.idx"], dcat)
        grads["category.E"] = gE
        dtime = dtime * (cache["time.pre"] > 0)
        grads["time.W"] = cache["time.in"].T @ dtime
        grads["time.b"] = dtime.sum(axis=0)
        for i in reversed(range(c.pose_layers)):
            name = f"pose.{i}"
            dpose = dpose * (cache[f"{name}.pre"] > 0)
            grads[f"{name}.W"] = cache[f"{name}.in"].T @ dpose
            grads[f"{name}.b"] = dpose.sum(axis=0)
            if i:
                dpose = dpose @ P[f"{name}.W"].T
        return {k: g.astype(float, copy=False) for k, g in grads.items()}

    def copy(self):
        other = ScoreNet.__new__(ScoreNet)
        other.config = self.config
        other.schedule = self.schedule
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def score_forward(net: ScoreNet, v, ctx, t, drop_mask=None):
    return net.score(v, ctx, t, drop_mask)


# --- denoising score matching --------------------------------------------------


def dsm_target(v0, vt, sigma):
    """Score of the perturbation kernel, ``(p0 - pt) / sigma^2``."""
    return (v0 - vt) / (sigma**2)[:, None]


def dsm_objective(scores, v0, vt, sigma):
    """Per-item loss ``sigma^2 * |s - (p0 - pt) / sigma^2|^2``."""
    r = scores - dsm_target(v0, vt, sigma)
    return sigma**2 * np.sum(r * r, axis=1)


def dsm_loss(net: ScoreNet, v0, ctx, t, z, drop_mask=None, *, with_grad=True):
    """Batch-mean denoising score-matching loss and its exact gradients.

    ``t`` and ``z`` are the sampled times and standard-normal noise; pass
    them explicitly so the loss is a deterministic function of the parameters.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    if len(v0) == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(v0),))
    sigma = net.schedule.sigma(t)
    vt = perturb(v0, t, z, net.schedule)
    cache = {} if with_grad else None
    F = net.forward(vt, ctx, t, drop_mask, cache)
    scores = F / sigma[:, None]
    per_item = dsm_objective(scores, v0, vt, sigma)
    loss = float(per_item.mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss", layer="loss")
    if not with_grad:
        return loss, None
    resid = scores - dsm_target(v0, vt, sigma)
    dF = 2.0 * sigma[:, None] * resid / len(v0)
    return loss, net.backward(cache, dF)


def sample_dsm_batch(rng, n_items, batch_size, dropout_rates, t_eps=T_EPS, dim=POSE_DIM):
    """Random indices, times, noise and condition-drop mask for one step."""
    idx = rng.integers(0, n_items, batch_size)
    t = rng.uniform(t_eps, 1.0, batch_size)
    z = rng.standard_normal((batch_size, dim))
    drop = rng.random((batch_size, 4)) < np.asarray(dropout_rates)[None, :]
    return idx, t, z, drop


# --- training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-3
    t_epsilon: float = T_EPS
    ema_decay: float = 0.0
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    lr_decay: str = "none"

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        if not 0 < self.t_epsilon < 1:
            raise ValueError("t_epsilon must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate < 0:
            raise ValueError("invalid training configuration")


class Adam:
    """Adam over all tensors at once; moments live in flat float64 buffers."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.keys = sorted(params)
        self.shapes = [params[k].shape for k in self.keys]
        sizes = [params[k].size for k in self.keys]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.m = np.zeros(self.offsets[-1])
        self.v = np.zeros(self.offsets[-1])
        self._tmp = np.empty(self.offsets[-1])
        self.t = 0

    def flatten(self, tensors):
        return np.concatenate([np.ravel(tensors[k]) for k in self.keys])

    def views(self, flat):
        """Tensors sharing memory with ``flat``, keyed like the parameters."""
        return {k: flat[lo:hi].reshape(shape)
                for k, shape, lo, hi in zip(self.keys, self.shapes, self.offsets[:-1], self.offsets[1:])}

    def update(self, g):
        """Flat parameter step for flat gradient ``g`` (to be subtracted)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        m, v, tmp = self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        if self.t % 100 == 0:
            # zero-gradient entries decay geometrically into subnormals, which are ~10x slower
            m[np.abs(m) < 1e-290] = 0.0
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr * corr
        return tmp

    def step(self, params, grads):
        step = self.views(self.update(self.flatten(grads)))
        for k in self.keys:
            params[k] -= step[k]


@dataclass
class TrainResult:
    loss_curve: np.ndarray
    steps: int
    config: dict = field(default_factory=dict)

    def smoothed(self, window=200):
        curve = np.asarray(self.loss_curve)
        if len(curve) < window:
            window = max(1, len(curve))
        kernel = np.ones(window) / window
        return np.convolve(curve, kernel, mode="valid")


def train(net: ScoreNet, v0, ctx: ConditioningContext, cfg: TrainConfig, callback=None):
    """Fit ``net`` in place with Adam on the denoising objective.

    Condition dropout (per condition, i.i.d.) uses the rates in the model
    config. Raises :class:`TrainingDivergedError` if the loss stays above
    ``divergence_factor`` times its initial value for ``divergence_patience``
    consecutive steps.
    """
    v0 = np.asarray(v0, dtype=float)
    if len(v0) != len(ctx):
        raise ValueError("targets and conditions differ in length")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.learning_rate)
    # parameters become views of one flat vector so the optimizer and EMA update it in one pass
    theta = opt.flatten(net.params)
    net.params = opt.views(theta)
    ema = theta.copy() if cfg.ema_decay > 0 else None
    curve = np.empty(cfg.steps)
    initial = None
    over = 0
    for step in range(cfg.steps):
        idx, t, z, drop = sample_dsm_batch(rng, len(v0), cfg.batch_size, net.config.condition_dropout, cfg.t_epsilon)
        loss, grads = dsm_loss(net, v0[idx], ctx.take(idx), t, z, drop)
        curve[step] = loss
        if initial is None:
            initial = loss
        over = over + 1 if loss > cfg.divergence_factor * initial else 0
        if over >= cfg.divergence_patience:
            raise TrainingDivergedError(
                f"loss above {cfg.divergence_factor}x initial ({initial:.4g}) for {over} steps",
                step, curve[: step + 1].copy())
        if cfg.lr_decay == "cosine":
            opt.lr = 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * step / max(1, cfg.steps)))
        theta -= opt.update(opt.flatten(grads))
        if ema is not None:
            ema += (1 - cfg.ema_decay) * (theta - ema)
        if callback is not None:
            callback(step, loss)
    net.params = {k: p.copy() for k, p in opt.views(theta if ema is None else ema).items()}
    return TrainResult(loss_curve=curve, steps=cfg.steps, config=asdict(cfg))


# --- closed-form oracles -----------------------------------------------------------


@dataclass(frozen=True)
class AnalyticScoreOracle:
    """Isotropic Gaussian mixture target with a closed-form perturbed score."""

    means: np.ndarray
    std: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        w = np.full(len(means), 1.0 / len(means)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.std <= 0:
            raise ValueError("std must be positive")
        if w.shape != (len(means),) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("weights must be a probability vector over the components")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", w)

    @property
    def kind(self):
        return "isotropic-gaussian" if len(self.means) == 1 else "gaussian-mixture"

    def _log_terms(self, v, t, schedule):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        var = self.std**2 + np.asarray(schedule.sigma(t), dtype=float) ** 2
        var = np.broadcast_to(var, (len(v),))
        diff = self.means[None, :, :] - v[:, None, :]
        d = v.shape[1]
        logp = (np.log(self.weights)[None, :] - 0.5 * np.sum(diff**2, axis=2) / var[:, None]
                - 0.5 * d * np.log(2 * np.pi * var)[:, None])
        return logp, diff, var

    def log_density(self, v, t, schedule):
        logp, _, _ = self._log_terms(v, t, schedule)
        m = logp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True)))[:, 0]

    def score(self, v, t, schedule):
        logp, diff, var = self._log_terms(v, t, schedule)
        logp -= logp.max(axis=1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=1, keepdims=True)
        return np.einsum("bm,bmd->bd", resp, diff) / var[:, None]


def analytic_score(oracle: AnalyticScoreOracle, v, t, schedule: NoiseSchedule):
    """Exact ``grad log p_t(v)`` of the oracle density convolved with ``N(0, sigma(t)^2 I)``."""
    single = np.ndim(v) == 1
    out = oracle.score(v, t, schedule)
    return out[0] if single else out


# --- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, net: ScoreNet, extra=None):
    """Write ``POSESCORE-V1`` magic, a JSON header line and raw float64 tensors."""
    tensors = []
    offset = 0
    blobs = []
    for group, store in (("params", net.params), ("buffers", net.buffers)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name], dtype="<f8")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    config = asdict(net.config)
    config["condition_dropout"] = list(config["condition_dropout"])
    header = {"config": config, "tensors": tensors, "extra": extra or {}, "nbytes": offset}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(struct.pack("<Q", offset))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns ``(net, extra)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a POSESCORE-V1 checkpoint")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    (nbytes,) = struct.unpack("<Q", rest[nl + 1:nl + 9])
    payload = rest[nl + 9:]
    if nbytes != header["nbytes"] or len(payload) != nbytes:
        raise CheckpointError(f"{path}: truncated tensor payload")
    net = ScoreNet.__new__(ScoreNet)
    net.config = ScoreModelConfig.from_dict(header["config"])
    net.schedule = NoiseSchedule(net.config.sigma_min, net.config.sigma_max)
    net.params, net.buffers = {}, {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"]).reshape(t["shape"]).astype(float)
        getattr(net, t["group"])[t["name"]] = arr
    return net, header["extra"]
