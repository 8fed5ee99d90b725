"""Small shared fixtures for the test-suite."""
import numpy as np

from posediff.score_net import ConditioningContext, ScoreModelConfig, ScoreNet, dsm_loss

TINY = dict(d_obs_a=5, d_obs_b=4, d_global=3, num_categories=3, obs_embed_dim=6, category_embed_dim=4,
            pose_embed_dim=8, pose_layers=2, time_embed_dim=6, trunk_dim=10, trunk_layers=2, head_hidden=7,
            head_layers=3)


def tiny_net(seed=0, **kw):
    net = ScoreNet(ScoreModelConfig(**{**TINY, **kw}), seed=seed)
    # nonzero biases keep every ReLU away from its kink, so finite differences are smooth
    rng = np.random.default_rng(seed + 100)
    for k, v in net.params.items():
        if k.endswith(".b"):
            net.params[k] = v + rng.normal(0.0, 0.3, v.shape)
    return net


def tiny_batch(net, n=6, seed=1):
    c = net.config
    rng = np.random.default_rng(seed)
    ctx = ConditioningContext(rng.integers(1, c.num_categories + 1, n), rng.normal(size=(n, c.d_obs_a)),
                              rng.normal(size=(n, c.d_obs_b)), rng.normal(size=(n, c.d_global)))
    v0 = rng.normal(size=(n, 12))
    t = rng.uniform(0.05, 0.95, n)
    z = rng.normal(size=(n, 12))
    drop = rng.random((n, 4)) < 0.3
    return v0, ctx, t, z, drop


def gradient_check(net, v0, ctx, t, z, drop, h=1e-4, per_tensor=12, seed=0):
    """Largest relative error between analytic and central-difference gradients, per tensor.

    The loss is O(100) at small sigma, so steps much below 1e-4 lose more to
    cancellation than they gain in truncation error.
    """
    _, grads = dsm_loss(net, v0, ctx, t, z, drop)
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in net.params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, min(per_tensor, flat.size), replace=False)
        g_an = grads[name].reshape(-1)[idx]
        g_fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp, _ = dsm_loss(net, v0, ctx, t, z, drop, with_grad=False)
            flat[i] = old - h
            lm, _ = dsm_loss(net, v0, ctx, t, z, drop, with_grad=False)
            flat[i] = old
            g_fd[j] = (lp - lm) / (2 * h)
        scale = max(np.linalg.norm(g_an) + np.linalg.norm(g_fd), 1e-8)
        out[name] = float(np.linalg.norm(g_an - g_fd) / scale)
    return out
