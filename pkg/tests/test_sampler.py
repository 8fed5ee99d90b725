import numpy as np
import pytest

from posediff.exceptions import NumericalError
from posediff.pose_core import CameraIntrinsics, CropSpec
from posediff.sampler import (HypothesisSet, NoiseSchedule, SamplerConfig, euler_grid, hypothesis_noise,
                              integrate_probability_flow, perturb, prob_flow_ode_sample, sample_from_prior_noise,
                              sigma_at)
from posediff.score_net import AnalyticScoreOracle, analytic_score

SCHED = NoiseSchedule()


def test_schedule_endpoints_and_inverse():
    assert sigma_at(SCHED, 0.0) == pytest.approx(0.01)
    assert sigma_at(SCHED, 1.0) == pytest.approx(50.0)
    assert sigma_at(SCHED, 0.5) == pytest.approx(0.01 * 5000**0.5)
    t = np.linspace(0, 1, 11)
    assert np.allclose(SCHED.t_of_sigma(SCHED.sigma(t)), t)
    with pytest.raises(ValueError):
        sigma_at(SCHED, 1.5)
    with pytest.raises(ValueError):
        NoiseSchedule(1.0, 0.5)


def test_perturb_broadcasts_per_row_sigma():
    v0 = np.zeros((3, 12))
    z = np.ones((3, 12))
    out = perturb(v0, np.array([0.0, 0.5, 1.0]), z, SCHED)
    assert np.allclose(out[:, 0], SCHED.sigma([0.0, 0.5, 1.0]))


def test_hypothesis_noise_prefix_property():
    big = hypothesis_noise(3, 100, stream=5)
    assert np.array_equal(big[:10], hypothesis_noise(3, 10, stream=5))
    assert not np.array_equal(big[:10], hypothesis_noise(3, 10, stream=6))


def test_prior_draw_scale():
    cfg = SamplerConfig(K=4000, seed=1)
    x = sample_from_prior_noise(cfg, SCHED)
    assert x.std() == pytest.approx(50.0, rel=0.03)
    y = sample_from_prior_noise(cfg, SCHED, rng=np.random.default_rng(0))
    assert y.shape == (4000, 12)


def test_euler_grid():
    g = euler_grid(1.0, 1e-5, 4)
    assert g[0] == 1.0 and g[-1] == 1e-5 and len(g) == 5


def test_ode_recovers_gaussian_target():
    oracle = AnalyticScoreOracle(np.full((1, 12), 0.4), 0.1)
    cfg = SamplerConfig(K=400, num_steps=300, seed=2)
    hs = prob_flow_ode_sample(lambda v, t: analytic_score(oracle, v, t, SCHED), cfg, SCHED)
    assert np.abs(hs.raw.mean(axis=0) - 0.4).max() < 0.03
    assert hs.raw.std(axis=0).mean() == pytest.approx(0.1, rel=0.1)


def test_integration_flags_nonfinite_scores():
    def bad(v, t):
        s = -v.copy()
        s[3] = np.nan
        return s

    with pytest.raises(NumericalError) as info:
        integrate_probability_flow(bad, np.ones((5, 12)), SCHED, 1.0, 1e-5, 10)
    assert info.value.step == 0 and info.value.index == 3


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(K=0)
    with pytest.raises(ValueError):
        SamplerConfig(t_start=0.5, t_end=0.6)


def test_hypothesis_set_file_round_trip(tmp_path):
    K = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)
    crop = CropSpec(320.0, 240.0, 150.0, 150.0, 256.0, 2.56)
    raw = np.tile(np.r_[1.0, 0, 0, 0, 1.0, 0, 0.01, -0.02, 0.4, 0.1, 0.2, 0.1], (3, 1))
    hs = HypothesisSet(raw=raw, observation_id="obs-1", seed=4, config={"K": 3}, crop=crop, intrinsics=K).decode()
    hs.write(tmp_path / "h.ndjson")
    back = HypothesisSet.read(tmp_path / "h.ndjson")
    assert np.array_equal(back.raw, raw)
    assert back.poses == hs.poses and back.crop == crop and back.config == {"K": 3}
    assert back.subset(2).K == 2
