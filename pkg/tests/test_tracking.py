import numpy as np
import pytest

from posediff.bench import BenchConfig, make_sequence
from posediff.exceptions import NumericalError
from posediff.metrics import rotation_error_deg
from posediff.pose_core import pose_decode, pose_encode
from posediff.sampler import NoiseSchedule, SamplerConfig
from posediff.score_net import AnalyticScoreOracle, analytic_score
from posediff.tracking import (init_tracker, recrop, restart_time, trace_tsv, track_sequence, track_step,
                               warm_steps)

SCHED = NoiseSchedule()
CFG = BenchConfig.builtin()
SAMPLER = SamplerConfig(K=30, num_steps=200, seed=3)


def oracle_for(frame, std=0.02):
    center = pose_encode(frame.gt_pose, frame.crop, frame.intrinsics)
    oracle = AnalyticScoreOracle(center[None], std)
    return lambda v, t: analytic_score(oracle, v, t, SCHED)


def test_restart_time_matches_noise():
    t0 = restart_time(0.1, SCHED, 1e-5)
    assert SCHED.sigma(t0) == pytest.approx(0.1)
    assert restart_time(1e-4, SCHED, 1e-5) == 1e-5
    assert warm_steps(500, t0, SamplerConfig()) == round(500 * (t0 - 1e-5) / (1 - 1e-5))
    assert warm_steps(500, 1e-5, SamplerConfig()) == 0


def test_recrop_preserves_world_translation():
    frames = make_sequence(CFG, "camera", 3, seed=1)
    a, b = frames[0], frames[2]
    v = pose_encode(a.gt_pose, a.crop, a.intrinsics)
    moved = recrop(v[None], a.crop, b.crop)[0]
    assert np.allclose(pose_decode(moved, b.crop, b.intrinsics).translation, a.gt_pose.translation, atol=1e-12)


def test_sequence_motion_limits():
    frames = make_sequence(CFG, "laptop", 20, max_rot_deg=2.0, max_trans_m=0.01, seed=2)
    for p, q in zip(frames, frames[1:]):
        step = rotation_error_deg(p.gt_pose.rotation, q.gt_pose.rotation)
        assert step <= 2.0 + 1e-9
        assert np.linalg.norm(q.gt_pose.translation - p.gt_pose.translation) <= 0.01 + 1e-12
    assert [f.frame_index for f in frames] == list(range(20))


def test_warm_start_uses_fewer_evaluations_and_is_not_worse():
    frames = make_sequence(CFG, "camera", 8, seed=4)
    gt = [f.gt_pose for f in frames]
    warm = track_sequence(frames, gt, oracle_for, SAMPLER, SCHED)
    cold = track_sequence(frames, gt, oracle_for, SAMPLER, SCHED, cold=True)
    assert warm.score_evals.max() < cold.score_evals.min()
    assert warm.mean_rot_err <= cold.mean_rot_err + 0.5
    assert warm.mean_trans_err < 2.0
    text = trace_tsv(warm, cold)
    assert text.splitlines()[0].split("\t")[:2] == ["frame", "warm_rot_deg"] and len(text.splitlines()) == 9


def test_static_scene_stays_on_target():
    frames = make_sequence(CFG, "camera", 6, max_rot_deg=0.0, max_trans_m=0.0, seed=5)
    gt = [f.gt_pose for f in frames]
    warm = track_sequence(frames, gt, oracle_for, SAMPLER, SCHED)
    assert warm.rot_err_deg.max() < 3.0 and warm.trans_err_cm.max() < 3.0


def test_tracking_is_deterministic():
    frames = make_sequence(CFG, "camera", 4, seed=6)
    gt = [f.gt_pose for f in frames]
    a = track_sequence(frames, gt, oracle_for, SAMPLER, SCHED)
    b = track_sequence(frames, gt, oracle_for, SAMPLER, SCHED)
    assert trace_tsv(a) == trace_tsv(b)


def test_frame_zero_limit_of_tiny_noise():
    frames = make_sequence(CFG, "camera", 1, seed=7)
    f = frames[0]
    state = init_tracker(f.gt_pose, f.crop, f.intrinsics, 10, noise_std=1e-4, schedule=SCHED)
    _, est, new, evals = track_step(state, oracle_for(f), f.crop, f.intrinsics, SAMPLER, SCHED)
    assert evals == 0 and new.frame_index == 1
    assert np.abs(est.pose.translation - f.gt_pose.translation).max() < 1e-3
    assert rotation_error_deg(est.pose.rotation, f.gt_pose.rotation) < 0.05


def test_errors_carry_frame_index():
    frames = make_sequence(CFG, "camera", 2, seed=8)
    gt = [f.gt_pose for f in frames]
    bad = lambda frame: (lambda v, t: np.full_like(v, np.nan))  # noqa: E731
    with pytest.raises(NumericalError, match="frame=0"):
        track_sequence(frames, gt, bad, SAMPLER, SCHED)
    with pytest.raises(ValueError):
        track_sequence([], [], oracle_for, SAMPLER, SCHED)


def test_single_frame_equals_warm_start_from_ground_truth():
    frames = make_sequence(CFG, "camera", 1, seed=9)
    f = frames[0]
    res = track_sequence(frames, [f.gt_pose], oracle_for, SAMPLER, SCHED)
    state = init_tracker(f.gt_pose, f.crop, f.intrinsics, SAMPLER.K, schedule=SCHED)
    _, est, _, _ = track_step(state, oracle_for(f), f.crop, f.intrinsics, SAMPLER, SCHED)
    assert np.array_equal(res.estimates[0].vector, est.vector)
