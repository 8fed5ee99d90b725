import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from posediff.metrics import (EvalThresholds, SymmetrySpec, circular_std_deg, evaluate, geodesic_deg, iou3d,
                              mean_pairwise_geodesic_deg, precision_curve, rotation_error_deg, symmetry_angle,
                              translation_error_cm)
from posediff.pose_core import Pose, axis_angle_matrix

SYM = SymmetrySpec("axis_symmetric")


def box(t=(0, 0, 0), size=(1, 1, 1), R=None):
    return Pose(np.eye(3) if R is None else R, np.array(t, float), np.array(size, float))


def test_iou_analytic_cases():
    assert iou3d(box(), box(t=(0.5, 0, 0)), samples=100_000) == pytest.approx(1 / 3, abs=0.01)
    assert iou3d(box(), box(t=(1.0, 0, 0)), samples=100_000) == pytest.approx(0.0, abs=0.01)
    assert iou3d(box(), box(), samples=100_000) == 1.0
    assert iou3d(box(size=(2, 2, 2)), box(), samples=100_000) == pytest.approx(1 / 8, abs=0.01)


def test_iou_symmetric_in_arguments():
    a = box(t=(0.1, 0.2, 0.0), size=(1, 2, 1), R=Rotation.from_euler("z", 30, degrees=True).as_matrix())
    b = box(t=(0.3, 0.0, 0.1), size=(1.5, 1, 1))
    n = 50_000
    assert abs(iou3d(a, b, n) - iou3d(b, a, n)) < 2 / np.sqrt(n)


def test_iou_rejects_too_few_samples():
    with pytest.raises(ValueError):
        iou3d(box(), box(), samples=100)


def test_symmetric_rotation_error_ignores_axis_spin():
    R = Rotation.random(random_state=0).as_matrix()
    for ang in np.linspace(-3, 3, 7):
        spun = R @ axis_angle_matrix((0, 1, 0), ang)
        assert rotation_error_deg(spun, R, SYM) == 0.0 or rotation_error_deg(spun, R, SYM) < 1e-6
    tilt = R @ axis_angle_matrix((1, 0, 0), np.radians(20))
    assert rotation_error_deg(tilt, R, SYM) == pytest.approx(20.0)
    assert rotation_error_deg(R @ axis_angle_matrix((0, 1, 0), 1.0), R) == pytest.approx(np.degrees(1.0))


def test_conditional_symmetry_depends_on_handle():
    mug = SymmetrySpec("conditional_axis")
    R = np.eye(3)
    spun = axis_angle_matrix((0, 1, 0), 1.0)
    assert rotation_error_deg(spun, R, mug, handle_visible=False) < 1e-6
    assert rotation_error_deg(spun, R, mug, handle_visible=True) == pytest.approx(np.degrees(1.0))


def test_pure_axis_rotation_gives_exact_zero():
    spun = axis_angle_matrix((0, 1, 0), 0.7)
    assert rotation_error_deg(spun, np.eye(3), SYM) == 0.0


def test_translation_345():
    assert translation_error_cm([0.03, 0.04, 0.0], [0, 0, 0]) == 5.0


def test_geodesic_and_spread():
    assert geodesic_deg(np.eye(3), axis_angle_matrix((0, 0, 1), np.pi / 2)) == pytest.approx(90.0)
    assert mean_pairwise_geodesic_deg([np.eye(3)] * 3) == 0.0
    R = Rotation.random(random_state=3).as_matrix()
    assert symmetry_angle(R @ axis_angle_matrix((0, 1, 0), 0.4), R, (0, 1, 0)) == pytest.approx(0.4)
    assert circular_std_deg([0.1, 0.1]) < 1e-6
    assert circular_std_deg(np.linspace(-np.pi, np.pi, 100, endpoint=False)) > 100


def _dataset():
    rng = np.random.default_rng(0)
    gts, preds = [], []
    for i in range(40):
        R = Rotation.random(random_state=rng).as_matrix()
        gt = Pose(R, rng.uniform(-0.2, 0.2, 3) + [0, 0, 1], rng.uniform(0.1, 0.2, 3))
        err_R = R @ axis_angle_matrix(rng.normal(size=3), np.radians(rng.uniform(0, 25)))
        pred = Pose(err_R, gt.translation + rng.normal(0, 0.05, 3), gt.size * rng.uniform(0.8, 1.2, 3))
        gts.append(gt)
        preds.append((pred, 1 + i % 2))
    return preds, gts


def test_evaluate_monotone_in_thresholds():
    preds, gts = _dataset()
    syms = {1: SymmetrySpec(), 2: SYM}
    loose = evaluate(preds, gts, syms, EvalThresholds(20, 15, (0.25, 0.5)))
    tight = evaluate(preds, gts, syms, EvalThresholds(10, 5, (0.5, 0.75)))
    for a, b in zip(loose.columns[2:], tight.columns[2:]):
        assert loose.mean[a] >= tight.mean[b]
    assert loose.mean["IoU50"] >= tight.mean["IoU75"]


def test_evaluate_report_layout():
    preds, gts = _dataset()
    rep = evaluate(preds, gts, {1: SymmetrySpec(), 2: SYM})
    assert rep.columns == ["IoU50", "IoU75", "10deg", "10cm", "10deg10cm"]
    assert rep.counts == {1: 20, 2: 20}
    assert rep.mean["10deg"] == pytest.approx((rep.per_category[1]["10deg"] + rep.per_category[2]["10deg"]) / 2)
    assert rep.to_json() == evaluate(preds, gts, {1: SymmetrySpec(), 2: SYM}).to_json()
    lines = rep.to_table({1: "cup", 2: "can"}).splitlines()
    assert lines[0].split() == ["category", "n"] + rep.columns and lines[-1].startswith("mean")


def test_evaluate_errors():
    preds, gts = _dataset()
    with pytest.raises(ValueError):
        evaluate(preds[:3], gts, {1: SymmetrySpec(), 2: SYM})
    with pytest.raises(KeyError):
        evaluate(preds, gts, {1: SymmetrySpec()})
    with pytest.raises(ValueError):
        EvalThresholds(rot_deg=0)


def test_precision_curve():
    assert precision_curve([1, 2, 3, 4], [0, 2, 5]) == [(0.0, 0.0), (2.0, 0.5), (5.0, 1.0)]
    with pytest.raises(ValueError):
        precision_curve([1], [2, 1])
