"""Benchmark experiments.

Every experiment writes ``report.json`` (machine readable), ``report.txt``
(aligned tables) and columnar ``plot_*.tsv`` files into its output
directory. Reports contain no timings, so identical configs and seeds give
byte-identical files; wall-clock numbers go to ``timing.tsv``.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from ..aggregation import COMPONENTS, MeanShiftConfig, mean_vector, mode_vector
from ..estimator import DiffusionPoseEstimator
from ..exceptions import CheckpointError, ConfigError
from ..metrics import (EvalThresholds, _rounded, circular_std_deg, evaluate, mean_pairwise_geodesic_deg,
                       precision_curve, rotation_error_deg, symmetry_angle, translation_error_cm)
from ..pose_core import decode_batch, matrix_to_rot6d, pose_decode, rot6d_to_matrix
from ..sampler import SamplerConfig
from ..tracking import trace_tsv, track_sequence
from .config import BenchConfig
from .generator import features, generate_split, make_sequence

EXPERIMENTS = ("k_ablation", "mode_vs_mean", "condition_ablation", "symmetry_demo", "tracking")
NEEDS_MODEL = {"k_ablation", "condition_ablation", "symmetry_demo", "tracking"}
DROP_SETTINGS = {
    "full": (False, False, False, False),
    "no_category": (False, False, True, False),
    "no_global": (False, False, False, True),
    "no_category_global": (False, False, True, True),
}
ROT_GRID = [float(x) for x in range(0, 61, 2)]
TRANS_GRID = [float(x) for x in range(0, 31)]


def workers():
    n = int(os.environ.get("POSEDIFF_WORKERS", "1"))
    if n < 1:
        raise ConfigError("POSEDIFF_WORKERS must be >= 1")
    return n


def load_estimator(cfg: BenchConfig, checkpoint=None):
    path = checkpoint or cfg["checkpoint"]
    if path is None:
        raise CheckpointError("missing checkpoint: pass --checkpoint or set 'checkpoint' in the config")
    path = Path(path)
    if not path.is_absolute() and cfg.source and not cfg.source.startswith("builtin:") and not path.exists():
        path = Path(cfg.source).parent / path
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    s, a = cfg["sampler"], cfg["aggregation"]
    return DiffusionPoseEstimator.load(path, n_ode_steps=s["num_steps"], t_end=s["t_end"], chunk_rows=s["chunk_rows"],
                                       random_state=cfg.seed, **a)


def thresholds(cfg: BenchConfig):
    m = cfg["metrics"]
    return EvalThresholds(m["rot_deg"], m["trans_cm"], tuple(m["iou_levels"]))


def _sample_rows(args):
    est, X, K, kw = args
    return est.sample_hypotheses(X, K, **kw)


def sample_all(est: DiffusionPoseEstimator, X, K, *, seed, drop_mask=None, n_ode_steps=None, n_workers=None):
    """Hypotheses for every row; output does not depend on the worker count."""
    n_workers = n_workers or workers()
    kw = {"seed": seed, "drop_mask": drop_mask, "n_ode_steps": n_ode_steps}
    if n_workers == 1 or len(X) < 2 * n_workers:
        return est.sample_hypotheses(X, K, **kw)
    parts = np.array_split(np.arange(len(X)), n_workers)
    jobs = [(est, X[p], K, dict(kw, streams=p)) for p in parts]
    with ProcessPoolExecutor(n_workers) as pool:
        return np.concatenate(list(pool.map(_sample_rows, jobs)))


def eval_vectors(V, samples, cfg: BenchConfig):
    preds = [(decode_batch(v[None], s.crop, s.intrinsics)[0][0], s.category_id) for v, s in zip(V, samples)]
    return evaluate(preds, [s.gt_pose for s in samples], cfg.symmetries, thresholds(cfg),
                    handle_visible=[s.handle_visible for s in samples], iou_samples=cfg["metrics"]["iou_samples"],
                    seed=cfg.seed)


def eval_samples(cfg: BenchConfig):
    test = generate_split(cfg, "test")
    n = cfg["experiments"]["n_eval"]
    return test if n is None else test[:n]


def _names(cfg):
    return {c.id: c.name for c in cfg.categories}


def _write(out, name, text):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _dump(obj):
    return json.dumps(_rounded(obj), indent=2, sort_keys=True) + "\n"


def _tsv(header, rows):
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(f"{x:.6f}" if isinstance(x, float) else str(x) for x in r))
    return "\n".join(lines) + "\n"


# -- K ablation ---------------------------------------------------------------------


def k_ablation(cfg: BenchConfig, est, out):
    samples = eval_samples(cfg)
    X, _ = features(samples)
    ks = sorted(cfg["experiments"]["k_values"])
    H = sample_all(est, X, ks[-1], seed=cfg.seed)
    reports = {k: eval_vectors(est.aggregate(H[:, :k], "mode"), samples, cfg) for k in ks}
    joint = thresholds(cfg).column_names()[-1]
    names = _names(cfg)
    curve_rows = [[k] + [reports[k].mean[c] for c in reports[k].columns] for k in ks]
    ref = cfg["sampler"]["K"] if cfg["sampler"]["K"] in reports else ks[-1]
    thr_rows = []
    for cat, errs in reports[ref].errors.items():
        rot = precision_curve([e["rot_deg"] for e in errs], ROT_GRID)
        tr = precision_curve([e["trans_cm"] for e in errs], TRANS_GRID)
        thr_rows += [[names[cat], "rot_deg", t, p] for t, p in rot] + [[names[cat], "trans_cm", t, p] for t, p in tr]
    _write(out, "plot_k_curve.tsv", _tsv(["K"] + reports[ks[0]].columns, curve_rows))
    _write(out, "plot_threshold_curves.tsv", _tsv(["category", "metric", "threshold", "accuracy"], thr_rows))
    _write(out, "report.txt", "".join(f"K = {k}\n{reports[k].to_table(names)}\n" for k in ks))
    result = {"experiment": "k_ablation", "config_digest": cfg.digest(), "n_instances": len(samples),
              "accuracy": {str(k): reports[k].mean[joint] for k in ks},
              "reports": {str(k): reports[k].to_dict() for k in ks}}
    return result, {"hypotheses": H, "reports": reports, "samples": samples}


# -- mode vs mean -------------------------------------------------------------------


def _block_distance(x, center, ms: MeanShiftConfig):
    """Largest per-component distance in units of that component's bandwidth."""
    return max(np.linalg.norm(x[sl] - center[sl]) / ms.bandwidth(name) for name, sl in COMPONENTS)


def bimodal_trial(rng, ms: MeanShiftConfig, majority=35, minority=15, spread=0.25, separation=5.0):
    """Two clusters of hypotheses with a known majority centre.

    Each component block of the minority centre sits ``separation``
    bandwidths from the majority centre; points scatter with per-coordinate
    std ``spread`` bandwidths.
    """
    R = Rotation.random(random_state=rng).as_matrix()
    center = np.concatenate([matrix_to_rot6d(R), [0.0, 0.0, 0.5], np.exp(rng.normal(np.log(0.15), 0.3, 3))])
    other = center.copy()
    for name, sl in COMPONENTS:
        d = rng.standard_normal(sl.stop - sl.start)
        other[sl] += separation * ms.bandwidth(name) * d / np.linalg.norm(d)
    scale = np.concatenate([np.full(sl.stop - sl.start, ms.bandwidth(name)) for name, sl in COMPONENTS])
    pts = np.vstack([center + spread * scale * rng.standard_normal((majority, 12)),
                     other + spread * scale * rng.standard_normal((minority, 12))])
    return rng.permutation(pts), center


def mode_vs_mean_constructed(cfg: BenchConfig, ms: MeanShiftConfig):
    p = cfg["experiments"]["mode_vs_mean"]
    rows = []
    for trial in range(p["trials"]):
        rng = np.random.default_rng([cfg.seed, 7, trial])
        pts, center = bimodal_trial(rng, ms, p["majority"], p["minority"], p["spread"], p["separation"])
        d_mode = _block_distance(mode_vector(pts, ms).vector, center, ms)
        d_mean = _block_distance(mean_vector(pts), center, ms)
        rows.append([trial, d_mode, d_mean])
    d = np.array([r[1:] for r in rows])
    summary = {"trials": len(rows), "mode_within_bandwidth": float(np.mean(d[:, 0] <= 1.0)),
               "mean_beyond_bandwidth": float(np.mean(d[:, 1] > 1.0)),
               "median_distance_mode": float(np.median(d[:, 0])), "median_distance_mean": float(np.median(d[:, 1]))}
    return summary, rows


def mode_vs_mean(cfg: BenchConfig, est, out):
    ms = MeanShiftConfig(**cfg["aggregation"])
    summary, rows = mode_vs_mean_constructed(cfg, ms)
    _write(out, "plot_bimodal_distances.tsv", _tsv(["trial", "mode_distance_bw", "mean_distance_bw"], rows))
    result = {"experiment": "mode_vs_mean", "config_digest": cfg.digest(), "constructed": summary, "model": None}
    text = (f"constructed 70/30 bimodal sets: {summary['trials']} trials\n"
            f"  mode within bandwidth of majority: {100 * summary['mode_within_bandwidth']:.1f}%\n"
            f"  mean beyond bandwidth of majority: {100 * summary['mean_beyond_bandwidth']:.1f}%\n")
    if est is not None:
        samples = eval_samples(cfg)
        X, _ = features(samples)
        H = sample_all(est, X, cfg["sampler"]["K"], seed=cfg.seed)
        names = _names(cfg)
        reports = {m: eval_vectors(est.aggregate(H, m), samples, cfg) for m in ("mode", "mean")}
        result["model"] = {m: r.to_dict() for m, r in reports.items()}
        text += "".join(f"\naggregation = {m}\n{r.to_table(names)}" for m, r in reports.items())
    _write(out, "report.txt", text)
    return result, {"rows": rows}


# -- condition ablation ---------------------------------------------------------------


def condition_ablation(cfg: BenchConfig, est, out):
    p = cfg["experiments"]["condition_ablation"]
    samples = generate_split(cfg, "test")[: p["n_instances"]]
    X, _ = features(samples)
    gt = [s.gt_pose for s in samples]
    per = {}
    reports = {}
    for name, mask in DROP_SETTINGS.items():
        H = sample_all(est, X, p["K"], seed=cfg.seed, drop_mask=mask, n_ode_steps=p["num_steps"])
        V = est.aggregate(H, "mode")
        poses = [pose_decode(v, s.crop, s.intrinsics) for v, s in zip(V, samples)]
        size_err = np.array([np.linalg.norm(q.size - g.size) / np.linalg.norm(g.size) for q, g in zip(poses, gt)])
        trans_err = np.array([translation_error_cm(q.translation, g.translation) for q, g in zip(poses, gt)])
        per[name] = {"size_rel": size_err, "trans_cm": trans_err}
        reports[name] = eval_vectors(V, samples, cfg)
    summary = {}
    for name in DROP_SETTINGS:
        s = {"mean_size_rel_err": float(per[name]["size_rel"].mean()),
             "mean_trans_err_cm": float(per[name]["trans_cm"].mean())}
        if name != "full":
            for key in ("size_rel", "trans_cm"):
                diff = per[name][key] - per["full"][key]
                s[f"{key}_increase"] = float(diff.mean())
                s[f"{key}_frac_worse"] = float(np.mean(diff > 0))
                s[f"{key}_wilcoxon_p"] = float(stats.wilcoxon(per[name][key], per["full"][key],
                                                              alternative="greater").pvalue)
        summary[name] = s
    names = _names(cfg)
    rows = [[i] + [float(per[n][k][i]) for n in DROP_SETTINGS for k in ("size_rel", "trans_cm")]
            for i in range(len(samples))]
    header = ["instance"] + [f"{n}_{k}" for n in DROP_SETTINGS for k in ("size_rel", "trans_cm")]
    _write(out, "plot_condition_errors.tsv", _tsv(header, rows))
    _write(out, "report.txt", "".join(f"setting = {n}\n{r.to_table(names)}\n" for n, r in reports.items()))
    result = {"experiment": "condition_ablation", "config_digest": cfg.digest(), "n_instances": len(samples),
              "K": p["K"], "num_steps": p["num_steps"] or est.n_ode_steps, "summary": summary, "reports": {n: r.to_dict() for n, r in reports.items()}}
    return result, {"per_instance": per}


# -- symmetry demo ------------------------------------------------------------------------


def symmetry_demo(cfg: BenchConfig, est, out):
    p = cfg["experiments"]["symmetry_demo"]
    test = generate_split(cfg, "test")
    plot_rows, stats_out = [], {}
    for cat in cfg.categories:
        chosen = [s for s in test if s.category_id == cat.id][: p["n_observations"]]
        X, _ = features(chosen)
        H = sample_all(est, X, p["K"], seed=cfg.seed)
        entries = []
        for s, h in zip(chosen, H):
            Rs = [rot6d_to_matrix(v[:6]) for v in h]
            G = s.gt_pose.rotation
            entry = {"sample_id": s.sample_id}
            if cat.symmetry.is_symmetric(s.handle_visible):
                axis = np.asarray(cat.symmetry.axis)
                angles = [symmetry_angle(R, G, axis) for R in Rs]
                entry["circular_std_deg"] = circular_std_deg(angles)
                entry["max_axis_err_deg"] = max(rotation_error_deg(R, G, cat.symmetry) for R in Rs)
            else:
                entry["mean_pairwise_geodesic_deg"] = mean_pairwise_geodesic_deg(Rs)
            entries.append(entry)
            ypr = Rotation.from_matrix(np.array(Rs)).as_euler("ZYX", degrees=True)
            plot_rows += [[cat.name, s.sample_id, k, float(y), float(pi), float(r)] for k, (y, pi, r) in enumerate(ypr)]
        stats_out[cat.name] = {"symmetric": cat.symmetry.kind != "asymmetric", "observations": entries}
    _write(out, "plot_hypotheses.tsv", _tsv(["category", "sample_id", "hypothesis", "yaw_deg", "pitch_deg", "roll_deg"],
                                            plot_rows))
    lines = []
    for name, st in stats_out.items():
        for e in st["observations"]:
            vals = "  ".join(f"{k}={v:.2f}" for k, v in sorted(e.items()) if k != "sample_id")
            lines.append(f"{name:10s} sample {e['sample_id']:5d}  {vals}")
    _write(out, "report.txt", "\n".join(lines) + "\n")
    return {"experiment": "symmetry_demo", "config_digest": cfg.digest(), "K": p["K"], "categories": stats_out}, {}


# -- tracking ------------------------------------------------------------------------------


def tracking(cfg: BenchConfig, est, out):
    p = cfg["experiments"]["tracking"]
    s = cfg["sampler"]
    sampler_cfg = SamplerConfig(K=p["K"], num_steps=s["num_steps"], t_end=s["t_end"], seed=cfg.seed)
    ms = MeanShiftConfig(**cfg["aggregation"])
    cat = cfg.category(p["category"])

    def run(teleport):
        frames = make_sequence(cfg, cat.id, p["n_frames"], max_rot_deg=p["max_rot_deg"], max_trans_m=p["max_trans_m"],
                               seed=cfg.seed, teleport_frame=teleport, teleport_m=p["teleport_m"])
        gt = [f.gt_pose for f in frames]
        fn = lambda f: est.score_function(features([f])[0][0])  # noqa: E731
        warm = track_sequence(frames, gt, fn, sampler_cfg, est.schedule, ms, p["noise_std"], cat.symmetry)
        cold = track_sequence(frames, gt, fn, sampler_cfg, est.schedule, ms, p["noise_std"], cat.symmetry, cold=True)
        return warm, cold

    warm, cold = run(None)
    result = {"experiment": "tracking", "config_digest": cfg.digest(), "category": cat.name, "frames": p["n_frames"],
              "warm": {"mean_rot_err_deg": warm.mean_rot_err, "mean_trans_err_cm": warm.mean_trans_err,
                       "score_evals_per_frame": int(warm.score_evals.max())},
              "cold": {"mean_rot_err_deg": cold.mean_rot_err, "mean_trans_err_cm": cold.mean_trans_err,
                       "score_evals_per_frame": int(cold.score_evals.max())},
              "teleport": None}
    _write(out, "trace.tsv", trace_tsv(warm, cold))
    timing = [[f, float(warm.wall_s[f]), float(cold.wall_s[f])] for f in range(len(warm.wall_s))]
    if p["teleport_frame"] is not None:
        tw, _ = run(p["teleport_frame"])
        result["teleport"] = {"frame": p["teleport_frame"], "jump_m": p["teleport_m"],
                              "recovery_frames": tw.recovery_frames(p["teleport_frame"]),
                              "peak_trans_err_cm": float(tw.trans_err_cm[p["teleport_frame"]:].max())}
        _write(out, "trace_teleport.tsv", trace_tsv(tw))
    _write(out, "timing.tsv", _tsv(["frame", "warm_wall_s", "cold_wall_s"], timing))
    w, c = result["warm"], result["cold"]
    _write(out, "report.txt",
           f"{'mode':6s} {'R_err':>8s} {'t_err':>8s} {'evals':>6s}\n"
           f"{'warm':6s} {w['mean_rot_err_deg']:8.2f} {w['mean_trans_err_cm']:8.2f} {w['score_evals_per_frame']:6d}\n"
           f"{'cold':6s} {c['mean_rot_err_deg']:8.2f} {c['mean_trans_err_cm']:8.2f} {c['score_evals_per_frame']:6d}\n")
    return result, {"warm": warm, "cold": cold}


RUNNERS = {"k_ablation": k_ablation, "mode_vs_mean": mode_vs_mean, "condition_ablation": condition_ablation,
           "symmetry_demo": symmetry_demo, "tracking": tracking}


def run_experiment(kind, cfg: BenchConfig, out_dir, estimator=None, checkpoint=None):
    """Run one experiment and write its files; returns ``(report_dict, extras)``."""
    if kind not in RUNNERS:
        raise ConfigError(f"unknown experiment {kind!r}; choose from {', '.join(EXPERIMENTS)}")
    if estimator is None and (kind in NEEDS_MODEL or checkpoint or cfg["checkpoint"]):
        estimator = load_estimator(cfg, checkpoint)
    out = Path(out_dir)
    start = time.perf_counter()
    result, extras = RUNNERS[kind](cfg, estimator, out)
    _write(out, "report.json", _dump(result))
    with open(out / "timing.tsv", "a") as fh:
        fh.write(f"# total_wall_s\t{time.perf_counter() - start:.3f}\n")
    return result, extras
