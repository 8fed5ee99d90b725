"""Command line entry point: ``posediff <command> [options]``.

Failures print one line ``error code=<code> message=<text>`` to stderr and
exit with status 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .aggregation import MeanShiftConfig, mean_vector, mode_vector
from .bench.config import BenchConfig
from .bench.experiments import EXPERIMENTS, eval_vectors, load_estimator, run_experiment, sample_all
from .bench.generator import features, generate_dataset, read_samples
from .estimator import DiffusionPoseEstimator
from .exceptions import PoseDiffError
from .metrics import _rounded
from .pose_core import pose_decode
from .sampler import HypothesisSet

log = logging.getLogger("posediff")


def _common(p):
    p.add_argument("--config", help="benchmark config (JSON); defaults to the built-in desk config")
    p.add_argument("--seed", type=int, help="master seed overriding the config's 'seed'")
    p.add_argument("--out", help="output directory (default: $POSEDIFF_OUT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="posediff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write train.ndjson and test.ndjson")
    _common(p)

    p = sub.add_parser("train", help="fit the score network, write model.ckpt")
    _common(p)
    p.add_argument("--data", help="directory holding train.ndjson (default: --out)")
    p.add_argument("--steps", type=int, help="override train.n_steps")

    p = sub.add_parser("sample", help="write one hypothesis file per observation")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (default: config 'checkpoint')")
    p.add_argument("--data", help="directory holding the split file (default: --out)")
    p.add_argument("--split", default="test", choices=("train", "test"), help="dataset split to sample")
    p.add_argument("--k", type=int, help="hypotheses per observation, overriding sampler.K")
    p.add_argument("--limit", type=int, help="only the first N observations")

    p = sub.add_parser("aggregate", help="reduce hypothesis files to predictions.ndjson")
    _common(p)
    p.add_argument("--hypotheses", help="directory of hypothesis files (default: <out>/hypotheses)")
    p.add_argument("--method", default="mode", choices=("mode", "mean"), help="aggregation rule")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--data", help="directory holding the split file (default: --out)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--predictions", help="predictions file (default: <out>/predictions.ndjson)")

    p = sub.add_parser("track", help="warm-start tracking on a synthetic sequence")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (default: config 'checkpoint')")

    p = sub.add_parser("bench", help="run a benchmark experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (default: config 'checkpoint')")
    return parser


def _config(args):
    cfg = BenchConfig.load(args.config) if args.config else BenchConfig.builtin()
    return cfg.with_seed(args.seed)


def _out(args):
    out = Path(args.out or os.environ.get("POSEDIFF_OUT", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args, cfg, out):
    """``--checkpoint``, else the config's, else ``<out>/model.ckpt`` if present."""
    if args.checkpoint or cfg["checkpoint"]:
        return args.checkpoint
    local = out / "model.ckpt"
    return str(local) if local.is_file() else None


def cmd_gen_data(args, cfg, out):
    train, test = generate_dataset(cfg, out)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    log.info("wrote %d train / %d test samples to %s", len(train), len(test), out)


def cmd_train(args, cfg, out):
    samples = read_samples(Path(args.data or out) / "train.ndjson")
    X, y = features(samples)
    params = cfg.estimator_params()
    if args.steps is not None:
        params["n_steps"] = args.steps
    est = DiffusionPoseEstimator(**params)
    every = max(1, params["n_steps"] // 20)
    est.fit(X, y, callback=lambda step, loss: step % every or log.info("step %d loss %.4f", step, loss))
    est.save(out / "model.ckpt")
    (out / "loss_curve.tsv").write_text("step\tloss\n" + "".join(f"{i}\t{l:.8f}\n" for i, l in enumerate(est.loss_curve_)))


def cmd_sample(args, cfg, out):
    est = load_estimator(cfg, _checkpoint(args, cfg, out))
    samples = read_samples(Path(args.data or out) / f"{args.split}.ndjson")
    if args.limit is not None:
        samples = samples[: args.limit]
    K = args.k or cfg["sampler"]["K"]
    if K < 1:
        raise ValueError("--k must be >= 1")
    X, _ = features(samples)
    H = sample_all(est, X, K, seed=cfg.seed)
    hdir = out / "hypotheses"
    hdir.mkdir(parents=True, exist_ok=True)
    conf = {"K": K, "num_steps": est.n_ode_steps, "t_end": est.t_end, "seed": cfg.seed}
    for s, h in zip(samples, H):
        hs = HypothesisSet(raw=h, observation_id=f"{args.split}-{s.sample_id:06d}", seed=cfg.seed, config=conf,
                           crop=s.crop, intrinsics=s.intrinsics).decode()
        hs.write(hdir / f"{hs.observation_id}.ndjson")


def cmd_aggregate(args, cfg, out):
    hdir = Path(args.hypotheses or out / "hypotheses")
    files = sorted(hdir.glob("*.ndjson"))
    if not files:
        raise FileNotFoundError(f"no hypothesis files in {hdir}")
    ms = MeanShiftConfig(**cfg["aggregation"])
    with open(out / "predictions.ndjson", "w") as fh:
        for f in files:
            hs = HypothesisSet.read(f)
            v = mode_vector(hs.raw, ms).vector if args.method == "mode" else mean_vector(hs.raw)
            rec = {"observation_id": hs.observation_id, "method": args.method, "vector": v.tolist(),
                   "pose": pose_decode(v, hs.crop, hs.intrinsics).to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_evaluate(args, cfg, out):
    samples = {f"{args.split}-{s.sample_id:06d}": s for s in read_samples(Path(args.data or out) / f"{args.split}.ndjson")}
    path = Path(args.predictions or out / "predictions.ndjson")
    if not path.is_file():
        raise FileNotFoundError(f"predictions file not found: {path}")
    recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    missing = [r["observation_id"] for r in recs if r["observation_id"] not in samples]
    if missing:
        raise KeyError(f"predictions for unknown observations, first: {missing[0]}")
    chosen = [samples[r["observation_id"]] for r in recs]
    report = eval_vectors(np.array([r["vector"] for r in recs]), chosen, cfg)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    (out / "eval_report.txt").write_text(report.to_table({c.id: c.name for c in cfg.categories}))
    print(report.to_table({c.id: c.name for c in cfg.categories}), end="")


def cmd_track(args, cfg, out):
    result, _ = run_experiment("tracking", cfg, out, checkpoint=_checkpoint(args, cfg, out))
    print(json.dumps(_rounded({k: result[k] for k in ("warm", "cold")}), sort_keys=True))


def cmd_bench(args, cfg, out):
    run_experiment(args.experiment, cfg, out, checkpoint=_checkpoint(args, cfg, out))
    print((out / "report.txt").read_text(), end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "aggregate": cmd_aggregate,
            "evaluate": cmd_evaluate, "track": cmd_track, "bench": cmd_bench}


def _one_line(text):
    return " ".join(str(text).split())


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg, _out(args))
    except PoseDiffError as exc:
        print(f"error code={exc.code} message={_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        code = "io" if isinstance(exc, OSError) else "invalid_input"
        print(f"error code={code} message={_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
