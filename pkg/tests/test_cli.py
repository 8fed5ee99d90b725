import json
import subprocess
import sys

import pytest

from posediff.cli import build_parser, main

TINY = {
    "experiment_id": "tiny", "seed": 3,
    "data": {"n_train": 40, "n_test": 8},
    "model": {"obs_embed_dim": 8, "category_embed_dim": 4, "pose_embed_dim": 8, "time_embed_dim": 8,
              "trunk_dim": 16, "head_hidden": 8},
    "train": {"n_steps": 30, "batch_size": 16},
    "sampler": {"K": 4, "num_steps": 8},
    "experiments": {"k_values": [1, 2, 4], "n_eval": 8, "mode_vs_mean": {"trials": 20},
                    "condition_ablation": {"n_instances": 8, "K": 3},
                    "symmetry_demo": {"n_observations": 2, "K": 5},
                    "tracking": {"n_frames": 4, "K": 4}},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "r"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_help_documents_every_flag():
    res = subprocess.run([sys.executable, "-m", "posediff.cli", "sample", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--config", "--seed", "--out", "--checkpoint", "--k", "--split", "--limit"):
        assert flag in res.stdout
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-data", "train", "sample", "aggregate", "evaluate", "track", "bench"}


def test_usage_errors_exit_2(capsys):
    for argv in (["sample", "--bogus"], ["frobnicate"], ["bench", "nothing"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_missing_config_names_path(tmp_path, capsys):
    path = tmp_path / "absent.json"
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error code=config") and str(path) in err[0]


def test_missing_checkpoint_is_an_error(run, tmp_path, capsys):
    cfg, _ = run
    assert main(["bench", "k_ablation", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "code=checkpoint" in capsys.readouterr().err


def test_sample_k_override_and_pipeline(run, capsys):
    cfg, out = run
    ckpt = str(out / "model.ckpt")
    assert main(["sample", "--config", str(cfg), "--out", str(out), "--checkpoint", ckpt, "--k", "7"]) == 0
    files = sorted((out / "hypotheses").glob("*.ndjson"))
    assert len(files) == 8
    assert all(len(f.read_text().splitlines()) == 7 for f in files)
    assert main(["aggregate", "--config", str(cfg), "--out", str(out)]) == 0
    assert len((out / "predictions.ndjson").read_text().splitlines()) == 8
    assert main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert sum(report["counts"].values()) == 8
    assert "10deg10cm" in capsys.readouterr().out


@pytest.mark.parametrize("experiment,expected", [
    ("k_ablation", {"plot_k_curve.tsv", "plot_threshold_curves.tsv"}),
    ("mode_vs_mean", {"plot_bimodal_distances.tsv"}),
    ("condition_ablation", {"plot_condition_errors.tsv"}),
    ("symmetry_demo", {"plot_hypotheses.tsv"}),
    ("tracking", {"trace.tsv"}),
])
def test_bench_outputs_are_reproducible(run, tmp_path, experiment, expected):
    cfg, out = run
    reports = []
    for rep in ("a", "b"):
        dest = tmp_path / rep
        assert main(["bench", experiment, "--config", str(cfg), "--out", str(dest),
                     "--checkpoint", str(out / "model.ckpt")]) == 0
        names = {p.name for p in dest.iterdir()}
        assert expected | {"report.json", "report.txt", "timing.tsv"} <= names
        reports.append({n: (dest / n).read_bytes() for n in names if n != "timing.tsv"})
    assert reports[0] == reports[1]


def test_seed_flag_changes_data(run, tmp_path):
    cfg, out = run
    assert main(["gen-data", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train.ndjson").read_bytes() != (out / "train.ndjson").read_bytes()


def test_output_dir_from_environment(run, tmp_path, monkeypatch):
    cfg, _ = run
    monkeypatch.setenv("POSEDIFF_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "test.ndjson").is_file()
