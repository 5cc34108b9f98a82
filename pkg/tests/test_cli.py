import json
import warnings

import numpy as np
import pytest

from gradshift import cli
from gradshift.data import read_csv

SMALL = ["--set", "source.n=80", "--set", "target.n=80", "--set", "run.hidden=[8]",
         "--set", "run.source_train.iterations=150", "--iterations", "90", "--num-stages", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_generate_and_overwrite_refusal(tmp_path, capsys):
    out = tmp_path / "moons.csv"
    assert run("generate", out, "--n", 50, "--rotate", "0:30") == cli.EXIT_OK
    data = read_csv(out)
    assert data.n == 50
    before = out.read_bytes()
    assert run("generate", out, "--n", 20) == cli.EXIT_EXISTS
    assert out.read_bytes() == before
    assert run("generate", out, "--n", 20, "--force") == cli.EXIT_OK
    assert read_csv(out).n == 20


def test_generate_respects_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path))
    assert run("generate", "sub/m.csv", "--n", 10) == cli.EXIT_OK
    assert (tmp_path / "sub" / "m.csv").exists()


def test_generate_usage_errors(tmp_path):
    assert run("generate", tmp_path / "x.csv", "--n", 0) == cli.EXIT_USAGE
    assert run("generate", tmp_path / "x.csv", "--rotate", "30") == cli.EXIT_USAGE
    assert not (tmp_path / "x.csv").exists()
    with pytest.raises(SystemExit) as e:
        run("generate")
    assert e.value.code == 2


def test_adapt_rejects_bad_stage_count_before_writing(tmp_path):
    out = tmp_path / "run"
    assert run("adapt", *SMALL, "--num-stages", 0, "--out", out) == cli.EXIT_USAGE
    assert not out.exists()
    assert run("adapt", *SMALL, "--set", "run.bogus=1", "--out", out) == cli.EXIT_USAGE
    assert run("adapt", *SMALL, "--set", "source.recipe=cifar", "--out", out) == cli.EXIT_USAGE
    assert not out.exists()


def test_adapt_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("adapt", *SMALL, "--out", out) == cli.EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("final_accuracy=") and "stages=3" in line
    report = json.loads((out / "report.json").read_text())
    assert len(report["stages"]) == 3
    for m in range(4):
        assert (out / f"stage_{m}" / "model.json").exists()
    assert json.loads((out / "config.json").read_text())["run"]["num_stages"] == 3

    assert run("adapt", *SMALL, "--out", out) == cli.EXIT_EXISTS
    assert run("adapt", *SMALL, "--out", out, "--resume", "stage_2") == cli.EXIT_OK
    assert json.loads((out / "report.json").read_text())["final_accuracy"] == report["final_accuracy"]
    assert run("adapt", *SMALL, "--out", out, "--resume", "stage_7") == cli.EXIT_USAGE
    assert run("adapt", *SMALL, "--out", out, "--resume", "latest") == cli.EXIT_USAGE
    # a changed config cannot resume from these checkpoints
    assert run("adapt", *SMALL, "--lam", 3, "--out", out, "--resume", "stage_1") == cli.EXIT_USAGE

    csv_path = tmp_path / "consec.csv"
    assert run("diagnose", "consecutive", "--run", out, "--out", csv_path) == cli.EXIT_OK
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "m,a_dis" and len(rows) == 1 + 3
    assert run("diagnose", "consecutive", "--run", out, "--out", csv_path) == cli.EXIT_EXISTS


def test_adapt_ssda_mode(tmp_path):
    out = tmp_path / "ssda"
    assert run("adapt", *SMALL, "--mode", "SSDA", "--out", out) == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert all(s["n_labeled_target"] == 6 for s in report["stages"])


def test_adapt_from_csv_config(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path))
    assert run("generate", "src.csv", "--n", 80, "--rotate", "0:30") == cli.EXIT_OK
    assert run("generate", "tgt.csv", "--n", 80, "--rotate", "60:90", "--seed", 1) == cli.EXIT_OK
    cfg = {"source": {"path": "src.csv"}, "target": {"path": "tgt.csv"}, "out_dir": str(tmp_path / "r"),
           "run": {"num_stages": 2, "hidden": [8], "train": {"iterations": 60}}}
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    assert run("adapt", tmp_path / "exp.json") == cli.EXIT_OK
    assert len(json.loads((tmp_path / "r" / "report.json").read_text())["stages"]) == 2
    bad = dict(cfg, source={"path": "missing.csv"})
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert run("adapt", tmp_path / "bad.json") == cli.EXIT_USAGE
    (tmp_path / "both.json").write_text(json.dumps(dict(cfg, source={"path": "src.csv", "recipe": "moons"})))
    assert run("adapt", tmp_path / "both.json") == cli.EXIT_USAGE


def test_train_source(tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("train-source", *SMALL, "--model-out", out) == cli.EXIT_OK
    assert "source_accuracy=" in capsys.readouterr().out
    assert run("train-source", *SMALL, "--model-out", out) == cli.EXIT_EXISTS


def test_diverging_training_exits_4(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = run("adapt", *SMALL, "--set", "run.source_train.eta0=1e8", "--out", tmp_path / "r")
    assert code == cli.EXIT_DIVERGED


def test_diagnose_consecutive_missing_run(tmp_path):
    assert run("diagnose", "consecutive", "--run", tmp_path / "nope") == cli.EXIT_USAGE


def test_diagnose_shift_writes_twelve_rows(tmp_path, capsys):
    assert run("diagnose", "shift", "--n", 200, "--hidden", "8", "--out", tmp_path) == cli.EXIT_OK
    rows = (tmp_path / "shift_curve.csv").read_text().splitlines()
    assert rows[0] == "r,accuracy,mean_maxprob,a_dis" and len(rows) == 13
    assert "rho_accuracy=" in capsys.readouterr().out
    assert run("diagnose", "shift", "--n", 200, "--out", tmp_path) == cli.EXIT_EXISTS
    assert run("diagnose", "shift", "--buckets", 0, "--out", tmp_path / "x") == cli.EXIT_USAGE


def test_ablate_single_arm(tmp_path, capsys):
    out = tmp_path / "abl"
    assert run("ablate", *SMALL, "--arms", "full", "--out", out) == cli.EXIT_OK
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "sel_t,sel_s,sel_enh,lab_enh,seed,accuracy" and len(rows) == 2
    assert rows[1].startswith("ours,ours,1,1,0,")
    assert run("ablate", *SMALL, "--arms", "best", "--out", out) == cli.EXIT_USAGE
    assert run("ablate", *SMALL, "--seeds", "x", "--out", out) == cli.EXIT_USAGE


def test_parse_seeds():
    assert cli.parse_seeds("0:3") == [0, 1, 2]
    assert cli.parse_seeds("4,7") == [4, 7]


@pytest.mark.parametrize("name", ["moons_da.json", "moons_ssda.json"])
def test_shipped_configs_load(name):
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / name
    prep = cli.Prepared(cli.load_experiment(str(path), []))
    assert prep.cfg.num_stages == 20 and prep.source.n == 500
    assert (prep.split is not None) == (prep.cfg.mode == "SSDA")
