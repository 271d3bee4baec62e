import csv
import json

import pytest

from llpcs import cli

TINY = """
out = "{out}"
trials = 2
validation_fraction = 0.25

[data]
kind = "synthetic"
seed = 0
standardize = true
standardize_features = true
[data.synth]
dim = 4
n_source = 60
n_target = 64
n_test = 20
label_hidden = [8]

[bagging]
regime = "random"
ks = [4, 8]
seed = 0

[train]
methods = ["BL-WFA", "Bagged-Target"]
hidden = [8]
epochs = 1
[train.by_k.8]
bags_per_batch = 1

[grid]
lr = [0.001, 0.01]
lambda = [0.1, 1.0]
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(TINY.format(out=(tmp_path / "run").as_posix()))
    return path


def test_gen_synth_then_bag(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text("seed = 3\n[synth]\ndim = 3\nn_source = 10\nn_target = 12\nn_test = 4\nlabel_hidden = [4]\n")
    assert cli.main(["gen-synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "spec.json").read_text())["seed"] == 3
    assert (tmp_path / "d" / "target.schema.json").exists()
    rc = cli.main(["bag", "--data", str(tmp_path / "d" / "target.csv"), "--k", "5", "--out", str(tmp_path / "b.json")])
    assert rc == 0
    assert "2 bags (2 rows dropped)" in capsys.readouterr().out


def test_train_writes_results(config, tmp_path):
    assert cli.main(["train", "--config", str(config)]) == 0
    rows = list(csv.DictReader((tmp_path / "run" / "results.csv").open()))
    assert [(r["method"], r["k"]) for r in rows] == [("BL-WFA", "4"), ("Bagged-Target", "4"),
                                                     ("BL-WFA", "8"), ("Bagged-Target", "8")]
    summary = json.loads((tmp_path / "run" / "results.json").read_text())
    assert set(summary) == {"BL-WFA", "Bagged-Target"}


def test_multirun_is_byte_identical(config, tmp_path, capsys):
    assert cli.main(["multirun", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["multirun", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.splitlines()) == 1 + 2 * 2 * 2
    assert " ± " in capsys.readouterr().out


def test_seed_override_changes_results(config, tmp_path):
    cli.main(["train", "--config", str(config), "--out", str(tmp_path / "a")])
    cli.main(["train", "--config", str(config), "--out", str(tmp_path / "b"), "--seed-override", "9"])
    assert (tmp_path / "a" / "results.csv").read_text() != (tmp_path / "b" / "results.csv").read_text()


def test_sweep(config, tmp_path):
    assert cli.main(["sweep", "--config", str(config)]) == 0
    lines = (tmp_path / "run" / "sweep.csv").read_text().splitlines()
    # BL-WFA: 2 lr x 2 lambda, Bagged-Target: 2 lr; two bag sizes
    assert len(lines) == 1 + 2 * (4 + 2)
    best = json.loads((tmp_path / "run" / "sweep.json").read_text())
    assert set(best) == {"BL-WFA/k=4", "Bagged-Target/k=4", "BL-WFA/k=8", "Bagged-Target/k=8"}


def test_bound_check_lemma1(tmp_path, capsys):
    rc = cli.main(["bound-check", "lemma1", "--param", "trials=50", "--out", str(tmp_path)])
    assert rc == 0
    assert "violations: 0" in capsys.readouterr().out
    assert json.loads((tmp_path / "lemma1.json").read_text())["trials"] == 50


def test_bound_check_other_kinds(capsys):
    assert cli.main(["bound-check", "theorem1", "--param", "m=200", "--param", "resamples=200"]) == 0
    assert cli.main(["bound-check", "appendix-c", "--param", "k=4", "--param", "m=20000"]) == 0
    out = capsys.readouterr().out
    assert "theorem1: PASS" in out and "appendix-c: PASS" in out


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["bound-check", "nonsense"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "unknown bound kind" in err
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_config_values(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('out = "x"\n[bagging]\nk = 4\n[train]\nmethods = ["SVM"]\n')
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "unknown method" in capsys.readouterr().err


def test_missing_csv_paths(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('out = "x"\n[data]\nkind = "csv"\nsource = "s.csv"\n[bagging]\nk = 2\n')
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "'target'" in capsys.readouterr().err
