import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from rlmildat import cli
from rlmildat.data import load_dataset
from rlmildat.trainer import read_history

TRAIN_FLAGS = ["--epochs", "3", "--early-stopping-patience", "3", "--encoder-hidden", "12", "--hdim", "8",
               "--hp", "8", "--bag-size", "3", "--pool-size", "4", "--batch-size", "4",
               "--lr-task", "0.1", "--lr-actor", "0.1", "--lr-encoder", "0.1", "--lr-domain", "0.1"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds") / "synth.rmdb"
    assert cli.main(["synth", "--speakers", "80", "--dim", "8", "--pool-size", "4", "--seed", "5",
                     "--out", str(path)]) == 0
    return path


def test_synth_deterministic(tmp_path, capsys):
    args = ["synth", "--languages", "2", "--speakers", "200", "--dim", "16", "--seed", "7"]
    assert cli.main(args + ["--out", str(tmp_path / "a.rmdb")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.rmdb")]) == 0
    assert _sha(tmp_path / "a.rmdb") == _sha(tmp_path / "b.rmdb")
    out = capsys.readouterr().out
    assert "validation:" in out and "languages=" in out


def test_synth_default_honours_pool_size(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "d.rmdb")]) == 0
    ds = load_dataset(tmp_path / "d.rmdb")
    assert len(ds.validation) >= 10 and len(ds.test) >= 10


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["synth", "--informative-frac", "0", "--out", str(tmp_path / "x.rmdb")]) == 3
    assert cli.main(["synth", "--out", str(tmp_path / "no" / "such" / "dir" / "x.rmdb")]) == 2
    assert cli.main(["train", "--dataset", str(tmp_path / "missing.rmdb"), "--out-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 3


def _write_utterances(path, n_speakers, rng, drop_column=None):
    cols = ["speaker_id", "text", "age", "gender", "lang_code"]
    words = ["hola", "hello", "bonjour", "merci", "thanks", "gracias", "yes", "no", "maybe"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([c for c in cols if c != drop_column])
        for s in range(n_speakers):
            age = int(rng.integers(14, 70))
            gender = ["female", "male"][s % 2]
            for _ in range(int(rng.integers(2, 5))):
                row = [f"spk{s}", " ".join(rng.choice(words, 4)), age, gender, ["en", "es"][int(rng.integers(2))]]
                w.writerow([v for c, v in zip(cols, row) if c != drop_column])


def test_prepare_split_sizes(tmp_path, capsys):
    src = tmp_path / "utt.csv"
    _write_utterances(src, 93, np.random.default_rng(0))
    out = tmp_path / "p.rmdb"
    assert cli.main(["prepare", "--input", str(src), "--ratios", "0.7,0.15,0.15", "--hash-dim", "16",
                     "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert (len(ds.train), len(ds.validation), len(ds.test)) == (65, 14, 14)
    assert ds.d == 16 and ds.num_languages == 2


def test_prepare_missing_column(tmp_path, capsys):
    src = tmp_path / "utt.csv"
    _write_utterances(src, 20, np.random.default_rng(0), drop_column="gender")
    assert cli.main(["prepare", "--input", str(src), "--hash-dim", "8", "--out", str(tmp_path / "p.rmdb")]) == 3
    assert "gender" in capsys.readouterr().err


def test_prepare_pool_size_violation(tmp_path, capsys):
    src = tmp_path / "utt.csv"
    _write_utterances(src, 30, np.random.default_rng(1))
    assert cli.main(["prepare", "--input", str(src), "--hash-dim", "8", "--out", str(tmp_path / "p.rmdb")]) == 3
    assert "pool" in capsys.readouterr().err.lower()


def test_train_writes_artifacts_and_is_deterministic(dataset, tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["train", "--dataset", str(dataset), "--framework", "rlmil_dat", "--seed", "1",
                         "--out-dir", str(tmp_path / name)] + TRAIN_FLAGS) == 0
    out = capsys.readouterr().out
    assert out.count("macro-F1 train=") == 2
    for f in ("checkpoint.rmck", "history.csv", "config.txt", "results.csv", "manifest.json"):
        assert (tmp_path / "a" / f).exists(), f
    for f in ("checkpoint.rmck", "history.csv", "results.csv", "config.txt"):
        assert _sha(tmp_path / "a" / f) == _sha(tmp_path / "b" / f), f
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["dataset_sha256"] == _sha(dataset) and manifest["seed"] == 1
    assert manifest["config"]["framework"] == "rlmil_dat"


def test_train_degeneration_through_cli(dataset, tmp_path):
    cli.main(["train", "--dataset", str(dataset), "--framework", "rlmil", "--out-dir", str(tmp_path / "r")]
             + TRAIN_FLAGS)
    cli.main(["train", "--dataset", str(dataset), "--framework", "rlmil_dat", "--grl-lambda", "0",
              "--out-dir", str(tmp_path / "d")] + TRAIN_FLAGS)
    a, b = read_history(tmp_path / "r" / "history.csv"), read_history(tmp_path / "d" / "history.csv")
    for k in ("l_task", "l_p", "l_reg", "val_macro_f1"):
        assert [r[k] for r in a] == [r[k] for r in b]


def test_config_file_and_set_override(dataset, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("pooling=max\nepochs=2\nearly_stopping_patience=2\n")
    assert cli.main(["train", "--dataset", str(dataset), "--framework", "mil", "--config", str(conf),
                     "--set", "hdim=6", "--encoder-hidden", "10", "--out-dir", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "config.txt").read_text()
    assert "pooling=max" in text and "hdim=6" in text and "encoder_hidden=10" in text
    assert cli.main(["train", "--dataset", str(dataset), "--set", "nonsense=1", "--out-dir", str(tmp_path / "p")]) == 3


def test_evaluate_checks_dataset_hash(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--dataset", str(dataset), "--framework", "mil", "--out-dir", str(run)] + TRAIN_FLAGS)
    ckpt = str(run / "checkpoint.rmck")
    capsys.readouterr()
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--dataset", str(dataset)]) == 0
    first = capsys.readouterr().out
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--dataset", str(dataset),
                     "--results", str(tmp_path / "r.csv")]) == 0
    assert capsys.readouterr().out == first
    other = tmp_path / "other.rmdb"
    cli.main(["synth", "--speakers", "80", "--dim", "8", "--pool-size", "4", "--seed", "6", "--out", str(other)])
    assert cli.main(["evaluate", "--checkpoint", ckpt, "--dataset", str(other)]) == 3
    assert "does not match" in capsys.readouterr().err


def _results_file(path, frameworks, seeds):
    rng = np.random.default_rng(len(frameworks) + len(seeds))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["encoder", "pooling", "label", "framework", "seed", "split", "macro_f1", "accuracy"])
        for fw in frameworks:
            for s in seeds:
                v = float(rng.uniform(0.3, 0.7))
                w.writerow(["enc", "mean", "gender", fw, s, "test", v, v])


def test_compare_outputs(tmp_path, capsys):
    res = tmp_path / "res.csv"
    _results_file(res, ["mil", "rlmil", "rlmil_dat"], range(5))
    assert cli.main(["compare", "--results", str(res), "--out", str(tmp_path / "cmp")]) == 0
    header = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()[0]
    assert header == ("encoder,pooling,label,mil,rlmil,rlmil_dat,delta_mil,ci95_mil,p_mil,"
                      "delta_rlmil,ci95_rlmil,p_rlmil,n_seeds")
    for f in ("comparison.txt", "plots/bar.csv", "plots/box.csv", "manifest.json"):
        assert (tmp_path / "cmp" / f).exists()


def test_compare_ragged_grid_exits_3(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _results_file(a, ["mil"], range(3))
    _results_file(b, ["rlmil_dat"], range(2))
    assert cli.main(["compare", "--results", str(a), str(b), "--out", str(tmp_path / "c")]) == 3
    assert "rlmil_dat seed 2" in capsys.readouterr().err


def _space(tmp_path, body):
    p = tmp_path / "space.json"
    p.write_text(json.dumps(body))
    return p


def test_sweep_single_trial(dataset, tmp_path, capsys):
    space = _space(tmp_path, {"lr_task": {"low": 0.01, "high": 0.3, "scale": "log"}, "hdim": {"values": [4, 8]}})
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--dataset", str(dataset), "--framework", "mil", "--trials", "1",
                     "--search-space", str(space), "--out-dir", str(out)] + TRAIN_FLAGS) == 0
    with open(out / "trials.csv") as f:
        trials = list(csv.DictReader(f))
    best = json.loads((out / "best.json").read_text())
    assert len(trials) == 1 and best["trial"] == 0
    assert best["val_macro_f1"] == float(trials[0]["val_macro_f1"])
    assert (out / "trial_000" / "manifest.json").exists() and (out / "manifest.json").exists()


def test_sweep_sequence_and_best(dataset, tmp_path):
    space = _space(tmp_path, {"lr_task": {"low": 0.01, "high": 0.3, "scale": "log"},
                              "pooling": {"values": ["mean", "max"]}})
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["sweep", "--dataset", str(dataset), "--framework", "mil", "--trials", "3", "--seed", "4",
                         "--search-space", str(space), "--out-dir", str(out)] + TRAIN_FLAGS) == 0
        logs.append((out / "trials.csv").read_text())
    assert logs[0] == logs[1]
    rows = list(csv.DictReader(logs[0].splitlines()))
    best = json.loads((tmp_path / "a" / "best.json").read_text())
    assert best["val_macro_f1"] == max(float(r["val_macro_f1"]) for r in rows)


def test_sweep_bad_space(dataset, tmp_path):
    for body in ({}, {"framework": {"values": ["mil"]}}, {"lr_task": {"low": 0.0, "high": 1.0, "scale": "log"}}):
        assert cli.main(["sweep", "--dataset", str(dataset), "--trials", "1",
                         "--search-space", str(_space(tmp_path, body)), "--out-dir", str(tmp_path / "x")]) == 3


def test_sweep_workers_env(monkeypatch):
    monkeypatch.setenv("RLMILDAT_THREADS", "3")
    assert cli.sweep_workers(10) == 3 and cli.sweep_workers(2) == 2
    monkeypatch.setenv("RLMILDAT_THREADS", "x")
    with pytest.raises(Exception):
        cli.sweep_workers(2)


def test_numeric_failure_exits_4(dataset, tmp_path, capsys):
    rc = cli.main(["train", "--dataset", str(dataset), "--framework", "mil", "--lr-task", "1e6",
                   "--lr-encoder", "1e6", "--epochs", "5", "--early-stopping-patience", "5",
                   "--out-dir", str(tmp_path / "n")])
    assert rc == 4
    err = capsys.readouterr().err
    assert "loss trace:" in err and (tmp_path / "n" / "loss_trace.csv").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rlmildat.cli", "synth", "--informative-frac", "0",
                           "--out", str(tmp_path / "x.rmdb")], capture_output=True, text=True)
    assert proc.returncode == 3
