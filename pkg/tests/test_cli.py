import hashlib
import json
import os

import pytest

from htc_clip.cli import main

TINY = ["--set", "d_h=16", "--set", "n_layers=1", "--set", "n_heads=2", "--set", "feedforward_dim=32",
        "--set", "max_len=12", "--set", "k=4", "--set", "max_epochs=3", "--set", "batch_size=32"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--parents", "2", "--children", "2", "--n-samples", "200", "--noise-tokens", "3",
                 "--seed", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--taxonomy", str(data / "taxonomy.tsv"), "--train", str(data / "train.jsonl"),
            "--val", str(data / "val.jsonl"), "--test", str(data / "test.jsonl"), "--out", str(out), *TINY]
    assert main(args) == 0
    return out


def test_gen_split_sizes(tmp_path):
    assert main(["gen", "--n-samples", "2500", "--out", str(tmp_path)]) == 0
    counts = {n: len((tmp_path / f"{n}.jsonl").read_text().splitlines()) for n in ("train", "val", "test")}
    assert counts == {"train": 2000, "val": 250, "test": 250}
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stats"]["num_labels"] == 16
    for path, sha in manifest["artifacts"].items():
        assert hashlib.sha256(open(path, "rb").read()).hexdigest() == sha


def test_gen_same_seed_same_digests(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--n-samples", "100", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    for f in ("taxonomy.tsv", "train.jsonl", "val.jsonl", "test.jsonl"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)


def test_gen_rejects_zero_samples(tmp_path, capsys):
    assert main(["gen", "--n-samples", "0", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_train_missing_taxonomy_is_input_error(tmp_path, data):
    assert main(["train", "--taxonomy", str(tmp_path / "nope.tsv"), "--train", str(data / "train.jsonl"),
                 "--val", str(data / "val.jsonl"), "--out", str(tmp_path)]) == 2


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"checkpoint.htc", "history.jsonl", "history.png", "manifest.json", "report_test.json"} <= names
    history = [json.loads(line) for line in (trained / "history.jsonl").read_text().splitlines()]
    assert len(history) == 3 and "val_macro_f1" in history[0]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["patience"] == 6 and manifest["seed"] == 7
    assert str(trained / "checkpoint.htc") in manifest["artifacts"]
    assert len(manifest["inputs"]) == 4


def test_train_non_finite_is_numeric_error(data, tmp_path):
    args = ["train", "--taxonomy", str(data / "taxonomy.tsv"), "--train", str(data / "train.jsonl"),
            "--val", str(data / "val.jsonl"), "--out", str(tmp_path), *TINY, "--set", "learning_rate=1e30"]
    assert main(args) == 3


def test_eval_writes_per_level_report(trained, data, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.htc"), "--test", str(data / "test.jsonl"),
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report_test.json").read_text())
    assert len(report["level_macro_f1"]) == 2
    assert (tmp_path / "report_test.png").exists() and (tmp_path / "manifest.json").exists()
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.htc"), "--test", str(data / "test.jsonl"),
                 "--threshold", "1.0", "--out", str(tmp_path / "t1")]) == 0
    assert json.loads((tmp_path / "t1" / "report_test.json").read_text())["micro_f1"] == 0.0


def test_eval_incompatible_taxonomy(trained, data, tmp_path):
    other = tmp_path / "other.tsv"
    other.write_text("Root\tX\tY\n", encoding="utf-8")
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.htc"), "--taxonomy", str(other),
                 "--test", str(data / "test.jsonl"), "--out", str(tmp_path)]) == 4
    bad = tmp_path / "bad.htc"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad), "--test", str(data / "test.jsonl"),
                 "--out", str(tmp_path)]) == 4


def test_predict(trained, tmp_path):
    ckpt = str(trained / "checkpoint.htc")
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["predict", "--checkpoint", ckpt, "--input", str(empty), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "predictions.jsonl").read_text() == ""
    lines = tmp_path / "in.txt"
    lines.write_text("sig_p0 sig_p0_c1 w1\nsig_p1 sig_p1_c0\n")
    assert main(["predict", "--checkpoint", ckpt, "--input", str(lines), "--threshold", "1.0",
                 "--out", str(tmp_path / "t")]) == 0
    recs = [json.loads(x) for x in (tmp_path / "t" / "predictions.jsonl").read_text().splitlines()]
    assert [r["labels"] for r in recs] == [[], []]
    assert all(len(r["probs"]) == 6 for r in recs)
    assert main(["predict", "--checkpoint", ckpt, "--input", str(lines), "--out", str(tmp_path / "a")]) == 0
    assert main(["predict", "--checkpoint", ckpt, "--input", str(lines), "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a" / "predictions.jsonl") == digest(tmp_path / "b" / "predictions.jsonl")


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["gradcheck", "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    b = json.loads((tmp_path / "b" / "gradcheck.json").read_text())
    assert a["max_rel_error"] == b["max_rel_error"] < 1e-4 and a["n_checked"] >= 200
    assert main(["gradcheck", "--eps", "0"]) == 2


def test_gradcheck_failure_exit_code(monkeypatch):
    from htc_clip import cli
    from htc_clip.training import GradCheckResult
    monkeypatch.setattr(cli, "model_grad_check", lambda *a, **k: GradCheckResult(1e-3, 200, {"x": 1e-3}))
    assert main(["gradcheck"]) == 3


def test_ablate_single_table(data, tmp_path):
    args = ["ablate", "--taxonomy", str(data / "taxonomy.tsv"), "--train", str(data / "train.jsonl"),
            "--val", str(data / "val.jsonl"), "--tables", "classifiers", "--seeds", "1",
            "--out", str(tmp_path), *TINY, "--set", "max_epochs=1"]
    assert main(args) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["variant"] for r in rows] == ["HTC-CLIP", "-r.m. h.c.", "-r.m. l.c.", "-r.m. hidden layers from h.c."]
    assert all(0 <= r["micro_f1"] <= 1 and 0 <= r["macro_f1"] <= 1 for r in rows)
    assert (tmp_path / "ablation.tsv").exists() and (tmp_path / "ablation.png").exists()


def test_thread_cap(monkeypatch, tmp_path):
    import torch
    before = torch.get_num_threads()
    monkeypatch.setenv("HTC_CLIP_THREADS", "1")
    assert main(["gen", "--n-samples", "10", "--out", str(tmp_path)]) == 0
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)


def test_bad_config_key_is_input_error(data, tmp_path):
    assert main(["train", "--taxonomy", str(data / "taxonomy.tsv"), "--train", str(data / "train.jsonl"),
                 "--val", str(data / "val.jsonl"), "--set", "bogus=1", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "htc_clip", "--help"], capture_output=True, text=True,
                         env={**os.environ, "HTC_CLIP_THREADS": "1"})
    assert res.returncode == 0 and "gradcheck" in res.stdout
