import json
import subprocess
import sys

import pytest

from unirep.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, main
from unirep.config import load_config
from unirep.experiment import CHECKPOINT, MANIFEST, METRICS, TIMINGS, read_metrics, run_eval, run_training
from unirep.report import norm_table, report

CONFIG = """
[experiment]
name = tiny
steps = 30
batch_size = 8
eval_every = 10

[seeds]
model = 1
data = 2

[domain.a]
num_classes = 3
n_per_class = 10
seed = 1
geometry_seed = 1

[domain.b]
num_classes = 3
n_per_class = 10
mean_offset = 3
style = glyph
seed = 2
geometry_seed = 2
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(CONFIG)
    return path


def _summary(out):
    return [r for r in read_metrics(out / METRICS) if r["type"] == "summary"][-1]


def test_train_writes_run_files(config_file, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--output", str(out)]) == EXIT_OK
    for name in (METRICS, TIMINGS, MANIFEST, CHECKPOINT):
        assert (out / name).exists(), name
    records = read_metrics(out / METRICS)
    assert records[0]["type"] == "run"
    assert [r["step"] for r in records if r["type"] == "eval"] == [10, 20, 30]
    assert all("wall_clock" not in r for r in records)
    s = _summary(out)
    assert set(s["val_error"]) == {"a", "b"} and s["step"] == 30


def test_eval_reproduces_final_error(config_file, tmp_path):
    out = tmp_path / "run"
    run_training(load_config(config_file), out)
    rec = run_eval(load_config(config_file), out / CHECKPOINT)
    assert rec["val_error"] == _summary(out)["val_error"]


def test_rerun_from_manifest_is_identical(config_file, tmp_path):
    first, second = tmp_path / "one", tmp_path / "two"
    run_training(load_config(config_file), first)
    run_training(load_config(first / MANIFEST), second)
    assert (first / METRICS).read_text() == (second / METRICS).read_text()
    assert (first / CHECKPOINT).read_bytes() == (second / CHECKPOINT).read_bytes()


def test_resume_matches_uninterrupted(config_file, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run_training(load_config(config_file), full)
    stopped = run_training(load_config(config_file), part, stop_at=15)
    assert stopped.summary is None and stopped.step == 15
    resumed = run_training(load_config(config_file), part, resume=part / CHECKPOINT)
    a, b = _summary(full), resumed.summary
    for name in a["val_error"]:
        assert abs(a["val_error"][name] - b["val_error"][name]) <= 1e-6
    final_a = [r for r in read_metrics(full / METRICS) if r["type"] == "eval"][-1]
    final_b = [r for r in read_metrics(part / METRICS) if r["type"] == "eval"][-1]
    for d in final_a["train_loss"]:
        assert final_a["train_loss"][d] == pytest.approx(final_b["train_loss"][d], abs=1e-6)


def test_exit_codes(config_file, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(CONFIG.replace("batch_size = 8", "batch_size = 8\nnorm = IN\nmoment_scope = domain"))
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "moment" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == EXIT_IO
    junk = tmp_path / "junk.udrc"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--config", str(config_file), "--checkpoint", str(junk)]) == EXIT_IO
    hot = tmp_path / "hot.ini"
    hot.write_text(CONFIG.replace("[optimizer]", "").replace(
        "[seeds]", "[optimizer]\nwarmup_lr = 1e5\nbase_lr = 1e6\nfinal_lr = 1e5\n\n[seeds]"))
    assert main(["train", "--config", str(hot), "--output", str(tmp_path / "hot")]) == EXIT_DIVERGENCE
    assert any(r["type"] == "divergence" for r in read_metrics(tmp_path / "hot" / METRICS))


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--dtype", "float64"]) in (EXIT_OK, EXIT_CHECK)
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 10 and all(line.split()[0] in ("PASS", "FAIL") for line in lines)
    assert all(line.startswith("PASS") for line in lines)


def test_console_script_entry_point(config_file):
    proc = subprocess.run([sys.executable, "-m", "unirep.cli", "train", "--config", str(config_file) + ".nope"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_IO


def _fake_summary(path, kind, scale, moments, err, sharing="deep"):
    rec = {"type": "summary", "name": "x", "step": 1, "domains": ["a", "b"],
           "val_error": {"a": err, "b": err}, "mean_error": err,
           "norm": {"kind": kind, "scale_scope": scale, "moment_scope": moments},
           "sharing": sharing, "parameters": 1, "seed": 0, "config_hash": "h"}
    path.write_text(json.dumps(rec) + "\n")
    return path


def test_norm_report_rows(tmp_path):
    files = [
        _fake_summary(tmp_path / "1.jsonl", "BN", "domain", "domain", 10.0),
        _fake_summary(tmp_path / "2.jsonl", "BN", "domain", "domain", 20.0),
        _fake_summary(tmp_path / "3.jsonl", "IN", "universal", "none", 30.0),
    ]
    table = report(files, "norm").splitlines()
    rows = {tuple(line.split()[:3]): line.split()[3:] for line in table[2:]}
    assert rows[("BN", "domain", "domain")] == ["15.0", "2"]
    assert rows[("IN", "universal", "--")] == ["30.0", "1"]
    assert rows[("BN+", "universal", "--")] == ["--", "0"]
    assert len(table) == 2 + 6


def test_sharing_report(tmp_path, capsys):
    files = [_fake_summary(tmp_path / "1.jsonl", "BN", "domain", "domain", 4.0, "no sharing"),
             _fake_summary(tmp_path / "2.jsonl", "BN", "domain", "domain", 2.0, "deep")]
    assert main(["report", *map(str, files)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["sharing", "a", "b", "mean"]
    assert out[2].split() == ["no", "sharing", "4.0", "4.0", "4.0"]
    assert out[3].split() == ["deep", "2.0", "2.0", "2.0"]
    assert norm_table([]).count("--") >= 6
