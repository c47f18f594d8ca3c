import csv
import subprocess
import sys

import numpy as np
import pytest

from dsa3d.cli import main
from dsa3d.config import parse_config_text

SMALL_CFG = """\
[run]
seed = 5
task = ad-mci-nc
folds = 3

[phantom]
grid = 16
target_per_class = 6
source_per_class = 2
center_jitter = 0.5
outer_radius = 5.5, 6.0, 6.5
outer_std = 0.2
shell_thickness = 0.8, 1.2, 1.6
shell_std = 0.08
cavity_radius = 2.75, 2.1, 1.5
cavity_std = 0.12

[cae]
maps = 2, 3, 4
epochs = 1

[network]
maps = 2, 3, 4
fc = 8, 6
epochs = 3

[embed]
perplexity = 3
iterations = 60
"""


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL_CFG)
    return p


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _run_dir(cfg_file, out, **kw):
    cfg = parse_config_text(cfg_file.read_text()).with_overrides(output_dir=str(out), **kw)
    return cfg.run_dir()


def test_help_and_missing_command(capsys):
    code, stdout, _ = _run(capsys, "--help")
    assert code == 0 and "crossval" in stdout
    code, _, err = _run(capsys)
    assert code == 1 and "kind=usage" in err


def test_usage_errors_exit_one(capsys, cfg_file, tmp_path):
    code, _, err = _run(capsys, "pretrain", cfg_file, "--seed", "abc")
    assert code == 1 and err.startswith("dsa3d: status=error code=1 kind=usage")
    code, _, err = _run(capsys, "frobnicate")
    assert code == 1


def test_config_errors_exit_one(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nseed = 1\ntask = ad-nc\nfolds = ten\n")
    code, _, err = _run(capsys, "gen-phantom", bad)
    assert code == 1 and "kind=config" in err and "bad.cfg:4:" in err
    code, _, err = _run(capsys, "gen-phantom", tmp_path / "absent.cfg")
    assert code == 1 and "kind=config" in err
    code, _, err = _run(capsys, "gen-phantom", "--task", "ad-vs-all", "--out", tmp_path)
    assert code == 1 and "unknown task" in err


def test_runtime_errors_exit_two(capsys, cfg_file, tmp_path):
    # grid too small for the configured phantom geometry
    text = SMALL_CFG.replace("grid = 16", "grid = 8")
    p = tmp_path / "tiny.cfg"
    p.write_text(text)
    code, _, err = _run(capsys, "gen-phantom", p, "--out", tmp_path / "o")
    assert code == 2 and "status=error code=2" in err


def test_corrupt_artifact_is_a_runtime_error(capsys, cfg_file, tmp_path):
    out = tmp_path / "o"
    assert _run(capsys, "gen-phantom", cfg_file, "--out", out)[0] == 0
    (_run_dir(cfg_file, out) / "stack.caes").write_bytes(b"nonsense")
    code, _, err = _run(capsys, "pretrain", cfg_file, "--out", out)
    assert code == 2 and "code=2" in err


def test_stagewise_commands(capsys, cfg_file, tmp_path):
    out = tmp_path / "o"
    d = _run_dir(cfg_file, out)

    code, stdout, _ = _run(capsys, "gen-phantom", cfg_file, "--out", out)
    assert code == 0 and "status=ok command=gen-phantom" in stdout and "target=18" in stdout
    assert len(list((d / "target").glob("*.vol"))) == 18
    assert (d / "config.cfg").read_text().startswith("[run]")

    assert _run(capsys, "pretrain", cfg_file, "--out", out)[0] == 0
    rows = list(csv.DictReader(open(d / "pretrain.csv")))
    assert [r["output_shape"] for r in rows] == ["2x8x8x8", "3x4x4x4", "4x2x2x2"]

    assert _run(capsys, "transfer", cfg_file, "--out", out)[0] == 0
    assert (d / "ad-mci-nc" / "init.dsa1").exists()

    code, stdout, _ = _run(capsys, "finetune", cfg_file, "--out", out)
    assert code == 0 and "train_ACC=" in stdout
    assert len(list(csv.DictReader(open(d / "ad-mci-nc" / "finetune.csv")))) == 3

    code, stdout, _ = _run(capsys, "crossval", cfg_file, "--out", out)
    assert code == 0 and "ACC=" in stdout
    rows = list(csv.reader(open(d / "ad-mci-nc" / "metrics.csv")))
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "mean", "std"]
    oof = list(csv.DictReader(open(d / "ad-mci-nc" / "oof.csv")))
    assert len(oof) == 18
    assert all(abs(sum(float(r[f"p_{n}"]) for n in ("AD", "MCI", "NC")) - 1) < 1e-9 for r in oof)

    code, stdout, _ = _run(capsys, "roc", cfg_file, "--out", out)
    assert code == 0 and stdout.count("AUC[") == 3
    assert (d / "ad-mci-nc" / "roc.svg").exists() and (d / "ad-mci-nc" / "roc_MCI.csv").exists()

    code, stdout, _ = _run(capsys, "embed", cfg_file, "--out", out)
    assert code == 0 and "points=18" in stdout
    emb = list(csv.DictReader(open(d / "ad-mci-nc" / "embedding.csv")))
    assert len(emb) == 18 and all(np.isfinite(float(r["x"])) for r in emb)
    assert (d / "ad-mci-nc" / "embedding.svg").exists()


def test_binary_task_and_task_override(capsys, cfg_file, tmp_path):
    out = tmp_path / "o"
    code, stdout, _ = _run(capsys, "roc", cfg_file, "--out", out, "--task", "ad-nc")
    assert code == 0 and stdout.count("AUC[") == 1
    d = _run_dir(cfg_file, out) / "ad-nc"
    assert (d / "roc.csv").exists() and (d / "roc.svg").exists()
    assert len(list(csv.DictReader(open(d / "oof.csv")))) == 12


def test_eval_covers_every_task(capsys, cfg_file, tmp_path):
    out = tmp_path / "o"
    code, stdout, _ = _run(capsys, "eval", cfg_file, "--out", out)
    assert code == 0 and "tasks=5" in stdout
    d = _run_dir(cfg_file, out)
    rows = list(csv.DictReader(open(d / "summary.csv")))
    assert [r["task"] for r in rows] == ["ad-mci-nc", "admci-nc", "ad-nc", "ad-mci", "mci-nc"]
    for r in rows:
        assert (d / r["task"] / "metrics.csv").exists()
    for t in ("admci-nc", "ad-nc", "ad-mci", "mci-nc"):
        assert (d / t / "roc.svg").exists()


def test_fresh_runs_are_byte_identical(capsys, cfg_file, tmp_path):
    for name in ("a", "b"):
        assert _run(capsys, "crossval", cfg_file, "--out", tmp_path / name, "--threads", "1")[0] == 0
    da, db = (_run_dir(cfg_file, tmp_path / n) for n in ("a", "b"))
    for rel in ("pretrain.csv", "ad-mci-nc/metrics.csv", "ad-mci-nc/oof.csv", "target.csv"):
        assert (da / rel).read_bytes() == (db / rel).read_bytes(), rel


def test_seed_override_changes_run_dir(capsys, cfg_file, tmp_path):
    out = tmp_path / "o"
    _run(capsys, "gen-phantom", cfg_file, "--out", out)
    _run(capsys, "gen-phantom", cfg_file, "--out", out, "--seed", "6")
    assert len([p for p in out.iterdir() if p.is_dir()]) == 2


def test_module_entry_point(cfg_file, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dsa3d", "gen-phantom", str(cfg_file),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("status=ok")
