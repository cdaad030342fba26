import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from wildsplat.cli import effective_config, build_parser, run
from wildsplat.core import TrainConfig, load_checkpoint, save_config


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "d"
    assert run(["synth", "--seed", "5", "--out", str(root), "--views", "4", "--heldout", "2",
                "--resolution", "32"]) == 0
    return root


def test_coverage(capsys):
    code, out, _ = call(capsys, "analyze", "coverage", "--views", "20", "--target", "0.95")
    assert code == 0
    assert "M=190" in out and "exact_T=568" in out and "approx_T=570" in out


def test_coverage_default_targets(capsys):
    code, out, _ = call(capsys, "analyze", "coverage", "--views", "10")
    assert code == 0 and len(out.strip().splitlines()) == 5


def test_usage_error_exit_2(capsys):
    assert call(capsys, "frobnicate")[0] == 2
    assert call(capsys, "train", "--bogus")[0] == 2
    assert call(capsys)[0] == 2


def test_runtime_error_is_one_json_line(capsys, tmp_path):
    code, _, err = call(capsys, "eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path))
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    msg = json.loads(lines[0])
    assert set(msg) == {"error", "message"}


def test_bad_coverage_target(capsys):
    code, _, err = call(capsys, "analyze", "coverage", "--views", "20", "--target", "1.5")
    assert code == 1 and json.loads(err)["error"] == "ValueError"


def test_synth_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert call(capsys, "synth", "--seed", "7", "--out", str(tmp_path / name), "--views", "3", "--heldout", "1",
                    "--resolution", "32")[0] == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files and not sub.left_only


def test_config_precedence(tmp_path):
    path = tmp_path / "c.ini"
    save_config(TrainConfig(rho=0.2, k_geo=0.9, seed=3), path)
    args = build_parser().parse_args(["--config", str(path), "train", "--data", "x", "--out", "y", "--rho", "0.7",
                                      "--no-harmonize"])
    cfg = effective_config(args)
    assert cfg.rho == 0.7 and cfg.k_geo == 0.9 and cfg.seed == 3 and not cfg.harmonize
    args = build_parser().parse_args(["train", "--data", "x", "--out", "y", "--seed", "11", "--config", str(path)])
    assert effective_config(args).seed == 11


def test_every_field_has_a_flag():
    parser = build_parser()
    help_text = parser._subparsers._group_actions[0].choices["train"].format_help()
    for name in TrainConfig.__dataclass_fields__:
        if name in ("seed", "deterministic"):
            continue
        assert "--" + name.replace("_", "-") in help_text


def test_train_eval_render(data, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, err = call(capsys, "train", "--data", str(data), "--out", str(run_dir), "--iters", "12",
                          "--warmup-iters", "4", "--init-gaussians", "30", "--no-harmonize", "--seed", "2",
                          "--deterministic", "--checkpoint-every", "6")
    assert code == 0, err
    for rel in ("config.ini", "log.jsonl", "checkpoints/final.ckpt", "checkpoints/iter_000006.ckpt",
                "renders/004.png", "renders/005.png"):
        assert (run_dir / rel).exists(), rel
    assert len((run_dir / "log.jsonl").read_text().splitlines()) == 12
    ck = load_checkpoint(run_dir / "checkpoints" / "final.ckpt")
    assert ck.config["harmonize"] is False and ck.iteration == 12

    code, out, err = call(capsys, "eval", "--run", str(run_dir), "--data", str(data), "--dump-masks")
    assert code == 0, err
    report = json.loads((run_dir / "report.json").read_text())
    assert report["tag"] == "no-harmonize"
    assert "no-harmonize" in out
    assert len(report["views"]) == 2
    assert (run_dir / "masks" / "000_M.npy").exists() and (run_dir / "masks" / "003_sigma.npy").exists()
    M = np.load(run_dir / "masks" / "000_M.npy")
    assert M.shape == (32, 32) and (0 <= M).all() and (M <= 1).all()

    png = tmp_path / "r.png"
    code, _, err = call(capsys, "render", "--checkpoint", str(run_dir / "checkpoints" / "final.ckpt"),
                        "--data", str(data), "--view", "5", "--out", str(png))
    assert code == 0, err
    from PIL import Image

    assert Image.open(png).size == (32, 32)
    code, _, err = call(capsys, "render", "--checkpoint", str(run_dir / "checkpoints" / "final.ckpt"),
                        "--data", str(data), "--view", "99", "--out", str(png))
    assert code == 1 and "99" in json.loads(err)["message"]


def test_analyze_conflicts(data, tmp_path, capsys):
    logs = {}
    for label, extra in (("masked", []), ("unmasked", ["--no-mask"])):
        d = tmp_path / label
        assert call(capsys, "train", "--data", str(data), "--out", str(d), "--iters", "6", "--warmup-iters", "2",
                    "--init-gaussians", "30", *extra)[0] == 0
        logs[label] = d / "log.jsonl"
    code, out, err = call(capsys, "analyze", "conflicts", f"masked={logs['masked']}", f"unmasked={logs['unmasked']}",
                          "--csv", str(tmp_path / "plot.csv"))
    assert code == 0, err
    assert "masked" in out and "opacity" in out
    assert (tmp_path / "plot.csv").read_text().startswith("run,attribute,conflict_probability")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wildsplat", "analyze", "coverage", "--views", "20",
                           "--target", "0.95"], capture_output=True, text=True)
    assert proc.returncode == 0 and "exact_T=568" in proc.stdout
