import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cvattn.cli import main
from cvattn.data import load_image, load_mask, save_image, save_mask
from cvattn.distance_transform import DtParams, dt_kernel, exact_edt
from cvattn.metrics import metric_dice
from cvattn.serialization import load_tnsr


def disk(n=64, r=12.0):
    yy, xx = np.mgrid[0:n, 0:n]
    return (np.hypot(yy - 31.5, xx - 31.5) <= r).astype(np.float64)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth", "--n-samples", 6, "--seed", 3, "--out-dir", root) == 0
    return root


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    assert run("synth", "--n-samples", 1, "--out-dir", root / "data") == 0
    m = root / "data" / "manifest.csv"
    args = ["train", "--train-manifest", m, "--val-manifest", m, "--depth", 2, "--epochs", 250,
            "--batch-size", 1, "--augment", "none", "--checkpoint-epochs", "250", "--out-dir", root / "run"]
    assert run(*args) == 0
    return root


# --- segment ----------------------------------------------------------------------


def test_segment_disk(tmp_path):
    save_image(disk(), tmp_path / "disk.png")
    save_mask(disk(), tmp_path / "disk_mask.png")
    assert run("segment", "--image", tmp_path / "disk.png", "--out-dir", tmp_path / "o") == 0
    mask = load_mask(tmp_path / "o" / "mask.png")
    assert metric_dice(mask, load_mask(tmp_path / "disk_mask.png")) >= 0.99
    rows = (tmp_path / "o" / "energy.csv").read_text().splitlines()
    assert rows[0] == "iter,energy" and len(rows) == 1 + 201
    assert load_tnsr(tmp_path / "o" / "phi.tnsr").shape == (64, 64)


def test_segment_dt_zero_keeps_initial_circle(tmp_path):
    save_image(disk(), tmp_path / "disk.png")
    assert run("segment", "--image", tmp_path / "disk.png", "--dt", 0, "--iters", 5,
               "--init-circle", "20,30,9", "--out-dir", tmp_path) == 0
    yy, xx = np.mgrid[0:64, 0:64]
    assert np.array_equal(load_mask(tmp_path / "mask.png"), (np.hypot(yy - 30, xx - 20) < 9).astype(np.uint8))


def test_segment_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.png"
    assert run("segment", "--image", missing, "--out-dir", tmp_path) == 2
    assert str(missing) in capsys.readouterr().err


def test_segment_bad_image_is_runtime_error(tmp_path, capsys):
    (tmp_path / "bad.png").write_bytes(b"garbage")
    assert run("segment", "--image", tmp_path / "bad.png", "--out-dir", tmp_path) == 2
    assert "bad.png" in capsys.readouterr().err


# --- dt ---------------------------------------------------------------------------


def test_dt_single_pixel(tmp_path):
    a = np.zeros((21, 21))
    a[10, 7] = 1.0
    save_image(a, tmp_path / "px.png")
    assert run("dt", "--image", tmp_path / "px.png", "--lambda", 0.25, "--out-dir", tmp_path) == 0
    beta = load_tnsr(tmp_path / "beta.tnsr")
    R = DtParams(0.25).kernel_radius
    yy, xx = np.mgrid[0:21, 0:21]
    inside = (np.abs(yy - 10) <= R) & (np.abs(xx - 7) <= R)
    d = exact_edt(a)
    # the 1e-20 floor inside the log biases beta by lambda * 1e-20 / exp(-d / lambda)
    bound = 0.25 * 1e-20 * np.exp(d / 0.25) + 1e-12
    assert np.all(np.abs(beta - d)[inside] <= bound[inside])
    side = json.loads((tmp_path / "beta.json").read_text())
    assert set(side) == {"beta.png"} and (tmp_path / "beta.png").exists()


def test_dt_all_white(tmp_path):
    save_image(np.ones((24, 24)), tmp_path / "w.png")
    assert run("dt", "--image", tmp_path / "w.png", "--out-dir", tmp_path) == 0
    beta = load_tnsr(tmp_path / "beta.tnsr")
    R = DtParams(0.5).kernel_radius
    expected = -0.5 * np.log(dt_kernel(DtParams(0.5)).sum())
    assert np.allclose(beta[R:-R, R:-R], expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("lam", ["0", "-1"])
def test_dt_rejects_nonpositive_lambda(tmp_path, lam):
    save_image(np.ones((4, 4)), tmp_path / "w.png")
    assert run("dt", "--image", tmp_path / "w.png", "--lambda", lam, "--out-dir", tmp_path) == 1


# --- synth / train / eval / attn-dump -------------------------------------------------


def test_synth_layout(dataset):
    for name in ("manifest.csv", "manifest_train.csv", "manifest_val.csv", "manifest_test.csv",
                 "synth_config.json", "resolved_config.json", "images/0000.png", "masks/0005.png", "confounders/0000.png"):
        assert (dataset / name).exists(), name


def test_synth_is_byte_reproducible(tmp_path, dataset):
    assert run("synth", "--config", dataset / "resolved_config.json", "--out-dir", tmp_path) == 0
    for f in ("manifest.csv", "images/0003.png", "masks/0003.png", "synth_config.json"):
        assert (tmp_path / f).read_bytes() == (dataset / f).read_bytes()


def test_eval_overfit_checkpoint(overfit, tmp_path, capsys):
    ck = overfit / "run" / "epoch_250.ckpt"
    assert run("eval", "--checkpoint", ck, "--manifest", overfit / "data" / "manifest.csv", "--out-dir", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "eval.csv").open()))
    assert rows[0] == ["sample", "dice", "iou", "hausdorff_mm", "fpr", "fnr"]
    assert float(rows[1][1]) >= 0.99
    assert "dice" in capsys.readouterr().out


def test_train_outputs_and_resolved_config(tmp_path, dataset):
    out = tmp_path / "run"
    args = ["train", "--data", dataset, "--train-manifest", dataset / "manifest.csv", "--gate-mode", "chanvese",
            "--depth", 2, "--base-channels", 4, "--K", 2, "--epochs", 2, "--batch-size", 3,
            "--checkpoint-epochs", "1,2", "--gate-mu", 0.2, "--dt-lambda", 0.25, "--out-dir", out]
    assert run(*args) == 0
    cfg = json.loads((out / "resolved_config.json").read_text())["config"]
    assert cfg["model"]["gate"]["K"] == 2 and cfg["model"]["gate"]["cv"]["iters"] == 2
    assert cfg["model"]["gate"]["cv"]["mu"] == 0.2 and cfg["model"]["gate"]["dt"]["lambda_dt"] == 0.25
    assert (out / "history.csv").exists() and (out / "eval_val.csv").exists()
    assert (out / "epoch_001.ckpt").exists() and (out / "epoch_002.ckpt").exists()

    # replaying the resolved config reproduces the run
    again = tmp_path / "again"
    assert run("train", "--config", out / "resolved_config.json", "--out-dir", again) == 0
    strip = lambda p: [r[:-1] for r in csv.reader(p.open())]  # drop the wall-clock column
    assert strip(out / "history.csv") == strip(again / "history.csv")
    assert (out / "eval_val.csv").read_bytes() == (again / "eval_val.csv").read_bytes()
    assert (out / "epoch_002.ckpt").read_bytes() == (again / "epoch_002.ckpt").read_bytes()

    dump = tmp_path / "dump"
    cks = [a for e in (1, 2) for a in ("--checkpoint", out / f"epoch_{e:03d}.ckpt")]
    assert run("attn-dump", *cks, "--manifest", dataset / "manifest_val.csv", "--samples", 1, "--out-dir", dump) == 0
    for e in (1, 2):
        for key in ("alpha", "beta", "gamma", "zeta"):
            assert (dump / f"epoch_{e:03d}_s000_gate0_{key}.png").exists()
    side = json.loads((dump / "heatmaps.json").read_text())
    assert all(v["min"] <= v["max"] for v in side.values())
    stats = list(csv.DictReader((dump / "attn_stats.csv").open()))
    assert {r["map"] for r in stats} == {"alpha", "beta", "gamma", "zeta"}


def test_attn_dump_classic_writes_alpha(tmp_path, dataset):
    out = tmp_path / "run"
    assert run("train", "--data", dataset, "--gate-mode", "classic", "--depth", 1, "--base-channels", 2,
               "--epochs", 1, "--out-dir", out) == 0
    dump = tmp_path / "dump"
    assert run("attn-dump", "--checkpoint", out / "epoch_001.ckpt", "--manifest", dataset / "manifest_val.csv",
               "--out-dir", dump) == 0
    names = {p.name for p in dump.iterdir()}
    assert "epoch_001_s000_gate0_alpha.png" in names and not any("zeta" in n for n in names)


def test_attn_dump_rejects_gateless(tmp_path, overfit):
    ck = overfit / "run" / "epoch_250.ckpt"
    assert run("attn-dump", "--checkpoint", ck, "--manifest", overfit / "data" / "manifest.csv", "--out-dir", tmp_path) == 2


# --- gradcheck / usage ------------------------------------------------------------------


def test_gradcheck_ops(tmp_path, capsys):
    assert run("gradcheck", "--suite", "ops", "--out-dir", tmp_path) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)
    assert all(float(l.split("max_rel_err=")[1].split()[0]) <= 1e-6 for l in lines)


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["segment"],
    ["gradcheck", "--suite", "everything"],
    ["segment", "--image", "x.png", "--init-circle", "1,2"],
    ["train", "--epochs", "3"],
    ["train", "--data", "d", "--augment", "spin"],
    ["segment", "--image", "x.png", "--mu", "-1"],
    ["dt", "--image", "x.png", "--config", "missing.json"],
])
def test_usage_errors_exit_1(tmp_path, argv):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 1


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"cv": {"mu": 0.3, "iters": 2}}))
    save_image(disk(16, 4.0), tmp_path / "d.png")
    assert run("segment", "--image", tmp_path / "d.png", "--config", tmp_path / "c.json", "--iters", 3,
               "--out-dir", tmp_path) == 0
    cv = json.loads((tmp_path / "resolved_config.json").read_text())["config"]["cv"]
    assert cv["mu"] == 0.3 and cv["iters"] == 3


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "cvattn.cli", "gradcheck", "--suite", "dt", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "PASS" in res.stdout
