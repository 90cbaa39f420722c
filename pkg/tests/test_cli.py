import csv
import json

import numpy as np
import pytest
from PIL import Image

from cgpdnet.cli import main
from cgpdnet.data import PSNR_SENTINEL
from cgpdnet.kspace import load_mask, make_mask
from cgpdnet.training import load_checkpoint

TOY = ["--p", "4", "--k", "1", "--n-s", "3", "--count", "6", "--size", "16", "--ratios", "0.3", "--lr", "1e-3"]


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# mask

def test_mask_single(tmp_path):
    assert run("mask", "--family", "cartesian", "--alpha", "0.1", "--size", "64", "--seed", "3", "--out", tmp_path) == 0
    back = load_mask(tmp_path / "cartesian_0.1")
    assert np.array_equal(back.pattern, make_mask(64, 64, 0.1, "cartesian", 3).pattern)
    first = (tmp_path / "cartesian_0.1.png").read_bytes()
    assert run("mask", "--family", "cartesian", "--alpha", "0.1", "--size", "64", "--seed", "3", "--out", tmp_path) == 0
    assert (tmp_path / "cartesian_0.1.png").read_bytes() == first


def test_mask_list(tmp_path):
    assert run("mask", "--family", "random2d", "--alpha", "0.1,0.2,0.3", "--size", "32", "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.png"))) == 3
    assert len(list(tmp_path.glob("*.json"))) == 3


@pytest.mark.parametrize("alpha", ["0", "1.5", "abc"])
def test_mask_bad_alpha_is_usage_error(tmp_path, alpha):
    with pytest.raises(SystemExit) as exc:
        run("mask", "--family", "cartesian", "--alpha", alpha, "--out", tmp_path)
    assert exc.value.code == 2


def test_mask_bad_family_and_size(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("mask", "--family", "spiral", "--alpha", "0.1", "--out", tmp_path)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("mask", "--family", "cartesian", "--alpha", "0.1", "--size", "63", "--out", tmp_path)
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# train

def read_history(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_outputs_and_resume(tmp_path):
    assert run("train", "--out", tmp_path / "a", "--epochs", 2, *TOY) == 0
    rows = read_history(tmp_path / "a" / "history.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    resolved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert resolved["p"] == 4 and resolved["epochs"] == 2 and resolved["ratios"] == [0.3]
    _, cfg, manifest = load_checkpoint(tmp_path / "a" / "checkpoint")
    assert manifest["epoch"] == 2 and cfg.n_s == 3

    assert run("train", "--out", tmp_path / "b", "--resume", tmp_path / "a" / "checkpoint", "--epochs", 1) == 0
    rows = read_history(tmp_path / "b" / "history.csv")
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert load_checkpoint(tmp_path / "b" / "checkpoint")[2]["epoch"] == 3


def test_train_reproducible(tmp_path):
    for name in "ab":
        assert run("train", "--out", tmp_path / name, "--epochs", 1, "--seed", 5, *TOY) == 0
    assert (tmp_path / "a" / "history.csv").read_text() == (tmp_path / "b" / "history.csv").read_text()
    for blob in (tmp_path / "a" / "checkpoint").glob("*.f32"):
        assert blob.read_bytes() == (tmp_path / "b" / "checkpoint" / blob.name).read_bytes()


def test_train_config_file_and_override(tmp_path):
    cfg = {"p": 4, "k": 1, "n_s": 3, "epochs": 1, "count": 6, "size": 16, "ratios": [0.3], "lr": 1e-3}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path / "o", "--lr", "5e-4") == 0
    resolved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert resolved["lr"] == 5e-4 and resolved["size"] == [16, 16]


def test_train_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"p": 4, "learning_rate": 1e-3}))
    assert run("train", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_missing_file_source(tmp_path):
    assert run("train", "--out", tmp_path / "o", "--source", "files", "--data", tmp_path / "nope", *TOY[:6]) == 1
    assert run("train", "--out", tmp_path / "o", "--source", "files", *TOY[:6]) == 1


def test_resume_architecture_conflict(tmp_path):
    assert run("train", "--out", tmp_path / "a", "--epochs", 1, *TOY) == 0
    assert run("train", "--out", tmp_path / "b", "--resume", tmp_path / "a" / "checkpoint", "--p", 8) == 1


def test_train_with_image_files(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(5):
        Image.fromarray((rng.random((16, 16)) * 255).astype(np.uint8)).save(d / f"{i}.png")
    assert run("train", "--out", tmp_path / "o", "--source", "files", "--data", d, "--epochs", 1, *TOY[:6]) == 0


# ---------------------------------------------------------------------------
# recon

@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert run("train", "--out", out, "--epochs", 1, *TOY) == 0
    return out / "checkpoint"


def test_recon_zerofill_full_mask_sentinel(tmp_path):
    assert run("recon", "--method", "zerofill", "--alpha", "1.0", "--count", 2, "--size", 32, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert report["m_psnr"] == PSNR_SENTINEL
    assert all(r["psnr"] == PSNR_SENTINEL for r in report["images"])
    assert len(list(tmp_path.glob("*_zerofill.png"))) == 2


def test_recon_trace(tmp_path, checkpoint):
    assert run("recon", "--checkpoint", checkpoint, "--alpha", "0.25", "--trace", "--count", 1, "--size", 16,
               "--out", tmp_path) == 0
    trace = json.loads((tmp_path / "trace" / "img000" / "trace.json").read_text())
    assert len(trace["stages"]) == 3
    assert [s["role"] for s in trace["stages"]] == ["", "mid", "final"]
    assert len(list((tmp_path / "trace" / "img000").glob("stage_*.png"))) == 3


def test_recon_noise_lowers_psnr(tmp_path):
    args = ["recon", "--method", "zerofill", "--alpha", "0.3", "--count", 3, "--size", 32]
    assert run(*args, "--out", tmp_path / "clean") == 0
    assert run(*args, "--noise-std", "0.1", "--out", tmp_path / "noisy") == 0
    clean = json.loads((tmp_path / "clean" / "metrics.json").read_text())
    noisy = json.loads((tmp_path / "noisy" / "metrics.json").read_text())
    assert noisy["m_psnr"] <= clean["m_psnr"]
    assert np.isfinite(noisy["m_psnr"])


@pytest.mark.parametrize("method", ["fista_tv", "classical_twogrid"])
def test_recon_classical_methods(tmp_path, method):
    assert run("recon", "--method", method, "--alpha", "0.3", "--count", 1, "--size", 32, "--iters", 20,
               "--out", tmp_path) == 0
    assert np.isfinite(json.loads((tmp_path / "metrics.json").read_text())["m_psnr"])


def test_recon_errors(tmp_path, checkpoint):
    assert run("recon", "--alpha", "0.3", "--out", tmp_path) == 1  # cgpd without checkpoint
    assert run("recon", "--checkpoint", tmp_path / "nope", "--alpha", "0.3", "--out", tmp_path) == 1
    assert run("recon", "--method", "zerofill", "--trace", "--alpha", "0.3", "--out", tmp_path) == 1


# ---------------------------------------------------------------------------
# eval

def test_eval_table_and_determinism(tmp_path):
    args = ["eval", "--methods", "zerofill,fista_tv", "--alphas", "0.1,0.3,0.5", "--count", 2, "--size", 32,
            "--iters", 20]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    text = (tmp_path / "a" / "eval.csv").read_text()
    assert text == (tmp_path / "b" / "eval.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 6
    assert list(rows[0]) == ["method", "family", "alpha", "m_psnr", "m_ssim"]
    zf = [float(r["m_psnr"]) for r in rows if r["method"] == "zerofill"]
    assert zf[0] < zf[1] < zf[2]
    assert (tmp_path / "a" / "psnr_vs_ratio_cartesian.png").exists()
    assert len(json.loads((tmp_path / "a" / "eval.json").read_text())) == 6


def test_eval_with_model_and_families(tmp_path, checkpoint):
    assert run("eval", "--methods", "cgpd,zerofill", "--families", "cartesian,random2d", "--alphas", "0.3",
               "--checkpoint", checkpoint, "--count", 1, "--size", 16, "--out", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "eval.csv").read_text().splitlines()))
    assert len(rows) == 4
    assert (tmp_path / "psnr_vs_ratio_random2d.png").exists()


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "cgpdnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "recon" in res.stdout
