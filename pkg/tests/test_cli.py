import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from estn.cli import main
from estn.imageio import write_image
from estn.network import ModelConfig, build_model
from estn.serialize import save_weights

from conftest import smooth_image

TINY_CFG = "channels = 6\nblocks = 1\nbsgm_tile = 8\nbatch_size = 1\npatch_size = 8\nmilestones =\n"


@pytest.fixture
def ws(tmp_path):
    (tmp_path / "hr").mkdir()
    write_image(tmp_path / "hr" / "a.png", smooth_image(32, 32))
    write_image(tmp_path / "hr" / "b.png", smooth_image(24, 40, phase=1.0))
    write_image(tmp_path / "lr.png", smooth_image(16, 16, phase=2.0))
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    for a in (2, 4):
        save_weights(build_model(ModelConfig(channels=6, blocks=1, bsgm_tile=8, scale=a), seed=1),
                     tmp_path / f"w{a}.estn")
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


# --- train ----------------------------------------------------------------------

def test_train_outputs_and_determinism(ws, capsys):
    for d in ("r1", "r2"):
        code, out, _ = run(capsys, "train", "--config", ws / "tiny.cfg", "--data", ws / "hr", "--scale", 2,
                           "--iters", 3, "--seed", 7, "--out", ws / d)
        assert code == 0 and "final loss" in out
    assert (ws / "r1" / "loss.csv").read_text() == (ws / "r2" / "loss.csv").read_text()
    assert len(read_csv((ws / "r1" / "loss.csv").read_text())) == 3
    assert (ws / "r1" / "model.estn").read_bytes() == (ws / "r2" / "model.estn").read_bytes()


def test_train_errors(ws, capsys, caplog):
    assert run(capsys, "train", "--data", ws / "nope", "--out", ws / "x")[0] == 3
    (ws / "bad.cfg").write_text("channels = 6\nwarp_factor = 9\n")
    assert run(capsys, "train", "--config", ws / "bad.cfg", "--data", ws / "hr", "--out", ws / "x")[0] == 2
    code = run(capsys, "train", "--config", ws / "tiny.cfg", "--data", ws / "hr", "--patch", 64,
               "--scale", 2, "--out", ws / "x")[0]
    assert code == 3 and "smaller than patch" in caplog.text
    assert not (ws / "x" / "ckpt_000000.estn").exists()


def test_thread_env(ws, capsys, monkeypatch):
    monkeypatch.setenv("ESTN_THREADS", "zero")
    assert run(capsys, "inspect")[0] == 2
    monkeypatch.setenv("ESTN_THREADS", "1")
    assert run(capsys, "inspect")[0] == 0


# --- infer ----------------------------------------------------------------------

def test_infer_shape_and_determinism(ws, capsys):
    write_image(ws / "lr64.png", smooth_image(64, 64))
    assert run(capsys, "infer", "--weights", ws / "w4.estn", "--input", ws / "lr64.png", "--out", ws / "a.png")[0] == 0
    assert Image.open(ws / "a.png").size == (256, 256)
    run(capsys, "infer", "--weights", ws / "w4.estn", "--input", ws / "lr64.png", "--out", ws / "b.png")
    assert (ws / "a.png").read_bytes() == (ws / "b.png").read_bytes()


def test_infer_errors(ws, capsys, caplog):
    data = (ws / "w2.estn").read_bytes()
    (ws / "cut.estn").write_bytes(data[:-10])
    (ws / "cut.estn.cfg").write_text((ws / "w2.estn.cfg").read_text())
    code = run(capsys, "infer", "--weights", ws / "cut.estn", "--input", ws / "lr.png", "--out", ws / "o.png")[0]
    assert code == 2 and "'um.bias'" in caplog.text
    assert run(capsys, "infer", "--weights", ws / "w2.estn", "--input", ws / "lr.png", "--scale", 3,
               "--out", ws / "o.png")[0] == 2
    assert run(capsys, "infer", "--weights", ws / "w2.estn", "--input", ws / "none.png", "--out", ws / "o.png")[0] == 3
    assert run(capsys, "infer", "--weights", ws / "none.estn", "--input", ws / "lr.png", "--out", ws / "o.png")[0] == 2


# --- eval -----------------------------------------------------------------------

def test_eval_self_and_bicubic(ws, capsys):
    code, out, _ = run(capsys, "eval", "--hr", ws / "hr", "--sr", ws / "hr", "--out", ws / "self.csv")
    rows = read_csv(out)
    assert code == 0 and [r["image"] for r in rows] == ["a", "b", "mean"]
    assert all(float(r["psnr_db"]) == 100.0 and float(r["ssim"]) == 1.0 for r in rows)
    assert (ws / "self.csv").read_text() == out
    code, out, _ = run(capsys, "eval", "--hr", ws / "hr", "--method", "bicubic", "--scale", 4)
    rows = read_csv(out)
    per = rows[:-1]
    assert all(0 < float(r["psnr_db"]) < 100 for r in rows)
    assert float(rows[-1]["psnr_db"]) == pytest.approx(np.mean([float(r["psnr_db"]) for r in per]), rel=1e-12)
    assert float(rows[-1]["ssim"]) == pytest.approx(np.mean([float(r["ssim"]) for r in per]), rel=1e-12)


def test_eval_weights_and_errors(ws, capsys):
    code, out, _ = run(capsys, "eval", "--hr", ws / "hr", "--weights", ws / "w2.estn")
    assert code == 0 and len(read_csv(out)) == 3
    (ws / "sr").mkdir()
    write_image(ws / "sr" / "a.png", smooth_image(32, 32))
    assert run(capsys, "eval", "--hr", ws / "hr", "--sr", ws / "sr")[0] == 3
    assert run(capsys, "eval", "--hr", ws / "hr")[0] == 2


# --- lam --------------------------------------------------------------------------

def test_lam_outputs(ws, capsys):
    code, out, _ = run(capsys, "lam", "--weights", ws / "w2.estn", "--input", ws / "lr.png", "--region", "3,5,7,6",
                       "--steps", 4, "--out", ws / "lam.png")
    assert code == 0 and "completeness residual" in out
    meta = json.loads((ws / "lam.json").read_text())
    assert meta["region"] == {"x": 3, "y": 5, "w": 7, "h": 6} and meta["steps"] == 4
    assert Image.open(ws / "lam.png").size == (16, 16)
    assert np.loadtxt(ws / "lam.csv", delimiter=",").shape == (16, 16)


def test_lam_sigma_zero_and_errors(ws, capsys):
    code, out, _ = run(capsys, "lam", "--weights", ws / "w2.estn", "--input", ws / "lr.png", "--region", "0,0,4,4",
                       "--sigma", 0, "--steps", 2, "--out", ws / "z.png")
    assert code == 0 and "residual 0.000e+00" in out
    assert not np.any(np.loadtxt(ws / "z.csv", delimiter=","))
    for region in ("30,30,4,4", "1,2,3", "a,b,c,d"):
        assert run(capsys, "lam", "--weights", ws / "w2.estn", "--input", ws / "lr.png", "--region", region,
                   "--out", ws / "e.png")[0] == 2


# --- inspect / check ------------------------------------------------------------------

def test_inspect_text_and_json(capsys):
    code, text, _ = run(capsys, "inspect")
    assert code == 0
    rep = json.loads(run(capsys, "inspect", "--json")[1])
    assert f"params {rep['params']:,}" in text and abs(rep["params"] / 881_000 - 1) <= 0.1
    assert f"{rep['flops_g']:.2f}G" in text
    two = json.loads(run(capsys, "inspect", "--json", "--scale", 2)[1])
    um = lambda a: 60 * 3 * a * a * 9 + 3 * a * a  # noqa: E731
    assert rep["params"] - two["params"] == um(4) - um(2)


def test_check_filter_and_sabotage(capsys):
    code, out, _ = run(capsys, "check", "--filter", "attention", "--seeds", 1)
    names = [line.split()[1] for line in out.splitlines() if line.startswith(("PASS", "FAIL"))]
    assert code == 0 and names and all("attention" in n or n.startswith("blocks.estm") or n.startswith("gradient.")
                                       for n in names)
    assert not any(n.startswith(("structure", "metrics")) for n in names)
    code, out, _ = run(capsys, "check", "--filter", "attention", "--seeds", 1, "--sabotage", "softmax")
    assert code == 1 and "FAIL attention.w_mssa_oracle" in out
    assert run(capsys, "check", "--sabotage", "everything")[0] == 2
    assert run(capsys, "check", "--filter", "no-such-check")[0] == 2


def test_check_full_suite_clean(capsys):
    code, out, _ = run(capsys, "check", "--seeds", 1)
    assert code == 0 and "FAIL" not in out
