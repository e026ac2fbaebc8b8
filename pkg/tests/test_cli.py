import csv
import hashlib
import os

import numpy as np
import pytest
from PIL import Image

from rbdm.cli import main, to_uint8
from rbdm.data import read_manifest, read_tensor, write_tensor


def _digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            with open(os.path.join(dirpath, name), "rb") as fh:
                h.update(name.encode() + fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "200", "--size", "32",
                 "--seed", "4"]) == 0
    (root / "cfg.txt").write_text(
        "preset=desk\nimage_size=32\nchannels=4,6,8\nencoder_hidden=8\nT=20\nmax_steps=4\n"
        f"manifest={root / 'data' / 'manifest.txt'}\n")
    assert main(["train", "--config", str(root / "cfg.txt"), "--out-dir", str(root / "run")]) == 0
    return root


def test_gen_data_counts_and_determinism(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--count", "100", "--size", "64"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--count", "100", "--size", "64"]) == 0
    m = read_manifest(str(tmp_path / "a" / "manifest.txt"))
    assert len(m.subset("train")) == 70 and len(m.subset("test")) == 30
    n_files = sum(len(f) for _, _, f in os.walk(tmp_path / "a")) - 1
    assert n_files == 200
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_gen_data_too_small(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "5", "--size", "16"]) == 1
    assert "32" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_train_outputs(workdir):
    run = workdir / "run"
    assert {"config.txt", "final.rbck", "loss_log.csv"} <= set(os.listdir(run))
    rows = list(csv.reader(open(run / "loss_log.csv")))
    assert rows[0] == ["step", "l1", "l2", "l3", "total"] and len(rows) == 5


def test_train_ablation_flags(workdir):
    out = workdir / "abl"
    assert main(["train", "--config", str(workdir / "cfg.txt"), "--no-ssr", "--no-rr",
                 "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "loss_log.csv")))
    assert all(float(r["l2"]) == 0 and float(r["l3"]) == 0 for r in rows)
    assert all(r["l1"] == r["total"] for r in rows)


def test_train_bad_config(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("preset=desk\nlearning_rate=3\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_sample_png_and_trajectory(workdir):
    ck = str(workdir / "run" / "final.rbck")
    inp = str(workdir / "data" / "mm" / "00000.mpt")
    a, b = str(workdir / "a.png"), str(workdir / "b.png")
    assert main(["sample", "--checkpoint", ck, "--input", inp, "--out", a, "--trajectory"]) == 0
    assert main(["sample", "--checkpoint", ck, "--input", inp, "--out", b]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    img = np.asarray(Image.open(a))
    assert img.shape == (32, 32, 3) and img.dtype == np.uint8
    frames = read_tensor(str(workdir / "a_trajectory.mpt"))
    assert frames.shape == (6, 3, 32, 32)
    assert np.asarray(Image.open(workdir / "a_trajectory.png")).shape == (32, 6 * 32, 3)


def test_sample_mpt_output_finite(workdir):
    out = str(workdir / "s.mpt")
    assert main(["sample", "--checkpoint", str(workdir / "run" / "final.rbck"),
                 "--input", str(workdir / "data" / "mm" / "00003.mpt"), "--out", out]) == 0
    img = read_tensor(out)
    assert img.shape == (3, 32, 32) and np.all(np.isfinite(img)) and np.all(np.abs(img) <= 1)


def test_sample_rejects_wrong_input(workdir, tmp_path):
    bad = str(tmp_path / "rgb.mpt")
    write_tensor(bad, np.zeros((3, 32, 32), np.float32))
    assert main(["sample", "--checkpoint", str(workdir / "run" / "final.rbck"),
                 "--input", bad, "--out", str(tmp_path / "x.png")]) == 2


def test_png_mapping():
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0, -2.0, 3.0, -0.99])),
                                  [0, 128, 255, 0, 255, 1])


def test_eval_ground_truth(workdir):
    out = workdir / "truth.csv"
    assert main(["eval", "--manifest", str(workdir / "data" / "manifest.txt"),
                 "--predictor", "truth", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out, encoding="utf-8")))
    assert len(rows) == 1 + 60 + 1
    assert all(r[1] == "inf" and float(r[2]) == 1.0 for r in rows[1:-1])
    agg = rows[-1]
    assert agg[:4] == ["aggregate", "100.00±0.00", "1.0000±0.0000", "1.0000±0.0000"]
    assert float(agg[4]) < 1e-6


def test_eval_model_deterministic(workdir):
    args = ["eval", "--checkpoint", str(workdir / "run" / "final.rbck"),
            "--manifest", str(workdir / "data" / "manifest.txt"), "--limit", "4"]
    assert main(args + ["--out", str(workdir / "e1.csv")]) == 0
    assert main(args + ["--out", str(workdir / "e2.csv")]) == 0
    assert open(workdir / "e1.csv").read() == open(workdir / "e2.csv").read()


def test_eval_refuses_mismatched_T(workdir, tmp_path):
    cfg = tmp_path / "other.txt"
    cfg.write_text("preset=desk\nT=50\n")
    assert main(["eval", "--checkpoint", str(workdir / "run" / "final.rbck"),
                 "--manifest", str(workdir / "data" / "manifest.txt"),
                 "--config", str(cfg)]) == 1


def test_eval_empty_split(tmp_path):
    (tmp_path / "m.txt").write_text("version=1\nimage_size=32\n")
    assert main(["eval", "--manifest", str(tmp_path / "m.txt"), "--predictor", "truth",
                 "--out", str(tmp_path / "o.csv")]) == 2


def test_gradcheck_command_runs():
    assert main(["gradcheck"]) == 0
