import filecmp
import os

import numpy as np
import pytest
from PIL import Image

from layoutseg.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "6", "--seed", "2",
                 "--out", str(d / "corpus")]) == 0
    assert main(["train", "--data", str(d / "corpus"),
                 "--out", str(d / "pre.ckpt"), "--epochs", "1",
                 "--seed", "1", "--log", str(d / "train.csv")]) == 0
    return d


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "5", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors


def test_gen_data_empty(tmp_path):
    assert main(["gen-data", "--n", "0", "--seed", "0",
                 "--out", str(tmp_path / "e")]) == 0
    assert os.listdir(tmp_path / "e") == ["manifest.json"]


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--n", "5"])  # missing --out
    assert e.value.code == 2


def test_missing_checkpoint_exit_code(workdir):
    assert main(["eval", "--model", str(workdir / "nope.ckpt"),
                 "--data", str(workdir / "corpus")]) == 3


def test_incompatible_checkpoint_exit_code(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"DRFN" + b"\x63\x00\x00\x00" + b"\x00" * 16)
    assert main(["eval", "--model", str(bad),
                 "--data", str(workdir / "corpus")]) == 4


def test_finetune_requires_single_path_checkpoint(workdir, tmp_path):
    assert main(["finetune", "--from", str(workdir / "pre.ckpt"),
                 "--data", str(workdir / "corpus"),
                 "--out", str(tmp_path / "ft.ckpt"), "--steps", "1"]) == 0
    # an armed checkpoint cannot seed another dynamic-select fine-tune
    assert main(["finetune", "--from", str(tmp_path / "ft.ckpt"),
                 "--data", str(workdir / "corpus"),
                 "--out", str(tmp_path / "ft2.ckpt"), "--steps", "1"]) == 4


def test_eval_prints_table(workdir, capsys, tmp_path):
    assert main(["eval", "--model", str(workdir / "pre.ckpt"),
                 "--data", str(workdir / "corpus"),
                 "--csv", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["method", "A", "P", "R", "F1"]
    assert (tmp_path / "r.csv").read_text().startswith(
        "method,accuracy,precision,recall,f1")


def test_predict_output(workdir, tmp_path):
    # non-/16 input: output size must match the input exactly
    img = np.random.default_rng(0).integers(
        0, 255, size=(190, 250, 3)).astype(np.uint8)
    src = tmp_path / "page.png"
    Image.fromarray(img).save(src)
    out = tmp_path / "pred.png"
    raw = tmp_path / "raw.png"
    assert main(["predict", "--model", str(workdir / "pre.ckpt"),
                 "--image", str(src), "--out", str(out),
                 "--raw-out", str(raw)]) == 0
    colored = np.asarray(Image.open(out))
    rawm = np.asarray(Image.open(raw))
    assert colored.shape == (190, 250, 3)
    assert rawm.shape == (190, 250)
    # color map: bg black, figure red, text green, table blue
    lut = np.array([(0, 0, 0), (255, 0, 0), (0, 255, 0), (0, 0, 255)],
                   dtype=np.uint8)
    assert np.array_equal(colored, lut[rawm])


def test_predict_unreadable_image(workdir, tmp_path):
    assert main(["predict", "--model", str(workdir / "pre.ckpt"),
                 "--image", str(tmp_path / "missing.png"),
                 "--out", str(tmp_path / "x.png")]) == 2


def test_train_log_columns(workdir):
    header = (workdir / "train.csv").read_text().splitlines()[0]
    assert header == "step,loss,acc"
