import csv
import subprocess
import sys

import numpy as np
import pytest

from lesionseg import cli
from lesionseg import data as D
from lesionseg import netbuilder as N
from lesionseg import weights_io as W
from lesionseg.checkpoint import Checkpoint

# logits (0.5 - R, R - 0.5): red pixels are lesion, the rest skin
ORACLE = """preset oracle
in_channels 3
encoder_depth 0
skip_style U
node head conv group=head in=3 out=2 k=1 stride=1 pad=0 <- input
node loss softmax_loss group=head <- head
"""


def oracle_checkpoint():
    w = np.zeros((2, 3, 1, 1), np.float32)
    w[0, 0], w[1, 0] = -1, 1
    return Checkpoint({"head.weight": w, "head.bias": np.array([0.5, -0.5], np.float32)},
                      {"arch": N.graph_to_text(N.graph_from_text(ORACLE))})


def perfect_fixture(root, n=3, size=(20, 24)):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        label = np.ones(size, np.uint8)
        r0, c0 = rng.integers(2, 8, 2)
        label[r0:r0 + 8, c0:c0 + 10] = 2
        image = np.zeros((3,) + size, np.float32)
        image[0] = label == 2
        image[1:] = 0.6
        out.append(D.Sample(image, label, f"img{i}"))
    D.save_samples(out, root)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_writes_pairs(tmp_path):
    assert run("synth", "--n", 8, "--size", "96x96", "--seed", 1, "--out", tmp_path) == 0
    assert len(list((tmp_path / "images").glob("*.png"))) == 8
    assert len(list((tmp_path / "labels").glob("*.png"))) == 8
    ds = D.load_dataset(tmp_path, (1.0, 0.0), 0, (96, 96))
    assert len(ds.train) == 8


def test_eval_perfect_fixture(tmp_path):
    perfect_fixture(tmp_path / "data")
    W.save(oracle_checkpoint(), tmp_path / "oracle.segw")
    code = run("eval", "--ckpt", tmp_path / "oracle.segw", "--data", tmp_path / "data",
               "--size", "20x24", "--out", tmp_path / "m.csv")
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    agg = [r for r in rows if r[0] == "AGGREGATE"]
    assert len(agg) == 3
    assert all(float(v) == 1.0 for r in agg for v in r[2:])
    assert (tmp_path / "m_confusion.csv").is_file()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("dance") == 1
    assert run("synth", "--n", 2, "--out", tmp_path, "--bogus") == 1
    assert run("synth", "--n", 2, "--size", "big", "--out", tmp_path) == 1
    assert run("train", "--arch", "sgn9", "--data", tmp_path, "--out", tmp_path / "r") == 1
    assert "lesionseg" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path):
    assert run("eval", "--ckpt", tmp_path / "none.segw", "--data", tmp_path, "--out", tmp_path / "m.csv") == 2
    (tmp_path / "bad.segw").write_bytes(b"nope")
    assert run("predict", "--ckpt", tmp_path / "bad.segw", "--image", "x.png", "--out", tmp_path) == 2
    assert run("report", "--runs", tmp_path / "missing") == 2


@pytest.mark.parametrize("verb", ["train", "eval", "predict", "augment", "synth", "report"])
def test_help_lists_defaults(verb, capsys):
    assert run(verb, "--help") == 0
    text = capsys.readouterr().out
    assert "--seed" in text and "--out" in text
    if verb == "train":
        for flag, default in (("--lr", "0.003"), ("--momentum", "0.9"), ("--l2", "0.0005"),
                              ("--epochs", "100"), ("--patience", "10"), ("--batch", "1")):
            assert flag in text
            assert f"(default: {default})" in text


def train_args(data, out, arch):
    return ["train", "--arch", arch, "--data", data, "--seed", 4, "--epochs", 2, "--size", "32x32",
            "--out", out]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n", 6, "--size", "32x32", "--seed", 2, "--out", root) == 0
    arch = root / "mini.txt"
    arch.write_text(N.graph_to_text(N.build_sgn(1, base_width=4)))
    return root, arch


def test_train_twice_byte_identical(synth_dir, tmp_path):
    root, arch = synth_dir
    assert run(*train_args(root, tmp_path / "a", arch)) == 0
    assert run(*train_args(root, tmp_path / "b", arch)) == 0
    for name in ("runlog.csv", "valmetrics.csv", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() != b""
    for name in ("runlog.csv", "valmetrics.csv", "best.segw", "final.segw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("report", "--runs", tmp_path / "a", tmp_path / "b", "--out", tmp_path / "r.csv") == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["run"] for r in rows] == ["a", "b"]
    assert rows[0]["mean_iou"] == rows[1]["mean_iou"]


def test_train_transfer_and_predict(synth_dir, tmp_path):
    root, arch = synth_dir
    assert run(*train_args(root, tmp_path / "a", arch)) == 0
    assert run(*train_args(root, tmp_path / "b", arch), "--init", f"transfer:{tmp_path / 'a' / 'final.segw'}") == 0
    img = sorted((root / "images").glob("*.png"))[0]
    assert run("predict", "--ckpt", tmp_path / "b" / "best.segw", "--image", img, "--out", tmp_path / "p") == 0
    assert (tmp_path / "p" / f"{img.stem}_label.png").is_file()
    assert (tmp_path / "p" / f"{img.stem}_overlay.png").is_file()


def test_numeric_failure_exit_3(synth_dir, tmp_path):
    root, arch = synth_dir
    args = train_args(root, tmp_path / "x", arch)
    with np.errstate(all="ignore"):
        assert run(*args, "--lr", "1e6", "--momentum", "0", "--no-augment") == 3


def test_augment_crop_recipe(tmp_path):
    assert run("synth", "--n", 3, "--size", "64x64", "--seed", 0, "--out", tmp_path / "src") == 0
    assert run("synth", "--n", 2, "--size", "32x32", "--seed", 1, "--out", tmp_path / "extra") == 0
    code = run("augment", "--data", tmp_path / "src", "--passthrough", tmp_path / "extra",
               "--recipe", "crop", "--crops", 4, "--size", "32x32", "--out", tmp_path / "out")
    assert code == 0
    assert len(list((tmp_path / "out" / "images").glob("*.png"))) == 3 * 4 + 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "lesionseg.cli", "synth", "--n", "1", "--size", "32x32",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "lesionseg.cli", "nope"], capture_output=True, text=True)
    assert res.returncode == 1
