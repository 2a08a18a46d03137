import csv

import numpy as np
import pytest
from PIL import Image

from lesionseg import data as D
from lesionseg import netbuilder as N
from lesionseg import trainer as T
from lesionseg import weights_io as W
from lesionseg.errors import ConfigurationError, InvalidArgumentError, NumericError
from lesionseg.tensor import make_rng

NO_BN = """preset plain
in_channels 3
encoder_depth 1
skip_style U
node c1 conv group=enc1 in=3 out=4 k=3 stride=1 pad=1 <- input
node r1 relu group=enc1 <- c1
node p1 maxpool group=enc1 window=2 stride=2 <- r1
node u1 upsample group=dec1 factor=2 algo=bilinear <- p1
node head conv group=head in=4 out=2 k=1 stride=1 pad=0 <- u1
node loss softmax_loss group=head <- head
"""


def tiny_cfg(tmp_path=None, **kw):
    kw.setdefault("arch", N.build_sgn(1, base_width=4))
    kw.setdefault("epochs", 2)
    kw.setdefault("size", (32, 32))
    kw.setdefault("out", str(tmp_path) if tmp_path else "")
    return T.RunConfig(**kw)


@pytest.fixture(scope="module")
def samples():
    return D.synth_dataset(6, (32, 32), seed=3)


def test_default_hyperparameters():
    cfg = T.RunConfig()
    assert (cfg.lr, cfg.momentum, cfg.l2, cfg.epochs, cfg.batch, cfg.patience, cfg.shuffle) == \
        (0.003, 0.9, 0.0005, 100, 1, 10, True)
    s = T.RunConfig.network_structure()
    assert (s.epochs, s.patience) == (50, 25)


def test_identical_runs_match(samples, tmp_path):
    a = T.train(tiny_cfg(tmp_path / "a"), samples[:4], samples[4:])
    b = T.train(tiny_cfg(tmp_path / "b"), samples[:4], samples[4:])
    assert a.losses == b.losses
    assert (tmp_path / "a/runlog.csv").read_bytes() == (tmp_path / "b/runlog.csv").read_bytes()
    assert (tmp_path / "a/valmetrics.csv").read_bytes() == (tmp_path / "b/valmetrics.csv").read_bytes()
    c = T.train(tiny_cfg(seed=1), samples[:4], samples[4:])
    assert c.losses != a.losses


def test_run_outputs(samples, tmp_path):
    run = T.train(tiny_cfg(tmp_path), samples[:4], samples[4:])
    assert len(run.losses) == run.epochs_run * 4
    assert [it for it, _, _ in run.losses] == list(range(1, len(run.losses) + 1))
    for name in ("runlog.csv", "valmetrics.csv", "best.segw", "final.segw", "config.txt", "timing.txt"):
        assert (tmp_path / name).is_file()
    rows = list(csv.DictReader(open(tmp_path / "valmetrics.csv")))
    assert [int(r["epoch"]) for r in rows] == list(range(run.epochs_run + 1))
    assert "config_hash=" in (tmp_path / "config.txt").read_text()
    best = W.load(tmp_path / "best.segw")
    assert float(best.metadata["metric"]) == max(float(r["metric"]) for r in rows) == run.best_metric


def test_batching_counts_iterations(samples):
    run = T.train(tiny_cfg(batch=3, epochs=1), samples[:5], samples[5:])
    assert len(run.losses) == 2


def test_scripted_validation_stops_and_keeps_best(samples):
    seq = [0.1, 0.3, 0.2, 0.3, 0.25, 0.2, 0.1]
    snaps = {}

    def validate(params, epoch):
        snaps[epoch] = params.copy()
        return seq[epoch]

    run = T.train(tiny_cfg(epochs=20, patience=3), samples[:2], validate=validate)
    # best at epoch 1; epochs 2..5 fail to improve, so the counter passes 3 at epoch 5
    assert run.epochs_run == 5 and run.best_epoch == 1
    assert "early stopping" in run.stop_reason
    assert all(np.array_equal(run.best[n], snaps[1][n]) for n in run.best.names())


def test_zero_learning_rate_stops_after_patience(samples):
    spec = N.graph_from_text(NO_BN)
    run = T.train(tiny_cfg(arch=spec, lr=0.0, epochs=50, patience=10, augment=False),
                  samples[:2], samples[2:4])
    assert run.epochs_run == 11 and run.best_epoch == 0
    assert len({m for _, m, _ in run.val_rows}) == 1


def test_on_epoch_callback_can_stop(samples):
    run = T.train(tiny_cfg(epochs=10), samples[:2], samples[2:3], on_epoch=lambda e, p, log: e < 2)
    assert run.epochs_run == 2 and run.stop_reason == "stopped by callback"


def test_loss_decreases_on_fixed_sample():
    s = D.synth_dataset(1, (32, 32), seed=11)
    run = T.train(tiny_cfg(arch=N.build_sgn(1, base_width=8), epochs=10, augment=False, shuffle=False),
                  s, validate=lambda p, e: 0.0)
    losses = [l for _, _, l in run.losses]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_divergence_aborts_with_last_good(samples, tmp_path):
    cfg = tiny_cfg(tmp_path, lr=1e6, momentum=0.0, epochs=30, augment=False)
    with pytest.raises(NumericError):
        with np.errstate(all="ignore"):
            T.train(cfg, samples[:4], samples[4:])
    last = W.load(tmp_path / "final.segw")
    assert all(np.isfinite(t).all() for t in last.values())
    assert "diverged" in (tmp_path / "timing.txt").read_text()


def test_configuration_errors(samples):
    with pytest.raises(ConfigurationError):
        T.train(tiny_cfg(), [], samples)
    with pytest.raises(ConfigurationError):
        T.train(tiny_cfg(), samples[:2], [])
    with pytest.raises(ConfigurationError):
        T.train(tiny_cfg(init="magic"), samples[:2], samples[2:])


def test_train_from_directory(tmp_path):
    D.save_samples(D.synth_dataset(10, (32, 32), seed=0), tmp_path / "data")
    run = T.train(tiny_cfg(data_root=str(tmp_path / "data"), epochs=1, split=(0.7, 0.3)))
    assert len(run.losses) == 7 and len(run.val_rows) == 2


def test_transfer_init_policy(samples, tmp_path):
    donor = T.train(tiny_cfg(tmp_path / "a", epochs=1), samples[:2], samples[2:3])
    run = T.train(tiny_cfg(init=f"transfer:{tmp_path / 'a' / 'final.segw'}", epochs=1),
                  samples[:2], validate=lambda p, e: float(e == 0))
    first = run.val_rows[0]
    assert first[0] == 0
    spec = N.build_sgn(1, base_width=4)
    # the epoch-0 snapshot is the transferred network
    for n in spec.encoder_param_names():
        if not n.endswith(("running_mean", "running_var")):
            assert np.array_equal(run.best[n], donor.final[n]), n


# ---------------------------------------------------------------- evaluate / predict

@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    train_set = D.synth_dataset(2, (32, 32), seed=5)
    cfg = tiny_cfg(arch=N.build_sgn(1, base_width=8), epochs=60, size=(32, 32), augment=False,
                   lr=0.01, patience=100)
    run = T.train(cfg, train_set, train_set)
    return run, train_set


def test_evaluate_train_beats_unseen(overfit):
    run, train_set = overfit
    unseen = D.synth_dataset(6, (32, 32), seed=99)
    seen = T.evaluate(run.best, train_set)
    other = T.evaluate(run.best, unseen)
    assert seen.mean_iou >= other.mean_iou
    again = T.evaluate(run.best, unseen)
    assert again.mean == other.mean


def test_evaluate_errors(overfit):
    run, train_set = overfit
    with pytest.raises(InvalidArgumentError):
        T.evaluate(run.best, [])
    with pytest.raises(ConfigurationError):
        T.evaluate(run.best, train_set, preset="vgg16")
    assert T.evaluate(run.best, train_set, preset="sgn1").mean_accuracy > 0


def test_predict_outputs(overfit, tmp_path):
    run, train_set = overfit
    img = tmp_path / "in.png"
    D.write_image(D.resize_bilinear(train_set[0].image, 30, 40).clip(0, 1), img)
    label = T.predict(run.best, img, tmp_path / "out")
    assert label.shape == (30, 40) and set(np.unique(label)) <= {1, 2}
    lab = np.asarray(Image.open(tmp_path / "out/in_label.png"))
    ov = Image.open(tmp_path / "out/in_overlay.png")
    assert np.array_equal(lab, label) and ov.size == (40, 30) and ov.mode == "RGB"
    with pytest.raises(OSError):
        T.predict(run.best, tmp_path / "missing.png", tmp_path / "out")


def test_predict_constant_skin_image(tmp_path):
    # a model overfit to skin-only images labels a plain skin patch as skin
    rng = make_rng(0)
    skin = np.array([0.85, 0.65, 0.55], np.float32)[:, None, None]
    imgs = [D.Sample(np.clip(skin + 0.02 * rng.standard_normal((3, 16, 16), dtype=np.float32), 0, 1),
                     np.ones((16, 16), np.uint8), f"s{i}") for i in range(2)]
    run = T.train(tiny_cfg(epochs=20, augment=False), imgs, validate=lambda p, e: float(e))
    Image.fromarray(D.to_uint8(np.broadcast_to(skin, (3, 16, 16)))).save(tmp_path / "skin.png")
    label = T.predict(run.final, tmp_path / "skin.png", tmp_path)
    assert np.all(label == 1)
