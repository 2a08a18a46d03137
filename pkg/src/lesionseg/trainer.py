"""Training runs and checkpoint inference."""
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from . import metrics as M
from . import netbuilder as N
from . import optim
from . import weights_io as W
from .checkpoint import Checkpoint
from .errors import ConfigurationError, InvalidArgumentError, NumericError
from .tensor import child_rng, make_rng

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    arch: str = "sgn3"
    data_root: str = ""
    seed: int = 0
    epochs: int = 100
    batch: int = 1
    lr: float = optim.LEARNING_RATE
    momentum: float = optim.MOMENTUM
    l2: float = optim.L2
    l1: float = 0.0
    lr_decay: float = 1.0
    patience: int = optim.PATIENCE
    shuffle: bool = True
    augment: bool = True
    augment_config: D.AugmentConfig = field(default_factory=D.AugmentConfig)
    init: str = "scratch"
    split: tuple = (0.7, 0.3)
    size: tuple = D.WORKING_SIZE
    upsampling: str = "transposed"
    class_weight_mode: str = "median"
    out: str = ""

    @classmethod
    def network_structure(cls, **kw):
        """Overrides used when comparing architectures: 50 epochs, patience 25."""
        kw.setdefault("epochs", 50)
        kw.setdefault("patience", optim.PATIENCE_STRUCTURE)
        return cls(**kw)

    def to_text(self):
        d = asdict(self)
        return "".join(f"{k}={json.dumps(v, sort_keys=True)}\n" for k, v in d.items())

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass
class RunLog:
    losses: list = field(default_factory=list)        # (iteration, epoch, loss)
    val_rows: list = field(default_factory=list)      # (epoch, metric, per-class dict)
    stop_reason: str = ""
    epochs_run: int = 0
    best_epoch: int = 0
    best_metric: float = -math.inf
    best: Checkpoint = None
    final: Checkpoint = None
    class_weights: list = field(default_factory=list)
    wall_clock: float = 0.0


def resolve_arch(arch, upsampling="transposed"):
    if isinstance(arch, N.GraphSpec):
        return arch
    path = Path(str(arch))
    if path.suffix and path.is_file():
        return N.graph_from_text(path.read_text())
    return N.build_preset(str(arch), upsampling=upsampling)


def init_params(spec, cfg, rng):
    if cfg.init == "scratch":
        return W.scratch_init(spec, rng), None
    if cfg.init.startswith("transfer:"):
        donor = W.load(cfg.init.split(":", 1)[1])
        mapping = None
        donor_arch = donor.metadata.get("arch")
        if not donor_arch:
            mapping = W.load_mapping(spec.preset_name) or None
        params, rep = W.transfer_init(spec, donor, rng, mapping=mapping)
        params.metadata["arch"] = spec.to_text()
        return params, rep
    raise ConfigurationError(f"unknown init policy {cfg.init!r}")


def predict_sample(spec, params, s):
    return N.predict_labels(spec, params, s.image)


def validation_metric(spec, params, samples):
    """Mean per-class accuracy over a sample list (macro over images)."""
    pairs = [(s.source_id, predict_sample(spec, params, s), s.label) for s in samples]
    rep = M.report(pairs, tolerance_px=None)
    return rep.mean["accuracy"], rep


def _train_step(spec, params, batch, weights, opt, rng):
    total = None
    losses = []
    for s in batch:
        acts = N.forward(spec, params, s.image, "train", rng=rng)
        res = N.backward(spec, params, acts, s.label, weights)
        losses.append(res.loss)
        N.apply_running_stats(params, acts)
        if total is None:
            total = res.grads
        else:
            for n in total:
                total[n] += res.grads[n]
    if len(batch) > 1:
        inv = np.float32(1.0 / len(batch))
        for n in total:
            total[n] *= inv
    loss = float(np.mean(losses))
    if not math.isfinite(loss):
        raise NumericError(f"training loss became {loss}")
    optim.sgdm_step(params, total, opt)
    bad = [n for n, t in params.items() if not np.isfinite(t).all()]
    if bad:
        raise NumericError(f"parameter {bad[0]!r} became non-finite")
    return loss


def train(cfg, train_set=None, val_set=None, validate=None, on_epoch=None):
    """Run one training experiment and return its :class:`RunLog`.

    Data come from ``cfg.data_root`` unless ``train_set`` is given.  Without
    ``val_set`` the test split is used for validation.  ``validate`` may
    replace the built-in metric: it is called as ``validate(params, epoch)``
    and must return a higher-is-better scalar.  Validation runs once before
    training (epoch 0) and after every epoch; the run stops when the metric
    has not improved for more than ``cfg.patience`` epochs.
    """
    t0 = time.perf_counter()
    spec = resolve_arch(cfg.arch, cfg.upsampling)
    if train_set is None:
        ds = D.load_dataset(cfg.data_root, cfg.split, cfg.seed, cfg.size)
        train_set = ds.train
        if val_set is None:
            val_set = ds.validation or ds.test
    if not train_set:
        raise ConfigurationError("training set is empty")
    val_set = val_set if val_set is not None else []
    rng = make_rng(cfg.seed)
    params, _ = init_params(spec, cfg, rng)
    params.metadata.update(arch=spec.to_text(), seed=str(cfg.seed))
    if cfg.size:
        params.metadata["input_size"] = f"{cfg.size[0]}x{cfg.size[1]}"
    weights = D.class_weights([s.label for s in train_set], cfg.class_weight_mode)
    opt = optim.SgdmState.for_params(params, spec.trainable_names(), learning_rate=cfg.lr,
                                     momentum=cfg.momentum, l2_lambda=cfg.l2, l1_lambda=cfg.l1,
                                     lr_decay=cfg.lr_decay)
    stopper = optim.EarlyStopState(patience=cfg.patience)
    log_ = RunLog(class_weights=weights)
    out = Path(cfg.out) if cfg.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text() + f"config_hash={cfg.digest()}\n")

    def check(epoch):
        if validate is not None:
            metric, per = float(validate(params, epoch)), {}
        elif val_set:
            metric, rep = validation_metric(spec, params, val_set)
            per = rep.per_class
        else:
            raise ConfigurationError("no validation data and no validate callback")
        params.metadata.update(epoch=str(epoch), metric=repr(metric))
        decision = optim.early_stop_update(stopper, metric, params)
        log_.val_rows.append((epoch, metric, per))
        if stopper.best_check == stopper.checks:
            log_.best_epoch = epoch
        return decision

    check(0)
    last_good = params.copy()
    iteration = 0
    decision = "continue"
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
        for start in range(0, len(order), cfg.batch):
            batch = []
            for i in order[start:start + cfg.batch]:
                s = train_set[int(i)]
                if cfg.augment and cfg.augment_config.enabled:
                    s = D.augment_geometric(s, cfg.augment_config, child_rng(cfg.seed, s.source_id, epoch))
                batch.append(s)
            try:
                loss = _train_step(spec, params, batch, weights, opt, rng)
            except NumericError:
                log_.stop_reason = f"diverged at iteration {iteration + 1}"
                log_.final = last_good
                log_.best = stopper.best_checkpoint or last_good
                if out:
                    W.save(last_good, out / "final.segw")
                    _write_logs(out, log_)
                raise
            iteration += 1
            log_.losses.append((iteration, epoch, loss))
        last_good = params.copy()
        opt.end_epoch()
        log_.epochs_run = epoch
        decision = check(epoch)
        if on_epoch is not None and on_epoch(epoch, params, log_) is False:
            log_.stop_reason = "stopped by callback"
            break
        if decision == "stop":
            log_.stop_reason = f"early stopping after epoch {epoch}"
            break
    else:
        log_.stop_reason = f"reached maximum of {cfg.epochs} epochs"
    log_.best = stopper.best_checkpoint
    log_.best_metric = stopper.best_metric
    log_.final = params
    log_.wall_clock = time.perf_counter() - t0
    if out:
        W.save(log_.best, out / "best.segw")
        W.save(log_.final, out / "final.segw")
        _write_logs(out, log_)
    return log_


def _write_logs(out, log_):
    with open(out / "runlog.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter", "epoch", "loss"))
        for it, ep, loss in log_.losses:
            w.writerow((it, ep, repr(float(loss))))
    with open(out / "valmetrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "metric", "acc_skin", "acc_lesion", "iou_skin", "iou_lesion",
                    "bf1_skin", "bf1_lesion"))
        for ep, metric, per in log_.val_rows:
            vals = [per.get(c, {}).get(f, float("nan")) for f in ("accuracy", "iou", "bf1") for c in M.CLASSES]
            w.writerow([ep, repr(float(metric))] + [repr(float(v)) for v in vals])
    (out / "timing.txt").write_text(
        f"wall_clock_s={log_.wall_clock:.3f}\nstop_reason={log_.stop_reason}\n")


def spec_from_checkpoint(ckpt, preset=None):
    arch = ckpt.metadata.get("arch")
    if not arch:
        raise ConfigurationError("checkpoint does not describe its architecture")
    spec = N.graph_from_text(arch)
    if preset is not None and spec.preset_name.lower() != str(preset).lower():
        raise ConfigurationError(f"checkpoint holds {spec.preset_name}, not {preset}")
    return spec


def evaluate(ckpt, dataset, preset=None, tolerance_px=None, aggregate="macro"):
    """Inference-mode metrics of ``ckpt`` over a list of samples."""
    if not dataset:
        raise InvalidArgumentError("cannot evaluate on an empty dataset")
    spec = spec_from_checkpoint(ckpt, preset)
    pairs = [(s.source_id, predict_sample(spec, ckpt, s), s.label) for s in dataset]
    return M.report(pairs, tolerance_px, aggregate)


def overlay(image, label, alpha=0.45):
    """RGB uint8 overlay with lesion pixels tinted red."""
    rgb = D.to_uint8(image).astype(np.float64)
    tint = np.array([255.0, 0.0, 0.0])
    mask = label == D.LESION
    rgb[mask] = (1 - alpha) * rgb[mask] + alpha * tint
    return np.round(rgb).astype(np.uint8)


def predict(ckpt, image_path, out_dir):
    """Write ``<stem>_label.png`` (values 1/2) and ``<stem>_overlay.png``."""
    try:
        image = D.read_image(image_path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {image_path}: {exc}") from exc
    spec = spec_from_checkpoint(ckpt)
    h, w = image.shape[1:]
    size = ckpt.metadata.get("input_size")
    work = image
    if size:
        th, tw = (int(v) for v in size.split("x"))
        work = np.clip(D.resize_bilinear(image, th, tw), 0, 1).astype(np.float32)
    label = N.predict_labels(spec, ckpt, work)
    if label.shape != (h, w):
        label = D.resize_nearest(label, h, w)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    D.write_label(label, out / f"{stem}_label.png")
    Image.fromarray(overlay(image, label), "RGB").save(out / f"{stem}_overlay.png")
    return label
