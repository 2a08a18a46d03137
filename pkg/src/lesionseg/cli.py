"""Command-line entry point: train, eval, predict, augment, synth, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import data as D
from . import metrics as M
from . import optim
from . import trainer as T
from . import weights_io as W
from .errors import ConfigurationError, DataError, FormatError, InvalidArgumentError, NumericError
from .netbuilder import PRESETS
from .tensor import make_rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lesionseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 360x480, got {text!r}")
    return h, w


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="lesionseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network", formatter_class=fmt)
    t.add_argument("--arch", default="sgn3", help=f"preset ({', '.join(PRESETS)}) or graph text file")
    t.add_argument("--data", required=True, help="dataset root with images/ and labels/")
    t.add_argument("--seed", type=int, default=0, help="seed for split, init, shuffling and augmentation")
    t.add_argument("--epochs", type=int, default=100, help="maximum epochs")
    t.add_argument("--patience", type=int, default=optim.PATIENCE, help="validation patience in epochs")
    t.add_argument("--lr", type=float, default=optim.LEARNING_RATE, help="learning rate")
    t.add_argument("--lr-decay", type=float, default=1.0, help="multiplicative learning-rate decay per epoch")
    t.add_argument("--momentum", type=float, default=optim.MOMENTUM, help="SGD momentum")
    t.add_argument("--l2", type=float, default=optim.L2, help="L2 regularisation on kernels")
    t.add_argument("--l1", type=float, default=0.0, help="L1 regularisation on kernels")
    t.add_argument("--batch", type=int, default=1, help="mini-batch size")
    t.add_argument("--init", default="scratch", help="scratch or transfer:PATH")
    t.add_argument("--size", type=_size, default="360x480", help="working resolution HxW")
    t.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out a validation split; 0 validates on the test split")
    t.add_argument("--test-fraction", type=float, default=0.3, help="test share of the split")
    t.add_argument("--upsampling", choices=("transposed", "bilinear"), default="transposed", help="decoder upsampling")
    t.add_argument("--class-weights", choices=("median", "inverse"), default="median", help="class-weight balancing")
    t.add_argument("--no-augment", action="store_true", help="disable on-the-fly geometric augmentation")
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", choices=("test", "train", "validation", "all"), default="all", help="which part of the dataset to score")
    e.add_argument("--seed", type=int, default=0, help="split seed")
    e.add_argument("--test-fraction", type=float, default=0.3, help="test share of the split")
    e.add_argument("--size", type=_size, default="360x480", help="working resolution HxW")
    e.add_argument("--tolerance", type=int, default=None, help="BF1 tolerance in pixels (default 0.75%% of diagonal)")
    e.add_argument("--aggregate", choices=("macro", "micro"), default="macro", help="per-image (macro) or pooled (micro) averages")
    e.add_argument("--out", required=True, help="metrics CSV path; confusion goes next to it")

    r = sub.add_parser("predict", help="segment one image", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--image", required=True, help="input image")
    r.add_argument("--seed", type=int, default=0, help="unused; inference is deterministic")
    r.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("augment", help="materialise the cropped or fully augmented set", formatter_class=fmt)
    a.add_argument("--data", required=True, help="images to crop")
    a.add_argument("--passthrough", default=None, help="extra dataset appended uncropped")
    a.add_argument("--recipe", choices=("crop", "full"), required=True, help="crop: cropped set; full: crops plus filters and noise")
    a.add_argument("--crops", type=int, default=10, help="crops per image")
    a.add_argument("--min-lesion-frac", type=float, default=0.05, help="minimum lesion share per crop")
    a.add_argument("--size", type=_size, default="360x480", help="working resolution HxW")
    a.add_argument("--seed", type=int, default=0, help="crop and noise seed")
    a.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synth", help="write synthetic lesion images", formatter_class=fmt)
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--size", type=_size, default="96x96", help="image size HxW")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("report", help="merge valmetrics.csv of several runs", formatter_class=fmt)
    c.add_argument("--runs", nargs="+", required=True, help="run directories holding valmetrics.csv")
    c.add_argument("--seed", type=int, default=0, help="accepted for symmetry; report is deterministic")
    c.add_argument("--out", default="-", help="output CSV, - for stdout")
    return p


def _all_samples(root, size, seed, fractions=(1.0, 0.0)):
    ds = D.load_dataset(root, fractions, seed, size)
    for msg in ds.report.rejected:
        log.warning(msg)
    return ds


def cmd_train(args):
    fractions = (1 - args.val_fraction - args.test_fraction, args.val_fraction, args.test_fraction)
    cfg = T.RunConfig(
        arch=args.arch, data_root=args.data, seed=args.seed, epochs=args.epochs, batch=args.batch,
        lr=args.lr, momentum=args.momentum, l2=args.l2, l1=args.l1, lr_decay=args.lr_decay,
        patience=args.patience, augment=not args.no_augment, init=args.init, split=fractions,
        size=args.size, upsampling=args.upsampling, class_weight_mode=args.class_weights, out=args.out,
    )
    run = T.train(cfg)
    print(f"{run.stop_reason}; best epoch {run.best_epoch} (metric {run.best_metric:.4f})")


def cmd_eval(args):
    ckpt = W.load(args.ckpt)
    if args.split == "all":
        ds = _all_samples(args.data, args.size, args.seed)
        samples = ds.train
    else:
        ds = D.load_dataset(args.data, (1 - args.test_fraction, args.test_fraction), args.seed, args.size)
        samples = {"train": ds.train, "validation": ds.validation, "test": ds.test}[args.split]
    if not samples:
        raise DataError(f"no samples to evaluate under {args.data}")
    rep = T.evaluate(ckpt, samples, tolerance_px=args.tolerance, aggregate=args.aggregate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    M.write_csv(rep, out)
    M.write_confusion_csv(rep, out.with_name(out.stem + "_confusion.csv"))
    print(f"mean accuracy {rep.mean['accuracy']:.4f}, mean IoU {rep.mean['iou']:.4f}, mean BF1 {rep.mean['bf1']:.4f}")


def cmd_predict(args):
    T.predict(W.load(args.ckpt), args.image, args.out)


def cmd_augment(args):
    src = _all_samples(args.data, args.size, args.seed).train
    extra = _all_samples(args.passthrough, args.size, args.seed).train if args.passthrough else []
    if not src and not extra:
        raise DataError(f"no samples found under {args.data}")
    samples = D.crop_protocol(src, extra, args.crops, args.min_lesion_frac, args.seed, args.size)
    if args.recipe == "full":
        samples = D.expand_augmented(samples, D.AugmentConfig.full_recipe(), args.seed)
    D.save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_synth(args):
    samples = D.synth_lesion(args.n, args.size, make_rng(args.seed))
    D.save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


REPORT_FIELDS = ("acc_skin", "acc_lesion", "iou_skin", "iou_lesion", "bf1_skin", "bf1_lesion")


def cmd_report(args):
    rows = []
    for run in args.runs:
        path = Path(run) / "valmetrics.csv"
        if not path.is_file():
            raise DataError(f"{path} not found")
        with open(path, newline="") as fh:
            recs = list(csv.DictReader(fh))
        if not recs:
            continue
        best = max(recs, key=lambda r: float(r["metric"]))
        vals = {f: float(best[f]) for f in REPORT_FIELDS}
        rows.append([Path(run).name, best["epoch"], recs[-1]["epoch"], best["metric"]]
                    + [repr(vals[f]) for f in REPORT_FIELDS]
                    + [repr((vals["acc_skin"] + vals["acc_lesion"]) / 2),
                       repr((vals["iou_skin"] + vals["iou_lesion"]) / 2),
                       repr((vals["bf1_skin"] + vals["bf1_lesion"]) / 2)])
    header = ["run", "best_epoch", "last_epoch", "metric", *REPORT_FIELDS, "mean_acc", "mean_iou", "mean_bf1"]
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    with (nullcontext(fh) if fh is sys.stdout else fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "augment": cmd_augment, "synth": cmd_synth, "report": cmd_report}


def _thread_limit():
    v = os.environ.get("LESIONSEG_THREADS", "")
    if not v.isdigit() or int(v) < 1:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(v))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            COMMANDS[args.verb](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
