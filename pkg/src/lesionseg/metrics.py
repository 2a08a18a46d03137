"""Segmentation metrics with Background (label 0) pixels excluded.

Undefined rates (zero denominators) are reported as NaN and skipped by the
averages.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, ShapeError

CLASSES = (1, 2)
CLASS_NAMES = {1: "skin", 2: "lesion"}
NAN = float("nan")


@dataclass
class ConfusionMatrix:
    """counts[actual][predicted] over (Skin, Lesion); abstain[c] counts
    valid pixels of class c predicted as Background."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), np.int64))
    abstain: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))

    @property
    def valid_pixels(self):
        return int(self.counts.sum() + self.abstain.sum())

    def tp(self, c):
        i = c - 1
        return int(self.counts[i, i])

    def positives(self, c):
        i = c - 1
        return int(self.counts[i].sum() + self.abstain[i])

    def predicted(self, c):
        return int(self.counts[:, c - 1].sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.abstain + other.abstain)


def _check_pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def confusion(pred, truth):
    pred, truth = _check_pair(pred, truth)
    valid = truth > 0
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    cm = ConfusionMatrix()
    scored = p > 0
    np.add.at(cm.counts, (t[scored] - 1, p[scored] - 1), 1)
    cm.abstain += np.bincount(t[~scored] - 1, minlength=2)[:2]
    return cm


def _ratio(num, den):
    return num / den if den else NAN


def accuracy(cm):
    """Per-class ``TP/P`` plus unweighted and pixel-weighted means."""
    per = {c: _ratio(cm.tp(c), cm.positives(c)) for c in CLASSES}
    defined = [c for c in CLASSES if cm.positives(c) > 0]
    mean = float(np.mean([per[c] for c in defined])) if defined else NAN
    total = sum(cm.positives(c) for c in defined)
    weighted = _ratio(sum(cm.tp(c) for c in defined), total)
    return per, mean, weighted


def iou(pred, truth, c):
    pred, truth = _check_pair(pred, truth)
    valid = truth > 0
    p = (pred == c) & valid
    t = truth == c
    union = int((p | t).sum())
    return _ratio(int((p & t).sum()), union)


def iou_from_confusion(cm, c):
    i = c - 1
    tp = cm.tp(c)
    fp = int(cm.counts[:, i].sum()) - tp
    fn = cm.positives(c) - tp
    return _ratio(tp, tp + fp + fn)


def precision_recall_f1(cm, c):
    i = c - 1
    tp = cm.tp(c)
    fp = int(cm.counts[:, i].sum()) - tp
    fn = cm.positives(c) - tp
    ppv = _ratio(tp, tp + fp)
    tpr = _ratio(tp, tp + fn)
    return ppv, tpr, harmonic_mean(ppv, tpr)


def harmonic_mean(a, b):
    if math.isnan(a) or math.isnan(b) or a + b == 0:
        return NAN
    return 2 * a * b / (a + b)


# ---------------------------------------------------------------- boundary F1


def boundary(mask):
    """Mask pixels with a 4-neighbour outside the mask or on the image edge."""
    mask = np.asarray(mask, bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def default_tolerance(shape):
    return int(math.ceil(0.0075 * math.hypot(*shape[:2])))


def _matched_fraction(src, dst, tol):
    """Fraction of ``src`` pixels within Euclidean ``tol`` of some ``dst`` pixel."""
    dist = ndimage.distance_transform_edt(~dst)
    return float((dist[src] <= tol).mean())


def boundary_scores(pred, truth, c, tolerance_px=None):
    """``(precision, recall, F1)`` of class-``c`` contours."""
    pred, truth = _check_pair(pred, truth)
    if tolerance_px is None:
        tolerance_px = default_tolerance(truth.shape)
    if tolerance_px < 0:
        raise InvalidArgumentError("tolerance must be >= 0")
    valid = truth > 0
    pb = boundary((pred == c) & valid)
    tb = boundary(truth == c)
    np_, nt = int(pb.sum()), int(tb.sum())
    if np_ == 0 and nt == 0:
        return 1.0, 1.0, 1.0
    if np_ == 0 or nt == 0:
        return 0.0, 0.0, 0.0
    precision = _matched_fraction(pb, tb, tolerance_px)
    recall = _matched_fraction(tb, pb, tolerance_px)
    f1 = harmonic_mean(precision, recall)
    return precision, recall, 0.0 if math.isnan(f1) else f1


def boundary_f1(pred, truth, c, tolerance_px=None):
    return boundary_scores(pred, truth, c, tolerance_px)[2]


# ---------------------------------------------------------------- reports

FIELDS = ("accuracy", "iou", "ppv", "tpr", "f1", "bf1")


@dataclass
class MetricsReport:
    per_class: dict
    mean: dict
    weighted: dict
    confusion: ConfusionMatrix
    per_image: list = field(default_factory=list)

    @property
    def mean_accuracy(self):
        return self.mean["accuracy"]

    @property
    def mean_iou(self):
        return self.mean["iou"]


def image_metrics(pred, truth, tolerance_px=None):
    cm = confusion(pred, truth)
    row = {}
    acc, _, _ = accuracy(cm)
    for c in CLASSES:
        ppv, tpr, f1 = precision_recall_f1(cm, c)
        row[c] = {
            "accuracy": acc[c],
            "iou": iou_from_confusion(cm, c),
            "ppv": ppv,
            "tpr": tpr,
            "f1": f1,
            "bf1": boundary_f1(pred, truth, c, tolerance_px),
        }
    return cm, row


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else NAN


def report(pairs, tolerance_px=None, aggregate="macro"):
    """Per-image metrics over ``(source_id, pred, truth)`` triples.

    Aggregates are macro averages over images by default; with
    ``aggregate="micro"`` the rate metrics come from the summed confusion
    matrix instead (BF1 stays a per-image average).
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("report needs at least one prediction/truth pair")
    pairs.sort(key=lambda t: str(t[0]))
    total = ConfusionMatrix()
    per_image = []
    for sid, pred, truth in pairs:
        cm, row = image_metrics(pred, truth, tolerance_px)
        total = total + cm
        per_image.append((str(sid), row, cm))
    per_class = {c: {f: _nanmean([r[c][f] for _, r, _ in per_image]) for f in FIELDS} for c in CLASSES}
    if aggregate == "micro":
        acc, _, _ = accuracy(total)
        for c in CLASSES:
            ppv, tpr, f1 = precision_recall_f1(total, c)
            per_class[c].update(accuracy=acc[c], iou=iou_from_confusion(total, c), ppv=ppv, tpr=tpr, f1=f1)
    elif aggregate != "macro":
        raise InvalidArgumentError(f"unknown aggregation {aggregate!r}")
    mean = {f: _nanmean([per_class[c][f] for c in CLASSES]) for f in FIELDS}
    pos = {c: total.positives(c) for c in CLASSES}
    wsum = sum(pos[c] for c in CLASSES if not math.isnan(per_class[c]["accuracy"]))
    weighted = {
        f: (sum(pos[c] * per_class[c][f] for c in CLASSES if not math.isnan(per_class[c][f])) / wsum
            if wsum else NAN)
        for f in FIELDS
    }
    return MetricsReport(per_class, mean, weighted, total, per_image)


def _fmt(v):
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_csv(rep, path):
    """``source_id,class,accuracy,iou,ppv,tpr,f1,bf1`` rows plus AGGREGATE rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("source_id", "class") + FIELDS)
        for sid, row, _ in rep.per_image:
            for c in CLASSES:
                w.writerow([sid, CLASS_NAMES[c]] + [_fmt(row[c][f]) for f in FIELDS])
        for c in CLASSES:
            w.writerow(["AGGREGATE", CLASS_NAMES[c]] + [_fmt(rep.per_class[c][f]) for f in FIELDS])
        w.writerow(["AGGREGATE", "mean"] + [_fmt(rep.mean[f]) for f in FIELDS])


def write_confusion_csv(rep, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("source_id", "actual", "pred_skin", "pred_lesion", "abstain"))
        rows = [(sid, cm) for sid, _, cm in rep.per_image] + [("AGGREGATE", rep.confusion)]
        for sid, cm in rows:
            for c in CLASSES:
                i = c - 1
                w.writerow([sid, CLASS_NAMES[c], int(cm.counts[i, 0]), int(cm.counts[i, 1]), int(cm.abstain[i])])
