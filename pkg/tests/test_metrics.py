import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from oracles import blob_pair, metric_pair, random_pair
from lesionseg import metrics as M
from lesionseg.errors import InvalidArgumentError, ShapeError


def same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def square(n, top, left, side):
    m = np.ones((n, n), np.uint8)
    m[top:top + side, left:left + side] = 2
    return m


# ---------------------------------------------------------------- confusion / accuracy

def test_confusion_examples():
    truth = np.array([[1, 2], [2, 1]], np.uint8)
    cm = M.confusion(truth, truth)
    assert cm.counts.tolist() == [[2, 0], [0, 2]]
    cm = M.confusion(truth, np.zeros((2, 2), np.uint8))
    assert cm.valid_pixels == 0 and not cm.counts.any()
    pred = np.array([[1, 1, 2, 0], [2, 2, 2, 1], [1, 0, 1, 1], [2, 1, 2, 2]], np.uint8)
    truth = np.array([[1, 2, 2, 1], [0, 2, 1, 1], [1, 1, 0, 2], [2, 2, 2, 0]], np.uint8)
    cm = M.confusion(pred, truth)
    counts, abstain = oracles.confusion(pred.tolist(), truth.tolist())
    assert cm.counts.tolist() == counts == [[3, 1], [3, 4]]
    assert cm.abstain.tolist() == abstain == [2, 0]
    assert cm.valid_pixels == 13
    with pytest.raises(ShapeError):
        M.confusion(pred, truth[:3])


def test_accuracy_example():
    cm = M.ConfusionMatrix(np.array([[8, 2], [2, 3]]), np.zeros(2, np.int64))
    per, mean, weighted = M.accuracy(cm)
    assert per == {1: 0.8, 2: 0.6}
    assert math.isclose(mean, 0.7) and math.isclose(weighted, 11 / 15)
    per, mean, _ = M.accuracy(M.ConfusionMatrix(np.array([[5, 0], [0, 0]]), np.zeros(2, np.int64)))
    assert per[1] == 1.0 and math.isnan(per[2]) and mean == 1.0


def test_prf_examples():
    cm = M.ConfusionMatrix(np.array([[8, 2], [2, 8]]), np.zeros(2, np.int64))
    assert M.precision_recall_f1(cm, 2) == pytest.approx((0.8, 0.8, 0.8))
    cm = M.ConfusionMatrix(np.array([[3, 5], [0, 0]]), np.zeros(2, np.int64))
    ppv, tpr, f1 = M.precision_recall_f1(cm, 2)
    assert ppv == 0.0 and math.isnan(tpr) and math.isnan(f1)
    ppv, tpr, f1 = M.precision_recall_f1(M.ConfusionMatrix(np.array([[0, 0], [5, 0]]), np.zeros(2, np.int64)), 2)
    assert math.isnan(ppv) and tpr == 0.0
    assert M.harmonic_mean(0.3, 0.3) == pytest.approx(0.3)


def test_iou_examples():
    a = square(8, 1, 1, 4)
    assert M.iou(a, a, 2) == 1.0
    assert M.iou(square(8, 0, 0, 2), square(8, 5, 5, 2), 2) == 0.0
    assert math.isnan(M.iou(np.ones((3, 3), np.uint8), np.ones((3, 3), np.uint8), 2))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, t = random_pair(rng, (8, 8))
        assert same(M.iou(p, t, 2), oracles.iou(p.tolist(), t.tolist(), 2))


def test_metric_oracles_500_pairs():
    rng = np.random.default_rng(1)
    for _ in range(500):
        p, t = metric_pair(rng)
        pl, tl = p.tolist(), t.tolist()
        cm = M.confusion(p, t)
        counts, abstain = oracles.confusion(pl, tl)
        assert cm.counts.tolist() == counts and cm.abstain.tolist() == abstain
        for c in (1, 2):
            assert same(M.iou(p, t, c), oracles.iou(pl, tl, c))
            assert same(M.iou_from_confusion(cm, c), oracles.iou(pl, tl, c))
            for a, b in zip(M.precision_recall_f1(cm, c), oracles.prf(pl, tl, c)):
                assert same(a, b)


# ---------------------------------------------------------------- boundary F1

def test_boundary_definition():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = M.boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    assert M.boundary(np.ones((3, 3), bool)).sum() == 8


def test_bf1_examples():
    a = square(32, 8, 8, 12)
    assert M.boundary_f1(a, a, 2, 2) == 1.0
    assert M.boundary_f1(square(32, 9, 8, 12), a, 2, 2) == 1.0
    shifted = square(32, 13, 8, 12)
    v = M.boundary_f1(shifted, a, 2, 2)
    assert v < 1.0
    assert v == pytest.approx(oracles.bf1(shifted.tolist(), a.tolist(), 2, 2), abs=1e-12)
    empty = np.ones((8, 8), np.uint8)
    assert M.boundary_f1(empty, empty, 2, 1) == 1.0
    assert M.boundary_f1(square(8, 2, 2, 3), empty, 2, 1) == 0.0
    with pytest.raises(InvalidArgumentError):
        M.boundary_f1(a, a, 2, -1)


def test_default_tolerance():
    assert M.default_tolerance((360, 480)) == 5
    assert M.default_tolerance((96, 96)) == 2
    assert M.default_tolerance((32, 32)) == 1


def test_bf1_oracle_100_pairs():
    rng = np.random.default_rng(2)
    for k in range(100):
        p, t = blob_pair(rng, (32, 32), k)
        tol = int(rng.integers(0, 4))
        for c in (1, 2):
            got = M.boundary_f1(p, t, c, tol)
            assert got == pytest.approx(oracles.bf1(p.tolist(), t.tolist(), c, tol), abs=1e-12)


# ---------------------------------------------------------------- invariants

labels16 = hnp.arrays(np.uint8, (12, 12), elements=st.integers(0, 2))


@settings(max_examples=60, deadline=None)
@given(labels16, labels16)
def test_iou_le_accuracy(p, t):
    p = np.where(p == 0, 1, p).astype(np.uint8)
    cm = M.confusion(p, t)
    acc, _, _ = M.accuracy(cm)
    for c in (1, 2):
        v = M.iou(p, t, c)
        if not math.isnan(acc[c]):
            assert v <= acc[c] + 1e-12


@settings(max_examples=60, deadline=None)
@given(labels16, labels16, st.integers(0, 2**31 - 1))
def test_confusion_permutation_invariant(p, t, seed):
    perm = np.random.default_rng(seed).permutation(p.size)
    a = M.confusion(p, t)
    b = M.confusion(p.ravel()[perm].reshape(3, 48), t.ravel()[perm].reshape(3, 48))
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.abstain, b.abstain)


@settings(max_examples=60, deadline=None)
@given(labels16, labels16, st.integers(0, 3))
def test_bf1_symmetric(p, t, tol):
    # both maps share the same background so swapping is meaningful
    bg = t == 0
    p = np.where(bg, 0, np.where(p == 0, 1, p)).astype(np.uint8)
    for c in (1, 2):
        pa, ra, fa = M.boundary_scores(p, t, c, tol)
        pb, rb, fb = M.boundary_scores(t, p, c, tol)
        assert (pa, ra) == (rb, pb)
        assert fa == pytest.approx(fb)


@settings(max_examples=60, deadline=None)
@given(labels16, labels16, labels16)
def test_background_content_is_ignored(p, t, noise):
    bg = t == 0
    q = np.where(bg, noise, p).astype(np.uint8)
    a = M.report([("x", p, t)], tolerance_px=1)
    b = M.report([("x", q, t)], tolerance_px=1)
    for c in (1, 2):
        for f in M.FIELDS:
            assert same(a.per_class[c][f], b.per_class[c][f])


# ---------------------------------------------------------------- reports

def test_report_perfect_and_idempotent():
    rng = np.random.default_rng(3)
    _, t = random_pair(rng, (16, 16))
    t[0, 0], t[0, 1] = 1, 2
    rep = M.report([("a", t, t)])
    assert all(rep.mean[f] == 1.0 for f in M.FIELDS)
    pairs = [(f"s{i}", *random_pair(rng, (16, 16))) for i in range(4)]
    one = M.report(pairs, 1)
    two = M.report(pairs + pairs, 1)
    for f in M.FIELDS:
        assert one.mean[f] == pytest.approx(two.mean[f])


def test_report_two_images_hand_counted():
    t1 = np.array([[1, 1, 2, 2]], np.uint8)
    p1 = np.array([[1, 2, 2, 2]], np.uint8)     # skin acc 0.5, lesion acc 1
    t2 = np.array([[1, 2, 2, 2]], np.uint8)
    p2 = np.array([[1, 1, 1, 2]], np.uint8)     # skin acc 1, lesion acc 1/3
    rep = M.report([("b", p2, t2), ("a", p1, t1)], tolerance_px=0)
    assert rep.per_class[1]["accuracy"] == pytest.approx(0.75)
    assert rep.per_class[2]["accuracy"] == pytest.approx((1 + 1 / 3) / 2)
    assert rep.per_class[2]["iou"] == pytest.approx((2 / 3 + 1 / 3) / 2)
    assert [sid for sid, _, _ in rep.per_image] == ["a", "b"]
    micro = M.report([("a", p1, t1), ("b", p2, t2)], tolerance_px=0, aggregate="micro")
    assert micro.per_class[2]["accuracy"] == pytest.approx(3 / 5)
    with pytest.raises(InvalidArgumentError):
        M.report([])
    with pytest.raises(InvalidArgumentError):
        M.report([("a", p1, t1)], aggregate="median")


def test_csv_output(tmp_path):
    rng = np.random.default_rng(4)
    rep = M.report([(f"s{i}", *random_pair(rng, (8, 8))) for i in range(3)], 1)
    M.write_csv(rep, tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["source_id", "class", "accuracy", "iou", "ppv", "tpr", "f1", "bf1"]
    assert len(rows) == 1 + 3 * 2 + 3
    assert rows[-1][:2] == ["AGGREGATE", "mean"]
    M.write_confusion_csv(rep, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    total = sum(int(r[2]) + int(r[3]) + int(r[4]) for r in rows[1:] if r[0] == "AGGREGATE")
    assert total == rep.confusion.valid_pixels
