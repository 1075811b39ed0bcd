import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from killchain.data import BoundingBox
from killchain.metrics import agreement_rate, iou, iou_arrays, mean_iou, rank_classes, topk_accuracy


def raster_iou(a, b, res=1000):
    """Oracle: count pixel centers covered by each box on a res x res grid."""
    t = (np.arange(res) + 0.5) / res
    def mask(bx):
        mx = (t >= bx[0]) & (t < bx[2])
        my = (t >= bx[1]) & (t < bx[3])
        return np.outer(my, mx)
    ma, mb = mask(a), mask(b)
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else 0.0


def random_box(rng):
    x = np.sort(rng.uniform(0, 1, 2))
    y = np.sort(rng.uniform(0, 1, 2))
    return BoundingBox(x[0], y[0], max(x[1], x[0] + 1e-3), max(y[1], y[0] + 1e-3))


def test_iou_known_values():
    a = BoundingBox(0.0, 0.0, 0.5, 0.5)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(0.5, 0.0, 1.0, 0.5)) == 0.0  # touching edges
    assert iou(a, BoundingBox(0.25, 0.0, 0.75, 0.5)) == pytest.approx(1 / 3)
    assert iou(BoundingBox(0.0, 0.0, 1.0, 1.0), BoundingBox(0.0, 0.0, 0.5, 0.5)) == pytest.approx(0.25)


def test_iou_matches_rasterization(rng):
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        assert abs(iou(a, b) - raster_iou(a.as_tuple(), b.as_tuple())) < 1e-2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_iou_properties(v):
    xs = sorted(v[0:2]); ys = sorted(v[2:4]); xs2 = sorted(v[4:6]); ys2 = sorted(v[6:8])
    if xs[1] - xs[0] < 1e-6 or ys[1] - ys[0] < 1e-6 or xs2[1] - xs2[0] < 1e-6 or ys2[1] - ys2[0] < 1e-6:
        return
    a = BoundingBox(xs[0], ys[0], xs[1], ys[1])
    b = BoundingBox(xs2[0], ys2[0], xs2[1], ys2[1])
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert iou(a, a) == pytest.approx(1.0)
    arr = iou_arrays([a.as_tuple()], [b.as_tuple()])[0]
    assert arr == pytest.approx(iou(a, b), abs=1e-12)


def test_iou_arrays_shape_checks():
    with pytest.raises(ValueError):
        iou_arrays(np.zeros((2, 4)), np.zeros((3, 4)))
    assert mean_iou(np.zeros((0, 4)), np.zeros((0, 4))) == 0.0


def brute_topk(preds, labels, k):
    hits = 0
    for row, lab in zip(preds, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += lab in order[:k]
    return hits / len(labels)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_topk_matches_brute_force(n, c, seed):
    r = np.random.default_rng(seed)
    preds = r.integers(0, 4, size=(n, c)).astype(float)  # many ties
    labels = r.integers(0, c, size=n)
    for k in range(1, c + 1):
        assert topk_accuracy(preds, labels, k) == pytest.approx(brute_topk(preds, labels, k))
    assert topk_accuracy(preds, labels, c) == 1.0


def test_topk_monotone_in_k(rng):
    preds = rng.random((50, 6))
    labels = rng.integers(0, 6, 50)
    accs = [topk_accuracy(preds, labels, k) for k in range(1, 7)]
    assert all(a <= b for a, b in itertools.pairwise(accs))


def test_topk_validation():
    with pytest.raises(ValueError):
        topk_accuracy(np.zeros((2, 3)), [0, 1], 4)
    with pytest.raises(ValueError):
        topk_accuracy(np.zeros((2, 3)), [0], 1)


def test_rank_ties_prefer_lower_index():
    assert rank_classes(np.array([0.2, 0.4, 0.4, 0.0])).tolist() == [1, 2, 0, 3]


def test_agreement_rate():
    assert agreement_rate([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75
    with pytest.raises(ValueError):
        agreement_rate([1], [1, 2])
