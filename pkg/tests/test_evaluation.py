import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlab import evaluation, nnet
from mtlab.evaluation import Detection, DegenerateBoxWarning
from mtlab.nnet import ForwardOutput
from mtlab.synthgen import DEFAULT_DOMAINS, generate_split


def test_iou_cases():
    a = (0.5, 0.5, 0.2, 0.2)
    assert evaluation.iou(a, a) == pytest.approx(1.0)
    assert evaluation.iou(a, (0.9, 0.9, 0.1, 0.1)) == 0.0
    # unit squares offset by half a width: overlap 0.5, union 1.5
    assert evaluation.iou((0.0, 0.0, 1.0, 1.0), (0.5, 0.0, 1.0, 1.0)) == pytest.approx(1 / 3)


def test_iou_zero_area_warns():
    with pytest.warns(DegenerateBoxWarning):
        assert evaluation.iou((0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 0.1)) == 0.0


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.random((5, 2)), 0.05 + 0.3 * rng.random((5, 2))])
    b = np.column_stack([rng.random((4, 2)), 0.05 + 0.3 * rng.random((4, 2))])
    m = evaluation.iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(evaluation.iou(a[i], b[j]))


def _bg_output(n=16):
    probs = np.zeros((1, n, 4))
    probs[..., -1] = 1.0
    return ForwardOutput(probs, np.zeros((1, n, 4)))


def test_decode_all_background_empty():
    assert evaluation.decode(_bg_output()) == []


def _width_for_iou(target):
    # same-height boxes shifted horizontally by s: iou = (w - s) / (w + s)
    w = 0.2
    return w, w * (1 - target) / (1 + target)


@pytest.mark.parametrize("target_iou,survivors", [(0.9, 1), (0.3, 2)])
def test_nms_pairs(target_iou, survivors):
    w, shift = _width_for_iou(target_iou)
    a = Detection((0.5, 0.5, w, w), 1, 0.9)
    b = Detection((0.5 + shift, 0.5, w, w), 1, 0.8)
    assert evaluation.iou(a.box, b.box) == pytest.approx(target_iou)
    kept = evaluation.nms([b, a])
    assert len(kept) == survivors
    assert kept[0] is a


def test_nms_other_class_survives():
    a = Detection((0.5, 0.5, 0.2, 0.2), 0, 0.9)
    b = Detection((0.5, 0.5, 0.2, 0.2), 1, 0.8)
    assert len(evaluation.nms([a, b])) == 2


def test_nms_tie_break_by_index():
    a = Detection((0.5, 0.5, 0.2, 0.2), 0, 0.7)
    b = Detection((0.51, 0.5, 0.2, 0.2), 0, 0.7)
    assert evaluation.nms([a, b]) == [a]
    assert evaluation.nms([b, a]) == [b]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_decode_nms_idempotent(seed):
    rng = np.random.default_rng(seed)
    params = nnet.init_params(rng)
    img = rng.random((1, 32, 32, 3))
    dets = evaluation.decode(nnet.forward(params, img), score_floor=0.0)
    assert evaluation.nms(dets) == dets


def test_ap_perfect_and_empty():
    gts = {0: [(0.3, 0.3, 0.1, 0.1)], 1: [(0.6, 0.6, 0.2, 0.2), (0.2, 0.7, 0.1, 0.1)]}
    dets = [(i, 0.9 - 0.1 * j, b) for i, bs in gts.items() for j, b in enumerate(bs)]
    assert evaluation.average_precision(dets, gts) == pytest.approx(1.0)
    assert evaluation.average_precision([], gts) == 0.0
    assert np.isnan(evaluation.average_precision([], {0: []}))


def test_ap_fp_then_tp_is_half():
    gt = (0.5, 0.5, 0.2, 0.2)
    dets = [(0, 0.9, (0.1, 0.1, 0.1, 0.1)), (0, 0.8, gt)]
    # PR points: (r=0, p=0) then (r=1, p=0.5); envelope 0.5 over recall [0, 1]
    assert evaluation.average_precision(dets, {0: [gt]}) == pytest.approx(0.5)


def test_ap_duplicate_is_false_positive():
    gt = (0.5, 0.5, 0.2, 0.2)
    dets = [(0, 0.9, gt), (0, 0.8, gt)]
    assert evaluation.average_precision(dets, {0: [gt]}) == pytest.approx(1.0)
    dets = [(0, 0.9, gt), (0, 0.8, gt)]
    gts = {0: [gt], 1: [gt]}
    assert evaluation.average_precision(dets, gts) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_bounds_and_tie_permutation(seed):
    rng = np.random.default_rng(seed)
    gts = {i: [tuple(np.r_[rng.random(2), 0.1 + 0.2 * rng.random(2)])
               for _ in range(rng.integers(0, 3))] for i in range(4)}
    dets = []
    for i in range(4):
        for _ in range(rng.integers(0, 4)):
            box = tuple(np.r_[rng.random(2), 0.1 + 0.2 * rng.random(2)])
            dets.append((i, float(rng.choice([0.3, 0.6, 0.9])), box))
        for b in gts[i]:
            if rng.random() < 0.5:
                dets.append((i, float(rng.choice([0.3, 0.6, 0.9])), b))
    ap = evaluation.average_precision(dets, gts)
    if sum(len(v) for v in gts.values()) == 0:
        assert np.isnan(ap)
        return
    assert 0.0 <= ap <= 1.0
    # stable sort on (-score, index): re-listing in the tie-broken order changes nothing
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    assert evaluation.average_precision([dets[i] for i in order], gts) == ap


def test_evaluate_end_to_end_shapes():
    scenes = generate_split(DEFAULT_DOMAINS["s1"], 20, 900)
    params = nnet.init_params(np.random.default_rng(0))
    per_class, m = evaluation.evaluate(params, scenes)
    assert set(per_class) == {0, 1, 2}
    assert 0.0 <= m <= 1.0
