import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mtlab.nnet import ForwardOutput
from mtlab.pseudolabel import (DegenerateSharpenWarning, UsageError, build_targets,
                               hard_threshold, refine_weak, sharpen)

K = 3


def simplex(n_rows=1):
    raw = arrays(np.float64, (n_rows, K + 1), elements=st.floats(1e-3, 1.0))
    return raw.map(lambda a: a / a.sum(axis=-1, keepdims=True))


weak_labels = st.frozensets(st.integers(0, K - 1))


def _output(probs):
    probs = np.asarray(probs, dtype=np.float64).reshape(1, -1, K + 1)
    return ForwardOutput(probs, np.arange(probs.shape[1] * 4, dtype=float).reshape(1, -1, 4))


def test_refine_example():
    out = refine_weak([0.5, 0.3, 0.1, 0.1], {0})
    assert np.allclose(out, [0.5, 0.0, 0.0, 0.1])


def test_refine_all_classes_is_noop():
    p = np.array([0.2, 0.3, 0.4, 0.1])
    assert np.array_equal(refine_weak(p, {0, 1, 2}), p)


def test_refine_empty_keeps_only_background():
    p = np.array([0.2, 0.3, 0.4, 0.1])
    assert np.array_equal(refine_weak(p, set()), [0, 0, 0, 0.1])
    pls = build_targets(_output(p), "ws-soft", [frozenset()])
    assert pls.targets.target_dist[0, 0].argmax() == K
    assert pls.confidence.max() == 0.0


@settings(max_examples=200, deadline=None)
@given(simplex(5), weak_labels)
def test_refine_idempotent_and_sound(p, wl):
    once = refine_weak(p, wl)
    assert np.array_equal(refine_weak(once, wl), once)
    absent = [k for k in range(K) if k not in wl]
    assert np.all(once[:, absent] == 0.0)
    kept = [k for k in range(K) if k in wl] + [K]
    assert np.array_equal(once[:, kept], p[:, kept])
    assert np.all(once.sum(-1) <= p.sum(-1) + 1e-15)


def test_sharpen_example():
    out = sharpen(np.array([0.7, 0.2, 0.1]), 0.5)
    assert np.allclose(out, np.array([0.49, 0.04, 0.01]) / 0.54, atol=1e-12)
    assert np.allclose(out, [0.9074, 0.0741, 0.0185], atol=1e-4)


@pytest.mark.parametrize("T", [0.1, 0.5, 1.0, 3.0])
def test_sharpen_uniform_fixed(T):
    assert np.allclose(sharpen(np.full(4, 0.25), T), 0.25)


@settings(max_examples=200, deadline=None)
@given(simplex(4), st.floats(0.05, 5.0))
def test_sharpen_properties(p, T):
    out = sharpen(p, T)
    assert np.allclose(out.sum(-1), 1.0)
    # argmax preserved (ties aside)
    top2 = np.sort(p, axis=-1)[:, -2:]
    clear = top2[:, 1] - top2[:, 0] > 1e-9
    assert np.array_equal(out.argmax(-1)[clear], p.argmax(-1)[clear])
    assert np.allclose(sharpen(p, 1.0), p, atol=1e-12)


def test_sharpen_small_t_no_underflow():
    out = sharpen(np.array([1e-200, 2e-200, 0.0, 0.0]), 0.01)
    assert np.isfinite(out).all() and out[1] == pytest.approx(1.0)


def test_sharpen_all_zero_warns():
    with pytest.warns(DegenerateSharpenWarning):
        out = sharpen(np.zeros(4), 0.5)
    assert np.array_equal(out, [0, 0, 0, 1.0])


def test_hard_threshold_boundaries():
    pls = hard_threshold(_output([[0.9, 0.05, 0.0, 0.05], [0.79, 0.11, 0.0, 0.1]]), 0.8)
    assert pls.kept.tolist() == [[True, False]]
    assert pls.confidence[0, 0] == pytest.approx(0.9)
    assert pls.targets.target_dist[0, 0].tolist() == [1, 0, 0, 0]
    assert pls.targets.target_dist[0, 1].tolist() == [0, 0, 0, 1]


@settings(max_examples=50, deadline=None)
@given(simplex(100))
def test_threshold_monotone(p):
    out = _output(p)
    kept = [hard_threshold(out, tau).kept for tau in (0.5, 0.7, 0.9)]
    for lo, hi in zip(kept, kept[1:]):
        assert np.all(hi <= lo)


def test_raw_mode_is_field_for_field_copy():
    out = _output(np.full((3, 4), 0.25))
    pls = build_targets(out, "raw")
    assert pls.output is out
    assert pls.targets.target_dist is out.class_probs
    assert pls.targets.target_offsets is out.offsets


def test_ws_hard_empty_weak_label_is_background():
    out = _output([[0.95, 0.02, 0.02, 0.01]] * 4)
    pls = build_targets(out, "ws-hard", [frozenset()])
    assert not pls.kept.any()
    assert np.all(pls.targets.target_dist[..., -1] == 1.0)


def test_ws_vs_ss_on_absent_argmax():
    out = _output([[0.1, 0.7, 0.1, 0.1]])
    ss = build_targets(out, "ss-soft").targets.target_dist[0, 0]
    ws = build_targets(out, "ws-soft", [frozenset({0})]).targets.target_dist[0, 0]
    assert ss[1] > 0.5
    assert ws[1] == 0.0 and ws[2] == 0.0
    assert ws[0] > 0 and ws[3] > 0


def test_soft_targets_carry_confidence_weights():
    out = _output([[0.6, 0.1, 0.1, 0.2], [0.05, 0.05, 0.05, 0.85]])
    pls = build_targets(out, "ss-soft")
    conf = 1.0 - pls.targets.target_dist[..., -1]
    assert np.allclose(pls.targets.reg_weight, conf)
    assert np.array_equal(pls.targets.target_offsets, out.offsets)


def test_bad_mode_and_missing_weak_label():
    out = _output([[0.25] * 4])
    with pytest.raises(UsageError):
        build_targets(out, "nope")
    with pytest.raises(UsageError):
        build_targets(out, "ws-soft")


def test_no_warning_on_refined_zero_rows():
    # refinement can zero a cell entirely only if background is zero too
    out = _output([[0.5, 0.5, 0.0, 0.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pls = build_targets(out, "ws-soft", [frozenset({2})])
    assert pls.targets.target_dist[0, 0].tolist() == [0, 0, 0, 1.0]
