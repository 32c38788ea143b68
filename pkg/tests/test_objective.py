import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rorkit.objective import (
    LOSS_WEIGHT_PRESETS,
    LabelSpace,
    LossWeights,
    confusion_matrix,
    exact_accuracy,
    fold_summary,
    format_mean_std,
    metric_record,
    one_off_accuracy,
    per_sample_cross_entropy,
    weighted_cross_entropy,
)
from rorkit.tensor import ShapeError, Tape, Tensor, backward, finite_diff_check, precision


def wce(z, y, w=None, reduction="mean"):
    return weighted_cross_entropy(Tensor(np.asarray(z, dtype=np.float64), dtype=np.float64), y,
                                  None if w is None else LossWeights(w), reduction)


def test_hand_example_ln2():
    with precision(np.float64):
        z = [[0.0, 0.0], [0.0, 0.0]]
        assert wce(z, [1, 2]).item() == pytest.approx(math.log(2), abs=1e-12)
        assert wce(z, [1, 2], (2, 1)).item() == pytest.approx(1.5 * math.log(2), abs=1e-12)


def test_lw0_matches_unweighted():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(32, 8)) * 3
    y = rng.integers(1, 9, size=32)
    with precision(np.float64):
        ref = per_sample_cross_entropy(z, y)
        got = wce(z, y, LOSS_WEIGHT_PRESETS["LW0"], "none").data
        assert np.max(np.abs(got - ref)) <= 1e-12
        assert wce(z, y).item() == pytest.approx(ref.mean(), abs=1e-12)


def test_lw3_scales_class5_loss():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 8))
    y = np.full(6, 5)
    with precision(np.float64):
        a = wce(z, y, reduction="none").data
        b = weighted_cross_entropy(Tensor(z, dtype=np.float64), y, LossWeights.preset("LW3"), "none").data
    np.testing.assert_allclose(b, 1.5 * a, rtol=1e-12)


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_uniform_weights_scale_loss(c):
    rng = np.random.default_rng(2)
    z = rng.normal(size=(10, 8))
    y = rng.integers(1, 9, size=10)
    with precision(np.float64):
        base = wce(z, y).item()
        assert wce(z, y, (c,) * 8).item() == pytest.approx(c * base, rel=1e-12)


def test_gradient_scales_with_sample_weight():
    z = np.array([[0.3, -1.2, 0.5]])
    grads = {}
    with precision(np.float64):
        for w in (1.0, 1.5):
            t = Tensor(z, dtype=np.float64, requires_grad=True)
            with Tape():
                loss = weighted_cross_entropy(t, [2], LossWeights((1.0, w, 1.0)))
            backward(loss)
            grads[w] = t.grad.copy()
    np.testing.assert_allclose(grads[1.5], 1.5 * grads[1.0], rtol=1e-12)
    # softmax minus one-hot
    p = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(grads[1.0], p - np.array([[0, 1, 0]]), rtol=1e-12)


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 8))
    y = rng.integers(1, 9, size=5)
    w = LossWeights.preset("LW3")
    report = finite_diff_check(lambda t: weighted_cross_entropy(t, y, w), [Tensor(z, requires_grad=True, dtype=np.float64)], 1e-6)
    assert report.passed and report.checked == z.size


def test_loss_rejects_bad_input():
    with precision(np.float64):
        with pytest.raises(ValueError, match="non-finite"):
            wce([[np.nan, 0.0]], [1])
        with pytest.raises(ValueError):
            wce([[0.0, 0.0]], [3])
        with pytest.raises(ShapeError):
            wce([[0.0, 0.0]], [1, 2])
        with pytest.raises(ShapeError):
            wce([[0.0, 0.0]], [1], (1, 1, 1))


def test_loss_weights_parse():
    assert LossWeights.parse("lw3").weights == LOSS_WEIGHT_PRESETS["LW3"]
    assert LossWeights.parse("1, 2,3").weights == (1.0, 2.0, 3.0)
    assert LossWeights.parse("1,2.5").format() == "1,2.5"
    for bad in ("a,b", "1,-1", "0"):
        with pytest.raises(ValueError):
            LossWeights.parse(bad)


# -- metrics --------------------------------------------------------------------

def test_metric_examples():
    assert exact_accuracy([1, 2, 3, 4], [1, 2, 4, 6]) == 0.5
    assert one_off_accuracy([1, 2, 3, 4], [1, 2, 4, 6]) == 0.75
    assert one_off_accuracy([1, 8], [2, 7]) == 1.0
    with pytest.raises(ValueError):
        one_off_accuracy([1], [1], LabelSpace(2, ordered=False))
    with pytest.raises(ValueError):
        exact_accuracy([], [])
    with pytest.raises(ValueError):
        exact_accuracy([1, 2], [1])


def test_metrics_brute_force():
    rng = np.random.default_rng(4)
    p = rng.integers(1, 9, size=10_000)
    t = rng.integers(1, 9, size=10_000)
    exact = sum(int(a == b) for a, b in zip(p, t)) / len(p)
    near = sum(int(abs(int(a) - int(b)) <= 1) for a, b in zip(p, t)) / len(p)
    assert exact_accuracy(p, t) == exact
    assert one_off_accuracy(p, t) == near


@given(arrays(np.int64, st.integers(1, 50), elements=st.integers(1, 8)), st.data())
def test_one_off_at_least_exact_and_confusion_trace(p, data):
    t = data.draw(arrays(np.int64, p.shape, elements=st.integers(1, 8)))
    assert one_off_accuracy(p, t) >= exact_accuracy(p, t)
    m = confusion_matrix(p, t, 8)
    assert m.sum() == p.size
    assert np.trace(m) / m.sum() == pytest.approx(exact_accuracy(p, t))


def test_confusion_cases():
    m = confusion_matrix([1, 2, 3], [1, 2, 3], 3)
    np.testing.assert_array_equal(m, np.eye(3, dtype=int))
    m = confusion_matrix([5], [2], 8)
    assert m[1, 4] == 1 and m.sum() == 1
    with pytest.raises(ValueError):
        confusion_matrix([9], [1], 8)


def test_metric_record_unordered():
    rec = metric_record([1, 2], [2, 2], 2, ordered=False)
    assert rec["one_off"] is None and rec["exact"] == 0.5
    assert rec["confusion"] == [[0, 0], [1, 1]]  # rows are true labels


def test_fold_summary():
    vals = (0.6, 0.62, 0.64, 0.58, 0.66)
    mean, std = fold_summary(vals)
    assert mean == pytest.approx(0.62, abs=1e-12)
    assert std == pytest.approx(0.0316, abs=1e-4)
    assert format_mean_std(vals) == "62.00±3.16"
    assert fold_summary([0.5]) == (0.5, 0.0)
