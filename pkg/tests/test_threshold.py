import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duet.threshold import PRPoint, brier_score, curve_to_csv, default_grid, pr_curve, select_threshold
from oracles import prf_by_counting


def test_perfect_predictor():
    labels = np.array([0, 1, 1, 0, 1])
    (p,) = pr_curve(labels.astype(float), labels, [0.5])
    assert (p.precision, p.recall, p.f1) == (1.0, 1.0, 1.0)


def test_sentinel_threshold_predicts_nothing():
    (p,) = pr_curve([0.2, 0.9, 1.0], [1, 0, 1], [1.01])
    assert p.recall == 0.0 and p.f1 == 0.0 and p.precision == 1.0


def test_hand_enumerated_case():
    (p,) = pr_curve([0.9, 0.8, 0.3], [1, 0, 1], [0.5])
    assert (p.precision, p.recall, p.f1) == (0.5, 0.5, 0.5)


def test_needs_a_positive():
    with pytest.raises(ValueError):
        pr_curve([0.1, 0.2], [0, 0])


def test_select_singleton_and_ties():
    assert select_threshold([PRPoint(0.3, 1, 1, 0.7)]) == 0.3
    curve = [PRPoint(0.4, 0.5, 0.5, 0.5), PRPoint(0.6, 0.5, 0.5, 0.5), PRPoint(0.5, 0.2, 0.2, 0.2)]
    assert select_threshold(curve) == 0.6


def test_matches_brute_force_on_random_predictions():
    rng = np.random.default_rng(0)
    for trial in range(5):
        labels = (rng.random(1000) < 0.3).astype(int)
        probs = np.clip(labels * 0.3 + rng.random(1000) * 0.7, 0, 1)
        grid = default_grid()
        curve = pr_curve(probs, labels, grid)
        best_t, best_f1 = None, -1.0
        for t in grid:
            p, r, f1 = prf_by_counting(probs, labels, t)
            if f1 >= best_f1:
                best_t, best_f1 = t, f1
        assert select_threshold(curve) == best_t
        for point, t in zip(curve[::10], grid[::10]):
            p, r, f1 = prf_by_counting(probs, labels, t)
            assert (point.precision, point.recall) == pytest.approx((p, r), abs=1e-15)
            assert point.f1 == pytest.approx(f1, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=60))
def test_curve_properties(rows):
    probs = [p for p, _ in rows]
    labels = [y for _, y in rows]
    if sum(labels) == 0:
        labels[0] = 1
    curve = pr_curve(probs, labels)
    recalls = [p.recall for p in curve]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    for p in curve:
        want = 0.0 if p.precision + p.recall == 0 else 2 * p.precision * p.recall / (p.precision + p.recall)
        assert p.f1 == pytest.approx(want)
        assert 0 <= p.f1 <= 1
    doubled = pr_curve(probs * 2, labels * 2)
    assert select_threshold(doubled) == select_threshold(curve)


def test_brier_and_csv():
    assert brier_score([1.0, 0.0, 0.5], [1, 1, 0]) == pytest.approx((0 + 1 + 0.25) / 3)
    text = curve_to_csv(pr_curve([0.9, 0.1], [1, 0], [0.0, 0.5]))
    assert text.splitlines()[0] == "threshold,precision,recall,f1,brier"
    assert len(text.splitlines()) == 3
