import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semanom.metrics import (ConfusionCounts, PRPoint, ScoredExample, aggregate_trials,
                             average_precision, average_precision_arrays, confusion_at,
                             pr_curve, read_scores_csv, scored_from_arrays, write_pr_csv,
                             write_scores_csv)

FOUR = scored_from_arrays([0.9, 0.8, 0.7, 0.6], [True, False, True, False])


def brute_force_ap(scores, flags):
    """Enumerate every distinct threshold and apply the weighted-precision sum directly."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    n_pos = flags.sum()
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        tp = fp = 0
        for s, f in zip(scores, flags):
            if s >= t:
                tp += f
                fp += not f
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos
        total += precision * (recall - prev_recall)
        prev_recall = recall
    return total


def test_confusion_example():
    c = confusion_at(scored_from_arrays([0.2, 0.8], [False, True]), 0.5)
    assert c == ConfusionCounts(tp=1, fp=0, fn=0, tn=1)


def test_confusion_everything_positive():
    c = confusion_at(FOUR, -math.inf)
    assert c.precision == 0.5 and c.recall == 1.0


def test_confusion_nothing_positive_precision_one():
    c = confusion_at(FOUR, 2.0)
    assert (c.tp, c.fp) == (0, 0)
    assert c.precision == 1.0
    assert c.total == 4


def test_non_finite_score_rejected():
    with pytest.raises(ValueError, match="finite"):
        ScoredExample(float("nan"), True)


def test_pr_curve_enumerated_points():
    pts = pr_curve(FOUR)
    got = [(p.recall, p.precision) for p in pts]
    np.testing.assert_allclose(got, [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3), (1.0, 0.5)], atol=1e-15)
    assert [p.threshold for p in pts] == [0.9, 0.8, 0.7, 0.6]


def test_pr_curve_perfect_separation_reaches_corner():
    pts = pr_curve(scored_from_arrays([3.0, 2.0, 1.0], [True, True, False]))
    assert PRPoint(2.0, 1.0, 1.0) in pts


def test_pr_curve_all_tied_single_point():
    pts = pr_curve(scored_from_arrays([0.5] * 4, [True, False, False, False]))
    assert pts == [PRPoint(0.5, 0.25, 1.0)]


def test_pr_curve_without_positives():
    with pytest.raises(ValueError, match="undefined recall"):
        pr_curve(scored_from_arrays([0.1, 0.2], [False, False]))


def test_ap_worked_example():
    assert average_precision(FOUR).average_precision == pytest.approx(5 / 6, abs=1e-15)


def test_ap_perfect_and_tied():
    assert average_precision(scored_from_arrays([2.0, 1.0, 0.0], [True, False, False])).average_precision == 1.0
    res = average_precision(scored_from_arrays([1.0] * 5, [True, False, False, False, True]))
    assert res.average_precision == pytest.approx(0.4)
    assert res.skew == pytest.approx(0.4)
    assert (res.n_pos, res.n_neg) == (2, 3)


def test_ap_without_positives():
    with pytest.raises(ValueError):
        average_precision_arrays([0.1, 0.2], [False, False])


def test_ap_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        flags = rng.random(n) < 0.3
        flags[0] = True
        scores = rng.integers(0, 6, n).astype(float)  # many ties
        assert average_precision_arrays(scores, flags).average_precision == pytest.approx(
            brute_force_ap(scores, flags), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=1, max_size=30))
def test_ap_invariant_under_monotone_transform(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    flags = np.array([p[1] for p in pairs])
    if not flags.any():
        flags[0] = True
    a = average_precision_arrays(scores, flags).average_precision
    b = average_precision_arrays(np.exp(0.3 * scores) + 5.0, flags).average_precision
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(12))))
def test_ap_independent_of_input_order(perm):
    scores = np.array([0.1, 0.5, 0.5, 0.3, 0.9, 0.9, 0.2, 0.5, 0.7, 0.1, 0.3, 0.9])
    flags = np.array([1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1], dtype=bool)
    perm = np.array(perm)
    assert average_precision_arrays(scores[perm], flags[perm]).average_precision == \
        average_precision_arrays(scores, flags).average_precision


def test_random_scores_ap_near_skew():
    rng = np.random.default_rng(0)
    flags = np.arange(10000) < 1000
    aps = [average_precision_arrays(rng.random(10000), flags).average_precision for _ in range(5)]
    assert 0.08 <= np.mean(aps) <= 0.12


def test_aggregate_examples():
    assert aggregate_trials([1, 1, 1]).std == 0.0
    agg = aggregate_trials([0, 2])
    assert agg.mean == 1.0 and agg.std == pytest.approx(math.sqrt(2))
    assert aggregate_trials([0.3]).std == 0.0
    with pytest.raises(ValueError):
        aggregate_trials([])


def test_scores_csv_round_trip(tmp_path):
    scored = scored_from_arrays([0.1, 1 / 3, 2.0], [False, True, False])
    write_scores_csv(scored, tmp_path / "s.csv")
    assert read_scores_csv(tmp_path / "s.csv") == scored
    first = (tmp_path / "s.csv").read_text().splitlines()[:2]
    assert first == ["example_index,score,is_anomaly", "0,0.10000000000000001,0"]


def test_scores_csv_with_separate_flags(tmp_path):
    (tmp_path / "s.csv").write_text("example_index,score\n1,0.5\n0,0.25\n")
    (tmp_path / "f.csv").write_text("example_index,is_anomaly\n0,1\n1,0\n")
    got = read_scores_csv(tmp_path / "s.csv", tmp_path / "f.csv")
    assert got == [ScoredExample(0.5, False), ScoredExample(0.25, True)]
    (tmp_path / "g.csv").write_text("example_index,is_anomaly\n0,1\n")
    with pytest.raises(ValueError, match="no flag for example_index 1"):
        read_scores_csv(tmp_path / "s.csv", tmp_path / "g.csv")


def test_pr_csv(tmp_path):
    write_pr_csv(pr_curve(FOUR), tmp_path / "pr.csv")
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert lines[3] == "0.69999999999999996,0.66666666666666663,1"
