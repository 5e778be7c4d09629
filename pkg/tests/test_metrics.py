import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from procplan.harness.metrics import (
    MetricError, MetricsReport, action_metrics, order_metrics, uniform_baseline, uniform_success_rate,
)


def brute_action(gt, pred):
    hits = [1 if g == p else 0 for g, p in zip(gt, pred)]
    inter = [a for a in set(gt) if a in set(pred)]
    union = set(gt) | set(pred)
    return int(all(hits)), sum(hits) / len(gt), len(inter) / len(union)


def brute_order(gt, pred):
    ham = sum(1 for i in range(len(gt)) if gt[i] != pred[i])
    pos_g = {e: i for i, e in enumerate(gt)}
    pos_p = {e: i for i, e in enumerate(pred)}
    good = total = 0
    for x in gt:
        for y in gt:
            if pos_g[x] < pos_g[y]:
                total += 1
                good += pos_p[x] < pos_p[y]
    return ham, good / total if total else 1.0


@pytest.mark.parametrize("pred, expected", [
    ([1, 2, 3], (1, 1.0, 1.0)),
    ([3, 2, 1], (0, 1 / 3, 1.0)),
    ([1, 2, 4], (0, 2 / 3, 0.5)),
])
def test_action_metric_hand_examples(pred, expected):
    assert action_metrics([1, 2, 3], pred) == pytest.approx(expected)


def test_order_metric_hand_examples():
    assert order_metrics([1, 2, 3], [1, 3, 2]) == (2, pytest.approx(2 / 3))
    assert order_metrics([4, 0, 7], [4, 0, 7]) == (0, 1.0)


def test_metrics_agree_with_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        T, M = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        gt, pred = rng.integers(0, M, T).tolist(), rng.integers(0, M, T).tolist()
        assert action_metrics(gt, pred) == brute_action(gt, pred)
        perm = rng.permutation(T).tolist()
        other = rng.permutation(perm).tolist()
        assert order_metrics(perm, other) == brute_order(perm, other)


def test_pair_accuracy_is_a_shifted_kendall_tau():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = np.arange(6)
        p = rng.permutation(6)
        rank = np.argsort(p)  # position of each element in the prediction
        tau = stats.kendalltau(g, rank).statistic
        assert order_metrics(g, p)[1] == pytest.approx((tau + 1) / 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=8).flatmap(
    lambda gt: st.tuples(st.just(gt), st.lists(st.integers(0, 5), min_size=len(gt), max_size=len(gt)))))
def test_success_implies_accuracy_implies_iou(pair):
    s, acc, iou = action_metrics(*pair)
    if s:
        assert acc == 1.0
    if acc == 1.0:
        assert iou == 1.0


@settings(max_examples=200, deadline=None)
@given(st.permutations(range(7)), st.permutations(range(7)), st.permutations(range(100, 107)))
def test_order_metric_properties(a, b, names):
    a, b = list(a), list(b)
    assert order_metrics(a, a) == (0, 1.0)
    assert order_metrics(a, b)[0] == order_metrics(b, a)[0]
    relabel = dict(zip(range(7), names))
    assert order_metrics([relabel[x] for x in a], [relabel[x] for x in b]) == order_metrics(a, b)


def test_bad_inputs_raise():
    with pytest.raises(MetricError):
        action_metrics([1, 2], [1])
    with pytest.raises(MetricError):
        action_metrics([], [])
    with pytest.raises(MetricError):
        order_metrics([0, 1, 1], [0, 1, 2])
    with pytest.raises(MetricError):
        order_metrics([0, 1, 2], [0, 1, 3])


def test_uniform_accuracy_matches_expectation():
    rng = np.random.default_rng(2)
    M, T, n = 30, 3, 100_000
    rep = uniform_baseline([[0] * T] * n, M, rng)
    h = rep.horizons[T].summary()
    p = 1 / M
    se = 100 * np.sqrt(p * (1 - p) / (n * T))
    assert abs(h["accuracy"] - 100 * p) < 3 * se
    se_s = 100 * np.sqrt(uniform_success_rate(M, T) * (1 - uniform_success_rate(M, T)) / n)
    assert abs(h["success_rate"] - 100 * uniform_success_rate(M, T)) < 3 * se_s + 1e-9


def test_uniform_single_action_always_succeeds():
    rep = uniform_baseline([[0, 0, 0]] * 20, 1, np.random.default_rng(0))
    assert rep.horizons[3].summary()["success_rate"] == 100.0


def test_fixed_endpoint_walks_of_three_are_always_right():
    rep = uniform_baseline([], 5, np.random.default_rng(0), walk_sizes=[3] * 50)
    assert rep.horizons[3].summary()["hamming"] == 0.0
    free = uniform_baseline([], 5, np.random.default_rng(0), walk_sizes=[3] * 3000, fixed_endpoints=False)
    # a uniform permutation of 3 has expected Hamming distance 2 from the identity
    assert abs(free.horizons[3].summary()["hamming"] - 2.0) < 0.1


def test_report_recomputes_from_raw_records():
    rng = np.random.default_rng(3)
    rep = uniform_baseline([rng.integers(0, 4, 3).tolist() for _ in range(50)], 4, rng, walk_sizes=[4] * 30)
    again = MetricsReport.from_records(rep.name, json.loads(json.dumps(rep.records)))
    assert again.to_json() == rep.to_json()
    counts = rep.horizons[3]
    assert rep.summary()["horizons"][0]["success_rate"] == 100.0 * counts.successes / counts.queries


def test_report_is_deterministic_in_seed():
    make = lambda: uniform_baseline([[1, 2, 3]] * 10, 6, np.random.default_rng(4), walk_sizes=[4] * 5).to_json()
    assert make() == make()


def test_table_marks_missing_columns():
    rep = MetricsReport("x")
    rep.add_walk([0, 1, 2, 3], [0, 2, 1, 3])
    row = rep.table().splitlines()[1]
    assert row.split()[2:5] == ["-", "-", "-"]
