import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrack.metrics import (ContractError, ScoreReport, ScoringConfig, render_csv,
                               render_text, score_m, score_report, total_score,
                               weighted_cluster_score, weighted_report)


def test_perfect_predictions_score_one():
    p = np.array([[3, 4, 5, 6, 7], [0, 0, 0, 0, 0]])
    for m in (1, 3, 5):
        assert score_m(p, p, m, ScoringConfig(2.5)) == 1.0


def test_single_error_equal_sigma():
    assert score_m([[10]], [[5]], 1, ScoringConfig(5.0)) == pytest.approx(math.exp(-1), abs=1e-15)


def test_two_instances_hand_oracle():
    # abs-error sums 0 and 4, m = 2, sigma = 1: exp(-0/2), exp(-4/2)
    preds = [[1, 1], [3, 5]]
    truths = [[1, 1], [1, 3]]
    expected = (math.exp(0.0) + math.exp(-4 / 2)) / 2
    assert expected == pytest.approx(0.5676676416183064, abs=1e-15)
    assert score_m(preds, truths, 2, ScoringConfig(1.0)) == pytest.approx(expected, abs=1e-15)


def test_score_uses_first_m_columns():
    preds = [[1, 9, 9, 9, 9]]
    truths = [[1, 0, 0, 0, 0]]
    assert score_m(preds, truths, 1) == 1.0
    assert score_m(preds, truths, 3) < 1.0


def test_shape_errors():
    with pytest.raises(ContractError):
        score_m([[1, 2]], [[1, 2], [3, 4]], 1)
    with pytest.raises(ContractError):
        score_m([[1, 2]], [[1, 2]], 3)
    with pytest.raises(ValueError):
        ScoringConfig(0.0)


@pytest.mark.parametrize("scores,expected", [
    ((0.797, 0.635, 0.541), 0.601),
    ((0.862, 0.642, 0.517), 0.597),
])
def test_total_score_table_rows(scores, expected):
    assert total_score(*scores) == pytest.approx(expected, abs=5e-4)


def test_total_score_perfect():
    assert total_score(1, 1, 1) == 1.0


def test_weighted_cluster_score():
    assert weighted_cluster_score([0.5, 0.3], [100, 300]) == pytest.approx(0.35, abs=1e-15)
    assert weighted_cluster_score([0.4, 0.4, 0.4], [1, 5, 9]) == pytest.approx(0.4)
    assert weighted_cluster_score([0.7], [12]) == 0.7
    with pytest.raises(ContractError):
        weighted_cluster_score([0.1, 0.2], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=5),
       st.lists(st.integers(0, 1000), min_size=1, max_size=5))
def test_weighted_score_within_bounds(scores, cards):
    n = min(len(scores), len(cards))
    scores, cards = scores[:n], cards[:n]
    if sum(cards) == 0:
        return
    w = weighted_cluster_score(scores, cards)
    used = [s for s, c in zip(scores, cards) if c > 0]
    assert min(used) - 1e-12 <= w <= max(used) + 1e-12


pred_arrays = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.integers(0, 127), min_size=5, max_size=5), min_size=n, max_size=n),
        st.lists(st.lists(st.integers(0, 127), min_size=5, max_size=5), min_size=n, max_size=n),
    ))


@settings(max_examples=200, deadline=None)
@given(pred_arrays, st.sampled_from([1, 3, 5]), st.floats(0.5, 50))
def test_score_in_unit_interval(pt, m, sigma):
    p, t = np.array(pt[0]), np.array(pt[1])
    s = score_m(p, t, m, ScoringConfig(sigma))
    assert 0 < s <= 1
    assert (s == 1.0) == bool(np.all(p[:, :m] == t[:, :m]))


def test_report_invariant_enforced():
    r = score_report([[1, 2, 3, 4, 5]], [[1, 2, 3, 4, 6]])
    assert r.total == pytest.approx(total_score(r.score_1, r.score_3, r.score_5), abs=1e-12)
    with pytest.raises(ContractError):
        ScoreReport(0.5, 0.5, 0.5, 0.9, 5.0, 1)
    back = ScoreReport.from_dict(r.to_dict())
    assert back == r


def test_weighted_report():
    a = score_report([[1] * 5], [[1] * 5])
    b = score_report([[1] * 5], [[3] * 5])
    w = weighted_report([a, b], [1, 3])
    assert w.score_5 == pytest.approx((a.score_5 + 3 * b.score_5) / 4)
    assert w.n_instances == 4


def test_text_and_csv_render_agree():
    rows = [["last", 0.797, 0.635, 0.541, total_score(0.797, 0.635, 0.541)]]
    header = ["model", "s1", "s3", "s5", "total"]
    text = render_text(header, rows)
    csv_text = render_csv(header, rows)
    assert "0.601" in text
    assert float(csv_text.splitlines()[1].split(",")[4]) == pytest.approx(0.601, abs=5e-4)
