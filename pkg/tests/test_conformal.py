import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrlesion import conformal
from qrlesion.conformal import ConformalCalibration, calibrate, conformalize, conformity_scores
from qrlesion.metrics import coverage
from qrlesion.nn import make_rng

score_lists = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=60)


def test_conformity_scores():
    assert conformity_scores([0.0], [1.0], [0.5])[0] < 0
    assert conformity_scores([0.0], [1.0], [3.0])[0] == 2.0
    assert conformity_scores([1.0], [1.0], [1.0])[0] == 0.0
    with pytest.raises(ValueError):
        conformity_scores([0.0], [1.0, 2.0], [0.5])


def _oracle_margin(scores, alpha):
    k = math.ceil((len(scores) + 1) * (1 - alpha) - 1e-9)
    return math.inf if k > len(scores) else sorted(scores)[k - 1]


def test_calibrate_examples():
    assert calibrate(np.arange(1, 100), 0.1).margin == 90
    assert calibrate(np.full(20, 3.5), 0.2).margin == 3.5
    assert calibrate([3.0, 1.0, 2.0], 0.5).margin == 2.0


def test_calibrate_too_few_points_gives_inf():
    # rank ceil(5 * 0.9) = 5 exceeds n = 4
    assert calibrate([1.0, 2.0, 3.0, 4.0], 0.1).margin == math.inf
    assert calibrate(np.arange(9.0), 0.1).margin == 8.0


def test_calibrate_errors():
    with pytest.raises(ValueError):
        calibrate([], 0.1)
    for a in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            calibrate([1.0], a)


@settings(max_examples=60, deadline=None)
@given(score_lists, st.floats(0.01, 0.99))
def test_calibrate_matches_sort_oracle(scores, alpha):
    assert calibrate(scores, alpha).margin == _oracle_margin(scores, alpha)


@settings(max_examples=40, deadline=None)
@given(score_lists, st.floats(0.01, 0.98), st.floats(0.001, 0.5))
def test_margin_monotone_in_level(scores, alpha, delta):
    lo_level = calibrate(scores, min(alpha + delta, 0.99)).margin
    assert calibrate(scores, alpha).margin >= lo_level


@settings(max_examples=40, deadline=None)
@given(score_lists, st.floats(0.01, 0.99), st.randoms())
def test_margin_permutation_invariant(scores, alpha, rnd):
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert calibrate(shuffled, alpha).margin == calibrate(scores, alpha).margin


def test_conformalize():
    lo, hi = conformalize([0.0], [1.0], ConformalCalibration(0.0, 10, 0.1))
    assert (lo[0], hi[0]) == (0.0, 1.0)
    lo, hi = conformalize([0.0], [1.0], ConformalCalibration(0.5, 10, 0.1))
    assert (lo[0], hi[0]) == (-0.5, 1.5)
    lo, hi = conformalize([0.0], [1.0], ConformalCalibration(-0.25, 10, 0.1))
    assert (lo[0], hi[0]) == (0.25, 0.75)
    with pytest.raises(ValueError):
        conformalize([0.0], [1.0], ConformalCalibration(math.inf, 3, 0.1))


def test_json_round_trip():
    for cal in (ConformalCalibration(0.125, 500, 0.1), ConformalCalibration(math.inf, 3, 0.1)):
        text = json.dumps(cal.to_json())
        assert ConformalCalibration.from_json(json.loads(text)) == cal


def test_coverage_on_fresh_data():
    # a deliberately miscalibrated predictor: too narrow and shifted
    rng = make_rng(0)
    alpha, n_cal, reps = 0.1, 200, 300
    covered = []
    for _ in range(reps):
        y_cal, y_test = rng.standard_normal(n_cal) * 2 + 0.3, rng.standard_normal(1000) * 2 + 0.3
        cal = calibrate(conformity_scores(np.full(n_cal, -0.5), np.full(n_cal, 0.5), y_cal), alpha)
        lo, hi = conformalize(np.full(1000, -0.5), np.full(1000, 0.5), cal)
        covered.append(coverage(lo, hi, y_test))
    assert np.mean(covered) >= 1 - alpha - 3 * 0.3 / np.sqrt(reps * 1000) - 0.003
    assert np.mean(covered) <= 1 - alpha + 1 / (n_cal + 1) + 0.005


def test_per_pixel_calibrate():
    rng = make_rng(1)
    y = rng.standard_normal((50, 3, 4))
    margins = conformal.per_pixel_calibrate(np.zeros_like(y), np.zeros_like(y), y, 0.2)
    scores = np.abs(y)
    for i in range(3):
        for j in range(4):
            assert margins[i, j] == _oracle_margin(list(scores[:, i, j]), 0.2)
    assert np.all(np.isinf(conformal.per_pixel_calibrate(y[:3], y[:3], y[:3], 0.1)))
