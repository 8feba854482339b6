import math

import numpy as np
import pytest

from sparsebound.metrics import (
    CSV_COLUMNS,
    EvalResult,
    classification_error,
    evaluate,
    generalization_gap,
    ramp_gen_bound,
    ramp_loss,
)


def test_classification_error_examples():
    assert classification_error([1.0, -2.0], [1, -1]) == 0.0
    assert classification_error([-1.0, 2.0], [1, -1]) == 1.0
    assert classification_error([0.3, -2.0, 0.1], [1, 1, -1]) == pytest.approx(2 / 3)


def test_zero_prediction_counts_as_error():
    assert classification_error([0.0, 0.0], [1, -1]) == 1.0


def test_classification_error_rejects_bad_input():
    with pytest.raises(ValueError):
        classification_error([], [])
    with pytest.raises(ValueError):
        classification_error([1.0], [1, 1])


@pytest.mark.parametrize("y, f, expected", [(1, 2, 0.0), (1, 0.5, 0.5), (1, -3, 1.0), (-1, -0.25, 0.75), (1, 1, 0.0), (1, 0, 1.0)])
def test_ramp_loss_pieces(y, f, expected):
    assert float(ramp_loss(y, f)) == pytest.approx(expected)


def test_ramp_dominates_indicator():
    rng = np.random.default_rng(0)
    y = rng.choice([-1.0, 1.0], 10**4)
    f = rng.normal(scale=2.0, size=10**4)
    indicator = (np.sign(f) != y).astype(float)
    assert np.all(ramp_loss(y, f) >= indicator)
    res = evaluate(f, y)
    assert res.ramp_mean >= res.error


def test_ramp_is_one_lipschitz():
    f = np.linspace(-3, 3, 6001)
    for y in (-1.0, 1.0):
        r = ramp_loss(y, f)
        assert np.max(np.abs(np.diff(r)) / np.diff(f)) <= 1.0 + 1e-9


def test_error_invariant_under_positive_scaling():
    rng = np.random.default_rng(1)
    f = rng.normal(size=200)
    y = rng.choice([-1.0, 1.0], 200)
    for c in (1e-3, 0.5, 7.0):
        assert classification_error(c * f, y) == classification_error(f, y)


def test_ramp_gen_bound():
    for m in (1, 10, 1000):
        assert ramp_gen_bound(0.0, m, 2 / math.e) == pytest.approx(3 / math.sqrt(2 * m), rel=1e-12)
    assert ramp_gen_bound(0.7, 50, 0.1) - ramp_gen_bound(0.2, 50, 0.1) == pytest.approx(1.0, abs=1e-12)
    assert ramp_gen_bound(0.3, 10**12, 0.1) == pytest.approx(0.6, abs=1e-5)
    with pytest.raises(ValueError):
        ramp_gen_bound(0.1, 0, 0.1)
    with pytest.raises(ValueError):
        ramp_gen_bound(0.1, 5, 0.0)


def test_generalization_gap():
    a = EvalResult(0.007, 0.0, 0.0, 500)
    b = EvalResult(0.188, 0.0, 0.0, 500)
    assert generalization_gap(a, a) == 0.0
    assert generalization_gap(a, b) == pytest.approx(0.181, abs=1e-12)
    assert generalization_gap(b, a) == generalization_gap(a, b)


def test_evaluate_fields():
    res = evaluate([2.0, -0.5, 0.2], [1, -1, -1], loss_mean=0.4)
    assert res.m == 3
    assert res.error == pytest.approx(1 / 3)
    assert res.ramp_mean == pytest.approx((0 + 0.5 + 1) / 3)
    assert res.loss_mean == 0.4


def test_csv_column_order():
    assert CSV_COLUMNS == ("m", "rho", "train_error", "test_error", "train_loss", "test_loss", "gen_gap", "rho_over_sqrt_m")
