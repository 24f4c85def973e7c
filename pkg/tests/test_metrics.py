import math

import numpy as np
import pytest

from kalmannet.errors import InvalidArgumentError
from kalmannet.metrics import NEG_INF_DB, mse_db, mse_linear


def test_zero_error_is_negative_infinity_sentinel():
    x = np.ones((2, 3, 2))
    assert mse_db(x, x) == NEG_INF_DB
    assert math.isinf(mse_db(x, x))


def test_unit_error_is_zero_db():
    x = np.zeros((4, 5, 3))
    assert mse_db(x + 1.0, x) == 0.0
    assert mse_db(x - 1.0, x) == 0.0


def test_mse_averages_over_all_axes():
    est = np.zeros((2, 2, 2))
    tru = np.zeros((2, 2, 2))
    tru[0, 0, 0] = 4.0
    assert mse_linear(est, tru) == 2.0
    assert mse_db(est, tru) == pytest.approx(10 * math.log10(2.0), rel=1e-15)


def test_diverged_estimates_give_nan():
    with np.errstate(invalid="ignore"):
        assert math.isnan(mse_db(np.array([np.nan, 0.0]), np.zeros(2)))


def test_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        mse_db(np.zeros((2, 3)), np.zeros((3, 2)))
