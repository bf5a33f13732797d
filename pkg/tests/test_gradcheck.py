import numpy as np
import pytest

from asapseg.autograd import Tensor, mul, record, relu, tsum
from asapseg.errors import ContractError, NumericError
from asapseg.gradcheck import finite_diff_check


def test_accepts_correct_gradient(rng):
    x = rng.uniform(-1, 1, size=(3, 3))
    report = finite_diff_check(lambda t: tsum(mul(t, t)), x)
    assert report.passed
    assert report.max_rel_err < 1e-8
    assert len(report.checked) == x.size


def test_rejects_wrong_gradient(rng):
    # op whose backward is deliberately off by 10%
    def bad_square(t):
        out = t.data * t.data
        return record("bad_square", [t], out, lambda g: (2.2 * t.data * g,))

    x = rng.uniform(0.5, 1.0, size=(2, 2))
    report = finite_diff_check(lambda t: tsum(bad_square(t)), x)
    assert not report.passed
    assert report.max_rel_err > 1e-2


def test_kink_straddling_coordinate_excluded():
    # f = sum(relu(x)); x sits exactly on the kink so +-h straddles it
    x = np.array([0.0, 1.0])
    report = finite_diff_check(lambda t: tsum(relu(t)), x)
    assert 0 in report.excluded
    assert 1 in report.checked
    assert report.passed


def test_coordinate_subset_selection(rng):
    x = rng.uniform(-1, 1, size=(10,))
    report = finite_diff_check(lambda t: tsum(mul(t, t)), x, coords=[2, 7])
    assert sorted(report.checked + report.excluded) == [2, 7]
    report = finite_diff_check(lambda t: tsum(mul(t, t)), x, coords=4, rng=rng)
    assert len(report.checked) + len(report.excluded) == 4


def test_rejects_nonscalar_function(rng):
    x = rng.normal(size=(3,))
    with pytest.raises(ContractError):
        finite_diff_check(lambda t: mul(t, t), x)


def test_rejects_nonfinite_input():
    with pytest.raises(NumericError):
        finite_diff_check(lambda t: tsum(t), np.array([np.nan, 1.0]))


def test_report_string_mentions_verdict(rng):
    report = finite_diff_check(lambda t: tsum(mul(t, t)),
                               rng.uniform(-1, 1, size=(2,)))
    assert "PASS" in str(report)
