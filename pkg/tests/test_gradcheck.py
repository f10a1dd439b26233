"""
Tests for gradient checking:
- Relative error definition
- Passing and failing checks
- Every built-in suite passes at the default tolerance
- Determinism under a fixed seed
"""
import numpy as np
import pytest

from rpeflow.errors import ConfigError
from rpeflow.gradcheck import gradcheck, gradcheck_params, relative_error
from rpeflow.suites import SUITES, run_suites
from rpeflow.tensor import Tensor, exp, sum_


def test_relative_error_uses_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2e-4, 0.0) == pytest.approx(0.2)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_gradcheck_smooth_function_passes():
    x = Tensor(np.linspace(-1.0, 1.0, 5))
    report = gradcheck(lambda t: sum_(exp(t) * t), x)
    assert report.passed
    assert report.checked == 5
    assert report.max_rel_error < 1e-6


def test_unreachable_tolerance_fails_cleanly():
    x = Tensor(np.linspace(0.5, 1.5, 4))
    report = gradcheck(lambda t: sum_(exp(t)), x, tol=1e-14)
    assert not report.passed
    assert report.worst_location.startswith("x[")
    assert report.to_dict()["passed"] is False


def test_gradcheck_params_samples_without_replacement():
    params = {"a": Tensor(np.ones(3), requires_grad=True), "b": Tensor(np.ones((2, 2)), requires_grad=True)}
    report = gradcheck_params(lambda: sum_(params["a"] * 2.0) + sum_(params["b"] * params["b"]), params,
                              sample_size=100)
    assert report.passed
    assert report.checked == 7


@pytest.mark.parametrize("suite", ["tensor", "geometry", "mireg", "fusion"])
def test_module_suites_pass(suite):
    reports = run_suites([suite], seed=0)[suite]
    failing = [(r.name, r.max_rel_error, r.worst_location) for r in reports if not r.passed]
    assert reports
    assert failing == []


def test_full_forward_suite_passes():
    (report,) = run_suites(["full"], seed=0)["full"]
    assert report.passed, report.to_dict()
    assert report.checked == 50


def test_suites_are_deterministic():
    first = [r.max_rel_error for r in run_suites(["mireg"], seed=3)["mireg"]]
    second = [r.max_rel_error for r in run_suites(["mireg"], seed=3)["mireg"]]
    assert first == second


def test_unknown_suite_is_rejected():
    with pytest.raises(ConfigError):
        run_suites(["nope"])
    assert set(SUITES) == {"tensor", "geometry", "fusion", "mireg", "full"}
