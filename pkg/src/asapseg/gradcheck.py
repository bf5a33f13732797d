"""Central-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from . import autograd
from .autograd import Tensor, fresh_tape, no_grad
from .errors import ContractError, NumericError


class _KinkWatch:
    """Records relu activation sign patterns for one function evaluation.

    Two evaluations whose patterns differ straddle a relu kink (or sat on one
    exactly), so the central difference there is meaningless.
    """

    def __init__(self):
        self.masks = []

    def observe(self, x):
        self.masks.append(x > 0)

    def __enter__(self):
        autograd._KINK_WATCHERS.append(self)
        return self

    def __exit__(self, *exc):
        autograd._KINK_WATCHERS.remove(self)
        return False

    def differs_from(self, other):
        if len(self.masks) != len(other.masks):
            return True
        return any(not np.array_equal(a, b)
                   for a, b in zip(self.masks, other.masks))


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    tol: float
    checked: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def __str__(self):
        return (f"finite-diff: {len(self.checked)} coords checked, "
                f"{len(self.excluded)} kink-excluded, "
                f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) "
                f"-> {'PASS' if self.passed else 'FAIL'}")


def _eval_scalar(f, x):
    y = f(Tensor(x))
    val = y.data if isinstance(y, Tensor) else np.asarray(y)
    if val.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued function")
    v = float(val.reshape(()))
    if not np.isfinite(v):
        raise NumericError("function produced a non-finite value")
    return v


def finite_diff_check(f, x, h=1e-5, tol=1e-4, coords=None, rng=None):
    """Compare analytic gradients of scalar f at x against central differences.

    `coords` restricts the check to a subset of flat indices (all by default,
    or a random sample of that many when an int and rng are given). Relative
    error uses denominator max(|analytic|, |numeric|, 1e-8). Coordinates whose
    perturbed evaluations bring a relu input within h of 0 are excluded.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise NumericError("input contains non-finite values")

    with fresh_tape():
        xt = Tensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if not isinstance(y, Tensor):
            raise ContractError("function must return a Tensor")
        if y.data.size != 1:
            raise ContractError("finite_diff_check requires a scalar-valued function")
        if not np.isfinite(y.data.reshape(())):
            raise NumericError("function produced a non-finite value")
        autograd.backward(y)
        analytic = (np.zeros_like(x0) if xt.grad is None else xt.grad).reshape(-1)

    if coords is None:
        idx = range(x0.size)
    elif isinstance(coords, int):
        rng = rng or np.random.default_rng(0)
        idx = sorted(rng.choice(x0.size, size=min(coords, x0.size), replace=False))
    else:
        idx = list(coords)

    report = FiniteDiffReport(max_rel_err=0.0, tol=tol)
    flat = x0.reshape(-1)
    for i in idx:
        with no_grad(), fresh_tape():
            with _KinkWatch() as plus:
                flat[i] += h
                fp = _eval_scalar(f, x0)
            with _KinkWatch() as minus:
                flat[i] -= 2 * h
                fm = _eval_scalar(f, x0)
            flat[i] += h
        if plus.differs_from(minus):
            report.excluded.append(int(i))
            continue
        numeric = (fp - fm) / (2 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        err = abs(analytic[i] - numeric) / denom
        report.checked.append(int(i))
        report.errors[int(i)] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report
