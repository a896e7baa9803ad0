import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdkslearn.optim import LbfgsMemory, LbfgsOptions, minimize


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def _gradient_descent(fun, x, rate, iters):
    """Fixed-step steepest descent; slow but hard to get wrong."""
    for _ in range(iters):
        x = x - rate * fun(x)[1]
    return x


@settings(max_examples=25, deadline=None)
@given(dim=st.integers(1, 30), seed=st.integers(0, 2**31))
def test_quadratic(dim, seed):
    a = np.random.default_rng(seed).uniform(-5, 5, dim)
    res = minimize(lambda x: (0.5 * float((x - a) @ (x - a)), x - a), np.zeros(dim),
                   LbfgsOptions(grad_tol=1e-13, max_iter=dim + 2))
    assert np.max(np.abs(res.x - a)) < 1e-12
    assert len(res.trace.records) - 1 <= dim + 2


def test_rosenbrock_against_gradient_descent():
    x0 = np.array([-1.2, 1.0])
    res = minimize(rosenbrock, x0, LbfgsOptions(grad_tol=1e-12, rel_f_tol=0.0, max_iter=200))
    assert np.linalg.norm(res.x - 1.0) < 1e-8
    assert len(res.trace.records) - 1 < 200
    assert res.trace.is_monotone()
    slow = _gradient_descent(rosenbrock, x0, 1e-3, 200_000)
    assert np.linalg.norm(slow - 1.0) < 1e-3
    assert np.linalg.norm(res.x - slow) < 1e-3


def test_ill_conditioned_quadratic_monotone_and_pairs_positive():
    # condition 1e4: |g| much below 1e-5 is under the rounding floor of f
    rng = np.random.default_rng(4)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    A = Q @ np.diag(np.logspace(0, 4, 20)) @ Q.T
    b = rng.standard_normal(20)
    mem = LbfgsMemory()
    seen = []

    def watch(it, x, f, g, rec):
        seen.extend(float(s @ y) for s, y in zip(mem.S, mem.Y))

    res = minimize(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(20),
                   LbfgsOptions(memory=5, grad_tol=1e-4, rel_f_tol=0.0, max_iter=2000),
                   callback=watch, memory=mem)
    assert res.reason == "grad_tol"
    assert res.trace.is_monotone()
    assert seen and min(seen) > 0
    assert len(mem.S) <= 5
    assert np.max(np.abs(res.x - np.linalg.solve(A, b))) < 1e-4  # |g| / lambda_min


def test_deterministic():
    x0 = np.array([-1.2, 1.0])
    a = minimize(rosenbrock, x0, LbfgsOptions(max_iter=30))
    b = minimize(rosenbrock, x0, LbfgsOptions(max_iter=30))
    assert np.array_equal(a.x, b.x)
    assert [r.line() for r in a.trace.records] == [r.line() for r in b.trace.records]


def test_resume_is_exact():
    x0 = np.array([-1.2, 1.0])
    full = minimize(rosenbrock, x0, LbfgsOptions(max_iter=20, rel_f_tol=0.0))
    mem = LbfgsMemory()
    half = minimize(rosenbrock, x0, LbfgsOptions(max_iter=10, rel_f_tol=0.0), memory=mem)
    assert mem.iteration == 10
    rest = minimize(rosenbrock, half.x, LbfgsOptions(max_iter=10, rel_f_tol=0.0), memory=mem)
    assert np.array_equal(rest.x, full.x)
    assert rest.trace.records[-1].iter == 20


def test_callback_stops():
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), callback=lambda it, *a: it >= 3)
    assert res.reason == "callback" and len(res.trace.records) == 4


def test_options_validated():
    with pytest.raises(ValueError):
        LbfgsOptions(c1=0.95, c2=0.9)
    with pytest.raises(ValueError):
        LbfgsOptions(memory=0)


def test_non_finite_start():
    with pytest.raises(ValueError):
        minimize(rosenbrock, np.array([np.nan, 1.0]))
    res = minimize(lambda x: (float("nan"), x), np.zeros(2))
    assert res.reason == "nan"


def test_nan_during_search_keeps_best_point():
    def fun(x):
        if x[0] > 0.5:
            return float("nan"), np.full(1, np.nan)
        return float((x[0] - 2) ** 2), 2 * (x - 2)

    res = minimize(fun, np.zeros(1), LbfgsOptions(max_iter=50))
    assert np.all(np.isfinite(res.x)) and res.x[0] <= 0.5
    assert res.trace.is_monotone()
