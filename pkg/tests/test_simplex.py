import numpy as np
import pytest

from feddd.simplex import InfeasibleError, UnboundedError, linprog


def test_textbook_lp():
    # max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  ->  (2, 6), value 36
    res = linprog([-3, -5], [[1, 0], [0, 2], [3, 2]], [4, 12, 18])
    assert np.allclose(res.x, [2, 6], atol=1e-12)
    assert res.fun == pytest.approx(-36)


def test_equality_and_negative_rhs():
    # min x + 2y s.t. x + y = 3, -x <= -1  ->  (3, 0)
    res = linprog([1, 2], [[-1, 0]], [-1], [[1, 1]], [3])
    assert np.allclose(res.x, [3, 0], atol=1e-12)


def test_infeasible():
    with pytest.raises(InfeasibleError):
        linprog([1, 1], [[1, 1]], [1], [[1, 1]], [2])


def test_unbounded():
    with pytest.raises(UnboundedError):
        linprog([-1, 0], [[0, 1]], [1])


def test_degenerate_does_not_cycle():
    # Beale's classic cycling example; Bland's rule terminates.
    c = [-0.75, 150, -0.02, 6]
    A = [[0.25, -60, -0.04, 9], [0.5, -90, -0.02, 3], [0, 0, 1, 0]]
    res = linprog(c, A, [0, 0, 1])
    assert res.fun == pytest.approx(-0.05)


def test_agrees_with_reference_solver(rng):
    scipy_opt = pytest.importorskip("scipy.optimize")
    for _ in range(30):
        n, m = 4, 5
        A = rng.uniform(0.1, 2, (m, n))
        b = rng.uniform(1, 5, m)
        c = -rng.uniform(0.1, 1, n)
        ours = linprog(c, A, b)
        ref = scipy_opt.linprog(c, A_ub=A, b_ub=b, method="highs")
        assert ours.fun == pytest.approx(ref.fun, rel=1e-9)
