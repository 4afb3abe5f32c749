import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabo_dmpc.errors import InputError
from mabo_dmpc.qp import ActiveSetQP, solve_qp


def brute_force(H, q, C, d):
    """Enumerate active sets of a small strictly convex QP; keep the best feasible KKT point."""
    n = H.shape[0]
    best, best_x = np.inf, None
    for k in range(0, min(n, C.shape[0]) + 1):
        for S in itertools.combinations(range(C.shape[0]), k):
            S = list(S)
            K = np.block([[H, C[S].T], [C[S], np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-q, d[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.all(C @ x <= d + 1e-9):
                f = 0.5 * x @ H @ x + q @ x
                if f < best:
                    best, best_x = f, x
    return best_x, best


def random_qp(seed, n=3, m=4):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    q = rng.normal(size=n)
    C = rng.normal(size=(m, n))
    d = rng.uniform(0.1, 1.0, size=m)  # x = 0 is strictly feasible
    return H, q, C, d


def test_unconstrained():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = np.array([1.0, -1.0])
    res = solve_qp(H, q)
    np.testing.assert_allclose(res.x, np.linalg.solve(H, -q), atol=1e-8)


def test_equality_constrained_matches_kkt_solve():
    H = np.diag([1.0, 2.0, 3.0])
    q = np.array([1.0, 0.0, -1.0])
    A = np.array([[1.0, 1.0, 1.0]])
    b = np.array([1.0])
    K = np.block([[H, A.T], [A, np.zeros((1, 1))]])
    ref = np.linalg.solve(K, np.concatenate([-q, b]))[:3]
    res = solve_qp(H, q, A, b)
    np.testing.assert_allclose(res.x, ref, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_inequality_qp_matches_enumeration(seed):
    H, q, C, d = random_qp(seed)
    x_ref, f_ref = brute_force(H, q, C, d)
    res = solve_qp(H, q, C=C, d=d)
    assert res.objective == pytest.approx(f_ref, abs=1e-7)
    np.testing.assert_allclose(res.x, x_ref, atol=1e-6)
    assert np.all(res.lam >= -1e-10)
    assert res.kkt_residual <= 1e-8


def test_warm_start_reuses_factorizations():
    H, q, C, d = random_qp(3, n=4, m=6)
    solver = ActiveSetQP(H, C=C)
    r1 = solver.solve(q, d=d)
    count = solver.factorizations
    r2 = solver.solve(q + 1e-6, d=d, x0=r1.x, working=r1.active)
    assert solver.factorizations == count
    np.testing.assert_allclose(r1.x, r2.x, atol=1e-4)


def test_infeasible_raises():
    C = np.array([[1.0], [-1.0]])
    d = np.array([-1.0, -1.0])  # x <= -1 and x >= 1
    with pytest.raises(InputError):
        solve_qp(np.eye(1), np.zeros(1), C=C, d=d)


def test_dimension_checks():
    with pytest.raises(InputError):
        ActiveSetQP(np.eye(2), C=np.ones((1, 3)))
    with pytest.raises(InputError):
        ActiveSetQP(np.eye(2), A=np.array([[1.0, 1.0], [2.0, 2.0]]))
