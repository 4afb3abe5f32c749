"""Dense primal active-set QP solver.

Solves::

    min  0.5 x'Hx + q'x
    s.t. A x  = b
         C x <= d

from a primal-feasible starting point. Each working set's KKT matrix is
LU-factored once and cached, so repeated solves that only change
``q``, ``b`` or ``d`` (the situation inside dual-decomposition loops) cost
a couple of triangular solves when the active set does not move.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog

from .errors import ConvergenceError, InputError

TIKHONOV = 1e-9


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    lam: np.ndarray  # inequality multipliers, >= 0, zero off the active set
    active: tuple
    iterations: int
    kkt_residual: float
    objective: float


class ActiveSetQP:
    """Active-set solver bound to fixed ``H``, ``A`` and ``C``.

    Parameters
    ----------
    H : (n, n) symmetric positive semidefinite
    A : (me, n) or None
    C : (mi, n) or None
    regularization : float
        Added to the diagonal of ``H`` in the KKT systems.
    cache_size : int
        Number of factored working sets kept.
    """

    def __init__(self, H, A=None, C=None, regularization=TIKHONOV, cache_size=128):
        H = np.asarray(H, dtype=float)
        n = H.shape[0]
        if H.shape != (n, n):
            raise InputError("H must be square")
        self.n = n
        self.H = 0.5 * (H + H.T)
        self.Hreg = self.H + regularization * np.eye(n)
        self.A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        self.C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        if self.A.shape[1] != n or self.C.shape[1] != n:
            raise InputError("constraint matrices do not match H")
        self.me = self.A.shape[0]
        self.mi = self.C.shape[0]
        if self.me and np.linalg.matrix_rank(self.A) < self.me:
            raise InputError("equality constraints are linearly dependent")
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self.factorizations = 0

    # -- linear algebra -------------------------------------------------
    def _factor(self, W):
        key = W
        lu = self._cache.get(key)
        if lu is not None:
            self._cache.move_to_end(key)
            return lu
        Cw = self.C[list(W)]
        m = self.me + len(W)
        K = np.zeros((self.n + m, self.n + m))
        K[: self.n, : self.n] = self.Hreg
        if m:
            J = np.vstack([self.A, Cw])
            K[: self.n, self.n :] = J.T
            K[self.n :, : self.n] = J
        with np.errstate(all="ignore"):
            lu = lu_factor(K, check_finite=False)
        if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
            raise ConvergenceError("singular KKT matrix for working set")
        self.factorizations += 1
        self._cache[key] = lu
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return lu

    def _eqp(self, W, g):
        """Step ``p`` and multipliers for the equality QP on working set ``W``."""
        lu = self._factor(W)
        rhs = np.zeros(self.n + self.me + len(W))
        rhs[: self.n] = -g
        sol = lu_solve(lu, rhs, check_finite=False)
        return sol[: self.n], sol[self.n : self.n + self.me], sol[self.n + self.me :]

    # -- feasibility ----------------------------------------------------
    def feasible_point(self, b, d):
        """Phase-1 point by linear programming; raises when infeasible."""
        res = linprog(
            np.zeros(self.n),
            A_ub=self.C if self.mi else None,
            b_ub=d if self.mi else None,
            A_eq=self.A if self.me else None,
            b_eq=b if self.me else None,
            bounds=[(None, None)] * self.n,
            method="highs",
        )
        if res.status != 0:
            raise InputError(f"QP constraints are infeasible ({res.message})")
        return res.x

    def _independent(self, W):
        if not W and not self.me:
            return True
        J = np.vstack([self.A, self.C[list(W)]])
        return J.shape[0] <= self.n and np.linalg.matrix_rank(J) == J.shape[0]

    def _initial_working_set(self, x, d, hint, tol):
        slack = d - self.C @ x if self.mi else np.zeros(0)
        if hint is not None:
            W = sorted({int(i) for i in hint if 0 <= i < self.mi and abs(slack[i]) <= tol})
            if tuple(W) in self._cache or self._independent(W):
                return W
        # greedy independent subset of the active constraints
        W = []
        basis = self.A.copy()
        rank = basis.shape[0]
        for i in np.nonzero(np.abs(slack) <= tol)[0]:
            trial = np.vstack([basis, self.C[i]])
            if np.linalg.matrix_rank(trial) > rank:
                W.append(int(i))
                basis, rank = trial, rank + 1
            if rank >= self.n:
                break
        return sorted(W)

    # -- main loop ------------------------------------------------------
    def solve(self, q, b=None, d=None, x0=None, working=None, tol=1e-10, max_iter=None):
        """Solve for a new linear term / right-hand sides.

        Parameters
        ----------
        q : (n,)
        b, d : right-hand sides of the equality / inequality blocks
        x0 : feasible starting point; phase-1 LP when omitted
        working : iterable of inequality indices to try first
        """
        q = np.asarray(q, dtype=float)
        b = np.zeros(self.me) if b is None else np.asarray(b, dtype=float)
        d = np.zeros(self.mi) if d is None else np.asarray(d, dtype=float)
        feas_tol = 1e-9 * (1.0 + (np.max(np.abs(d)) if d.size else 0.0))
        if x0 is None:
            x = self.feasible_point(b, d)
        else:
            x = np.array(x0, dtype=float)
            bad_eq = self.me and np.max(np.abs(self.A @ x - b)) > 1e-7 * (1 + np.max(np.abs(b)))
            bad_in = self.mi and np.max(self.C @ x - d) > 1e-7 * (1 + np.max(np.abs(d)))
            if bad_eq or bad_in:
                x = self.feasible_point(b, d)
        W = self._initial_working_set(x, d, working, max(feas_tol, 1e-9))
        max_iter = max_iter or 20 * (self.n + self.mi + 10)
        y = np.zeros(self.me)
        lam_w = np.zeros(0)
        for it in range(1, max_iter + 1):
            g = self.H @ x + q
            p, y, lam_w = self._eqp(tuple(W), g)
            pnorm = np.max(np.abs(p)) if p.size else 0.0
            if pnorm <= tol * (1.0 + np.max(np.abs(x))):
                if not W or np.min(lam_w) >= -tol * (1.0 + np.max(np.abs(g))):
                    break
                W.pop(int(np.argmin(lam_w)))
                continue
            alpha, block = 1.0, None
            if self.mi:
                inactive = np.ones(self.mi, dtype=bool)
                inactive[W] = False
                Cp = self.C @ p
                cand = inactive & (Cp > 1e-14 * (1.0 + pnorm))
                if np.any(cand):
                    idx = np.nonzero(cand)[0]
                    steps = (d[idx] - self.C[idx] @ x) / Cp[idx]
                    steps = np.maximum(steps, 0.0)
                    k = int(np.argmin(steps))
                    if steps[k] < 1.0:
                        alpha, block = float(steps[k]), int(idx[k])
            x = x + alpha * p
            if block is not None:
                W.append(block)
                W.sort()
        else:
            raise ConvergenceError(
                f"active-set QP hit {max_iter} iterations", residual=float(pnorm)
            )
        lam = np.zeros(self.mi)
        if W:
            lam[W] = np.maximum(lam_w, 0.0)
        res = self.kkt_residual(x, y, lam, q, b, d)
        obj = 0.5 * x @ self.H @ x + q @ x
        return QPResult(x, y, lam, tuple(sorted(W)), it, res, float(obj))

    def kkt_residual(self, x, y, lam, q, b, d):
        """Infinity norm of stationarity, feasibility and complementarity."""
        r = [np.max(np.abs(self.H @ x + q + self.A.T @ y + self.C.T @ lam), initial=0.0)]
        if self.me:
            r.append(np.max(np.abs(self.A @ x - b)))
        if self.mi:
            s = d - self.C @ x
            r.append(max(0.0, -np.min(s)))
            r.append(np.max(np.abs(lam * s)))
            r.append(max(0.0, -np.min(lam)))
        return float(max(r))


def solve_qp(H, q, A=None, b=None, C=None, d=None, x0=None, tol=1e-10):
    """One-shot convenience wrapper around :class:`ActiveSetQP`."""
    return ActiveSetQP(H, A, C).solve(q, b, d, x0=x0, tol=tol)
