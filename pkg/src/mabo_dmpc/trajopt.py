"""Finite-horizon optimal control for a single agent.

The problem solved is::

    min  sum_{l<N} g^l [ stage(x_l, u_l, w_l) + p' s_l + |d_l|_M^2 + lin_l ]
         + g^N [ terminal(x_N, w_N) + pf' s_N + lin_N ]
    s.t. x_0 = s0,  x_{l+1} = f(x_l, u_l)
         w_0 = w_init, w_{l+1} = w_l + d_l          (increment coupling)
         Hx x_l + Hu u_l + h0 <= s_l,  s_l >= 0
         Hf x_N + hf0 <= s_N,           s_N >= 0
         u_lb <= u_l <= u_ub

Quadratic costs are sums of weighted affine residuals
``r = Ex x + Eu u + Ew w + e0`` with cost ``r' W r``. States are condensed
out (single shooting), so the QP is over controls, coupling variables and
slacks. Nonlinear dynamics are handled by SQP around the current control
sequence: Gauss-Newton cost curvature plus the dynamics' second-order
term weighted by the costates, with negative eigenvalues mirrored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, InputError
from .qp import ActiveSetQP

SQP_MAX_ITER = 50
SQP_STEP_TOL = 1e-7
SQP_DECREASE_TOL = 1e-11
MERIT_VIOLATION_WEIGHT = 1e3


@dataclass(frozen=True)
class LinearDynamics:
    """``x+ = A x + B u + c``."""

    A: np.ndarray
    B: np.ndarray
    c: Optional[np.ndarray] = None
    linear = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u + self.c

    def jacobians(self, xs, us):
        N = us.shape[0]
        return np.broadcast_to(self.A, (N,) + self.A.shape), np.broadcast_to(self.B, (N,) + self.B.shape)


@dataclass(frozen=True)
class NonlinearDynamics:
    """Discrete map ``x+ = step(x, u)``.

    ``step`` must accept batched arrays ``(..., nx)``, ``(..., nu)``.
    ``jacobian`` is optional; central differences are used otherwise.
    """

    step_fn: Callable
    nx: int
    nu: int
    jacobian: Optional[Callable] = None
    hessian: Optional[Callable] = None
    linear = False

    def step(self, x, u):
        return self.step_fn(x, u)

    def jacobians(self, xs, us):
        """Per-stage ``(A_l, B_l)`` at ``(xs[l], us[l])``."""
        if self.jacobian is not None:
            return self.jacobian(xs, us)
        N = us.shape[0]
        nx, nu = self.nx, self.nu
        h = 1e-6
        E = np.eye(nx + nu) * h
        z = np.concatenate([xs, us], axis=1)  # (N, nx+nu)
        zp = z[:, None, :] + E[None]
        zm = z[:, None, :] - E[None]
        fp = self.step_fn(zp[..., :nx], zp[..., nx:])
        fm = self.step_fn(zm[..., :nx], zm[..., nx:])
        J = (fp - fm) / (2 * h)  # (N, nx+nu, nx)
        J = np.swapaxes(J, 1, 2)
        return J[:, :, :nx], J[:, :, nx:]

    def weighted_hessians(self, xs, us, weights):
        """Per-stage ``sum_k weights[l, k] * d2 f_k / d(x, u)^2``, shape (N, nx+nu, nx+nu)."""
        if self.hessian is not None:
            return self.hessian(xs, us, weights)
        nx = self.nx
        n = nx + self.nu
        h = 1e-4
        I, J = np.triu_indices(n)
        E = np.eye(n) * h
        shifts = np.concatenate([
            E[I] + E[J], E[I] - E[J], -E[I] + E[J], -E[I] - E[J],
        ])  # (4P, n)
        z = np.concatenate([xs, us], axis=1)
        zs = z[:, None, :] + shifts[None]
        F = np.einsum("lpk,lk->lp", self.step_fn(zs[..., :nx], zs[..., nx:]), weights)
        P = I.size
        d2 = (F[:, :P] - F[:, P : 2 * P] - F[:, 2 * P : 3 * P] + F[:, 3 * P :]) / (4 * h * h)
        M = np.zeros((z.shape[0], n, n))
        M[:, I, J] = d2
        M[:, J, I] = d2
        return M


@dataclass(frozen=True)
class QuadTerm:
    """Weighted residual ``r = Ex x + Eu u + Ew w + e0``, cost ``r' W r``."""

    weight: np.ndarray
    Ex: Optional[np.ndarray] = None
    Eu: Optional[np.ndarray] = None
    Ew: Optional[np.ndarray] = None
    e0: Optional[np.ndarray] = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weight, dtype=float))
        object.__setattr__(self, "weight", W)
        nr = W.shape[0]
        if self.e0 is None:
            object.__setattr__(self, "e0", np.zeros(nr))
        else:
            object.__setattr__(self, "e0", np.asarray(self.e0, dtype=float).reshape(nr))

    @property
    def nr(self):
        return self.weight.shape[0]

    def residual(self, x, u, w):
        r = self.e0.copy()
        if self.Ex is not None:
            r = r + np.asarray(self.Ex) @ x
        if self.Eu is not None and u is not None:
            r = r + np.asarray(self.Eu) @ u
        if self.Ew is not None and w is not None and w.size:
            r = r + np.asarray(self.Ew) @ w
        return r

    def value(self, x, u, w):
        r = self.residual(x, u, w)
        return float(r @ self.weight @ r)

    def values(self, xs, us, ws):
        """Row-wise costs for stacked ``xs`` (L, nx), ``us`` (L, nu) or None, ``ws`` (L, nw)."""
        R = np.broadcast_to(self.e0, (xs.shape[0], self.nr)).copy()
        if self.Ex is not None:
            R += xs @ np.asarray(self.Ex).T
        if self.Eu is not None and us is not None:
            R += us @ np.asarray(self.Eu).T
        if self.Ew is not None and ws is not None and ws.size:
            R += ws @ np.asarray(self.Ew).T
        return np.sum((R @ self.weight) * R, axis=1)


@dataclass(frozen=True)
class Inequalities:
    """Softened affine rows ``Hx x + Hu u + h0 <= sigma`` with weights ``p``."""

    Hx: np.ndarray
    h0: np.ndarray
    weights: np.ndarray
    Hu: Optional[np.ndarray] = None

    def __post_init__(self):
        Hx = np.atleast_2d(np.asarray(self.Hx, dtype=float))
        object.__setattr__(self, "Hx", Hx)
        object.__setattr__(self, "h0", np.asarray(self.h0, dtype=float).reshape(Hx.shape[0]))
        w = np.asarray(self.weights, dtype=float).reshape(Hx.shape[0])
        if np.any(w <= 0):
            raise InputError("slack penalty weights must be positive")
        object.__setattr__(self, "weights", w)
        if self.Hu is not None:
            object.__setattr__(self, "Hu", np.atleast_2d(np.asarray(self.Hu, dtype=float)))

    @property
    def rows(self):
        return self.Hx.shape[0]

    def evaluate(self, x, u=None):
        v = self.Hx @ x + self.h0
        if self.Hu is not None and u is not None:
            v = v + self.Hu @ u
        return v

    @staticmethod
    def empty(nx):
        return Inequalities(np.zeros((0, nx)), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class OCPSpec:
    """One agent's finite-horizon problem.

    ``lin_x`` (N+1, nx), ``lin_u`` (N, nu) and ``lin_w`` (N+1, nw) are
    undiscounted linear cost coefficients per stage; dual-decomposition
    terms enter here. ``coupling_mode`` is ``"free"`` (a coupling copy per
    stage) or ``"increment"`` (pinned ``w_init`` propagated by increments
    penalized with ``smoothing``).
    """

    horizon: int
    dynamics: object
    initial_state: np.ndarray
    stage_terms: tuple = ()
    terminal_terms: tuple = ()
    discount: float = 1.0
    nw: int = 0
    coupling_mode: str = "free"
    initial_coupling: Optional[np.ndarray] = None
    smoothing: Optional[np.ndarray] = None
    stage_ineq: Optional[Inequalities] = None
    terminal_ineq: Optional[Inequalities] = None
    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None
    lin_x: Optional[np.ndarray] = None
    lin_u: Optional[np.ndarray] = None
    lin_w: Optional[np.ndarray] = None
    initial_guess: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise InputError("discount must lie in (0, 1]")
        if self.coupling_mode not in ("free", "increment"):
            raise InputError(f"unknown coupling mode {self.coupling_mode!r}")
        nx, nu, N, nw = self.nx, self.nu, self.horizon, self.nw
        s0 = np.asarray(self.initial_state, dtype=float).reshape(nx)
        object.__setattr__(self, "initial_state", s0)
        if self.stage_ineq is None:
            object.__setattr__(self, "stage_ineq", Inequalities.empty(nx))
        if self.terminal_ineq is None:
            object.__setattr__(self, "terminal_ineq", Inequalities.empty(nx))
        for name, shape in (("lin_x", (N + 1, nx)), ("lin_u", (N, nu)), ("lin_w", (N + 1, nw))):
            val = getattr(self, name)
            val = np.zeros(shape) if val is None else np.asarray(val, dtype=float).reshape(shape)
            object.__setattr__(self, name, val)
        if self.coupling_mode == "increment":
            w0 = np.zeros(nw) if self.initial_coupling is None else self.initial_coupling
            object.__setattr__(self, "initial_coupling", np.asarray(w0, dtype=float).reshape(nw))
            M = np.zeros((nw, nw)) if self.smoothing is None else np.atleast_2d(self.smoothing)
            object.__setattr__(self, "smoothing", np.asarray(M, dtype=float).reshape(nw, nw))
        lo = -np.inf * np.ones(nu) if self.u_lower is None else np.asarray(self.u_lower, dtype=float).reshape(nu)
        hi = np.inf * np.ones(nu) if self.u_upper is None else np.asarray(self.u_upper, dtype=float).reshape(nu)
        if np.any(lo > hi):
            raise InputError("input bounds are inverted")
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)

    @property
    def nx(self):
        return self.dynamics.nx

    @property
    def nu(self):
        return self.dynamics.nu

    def with_duals(self, lin_x=None, lin_w=None):
        kw = {}
        if lin_x is not None:
            kw["lin_x"] = lin_x
        if lin_w is not None:
            kw["lin_w"] = lin_w
        return replace(self, **kw)


@dataclass
class Trajectory:
    states: np.ndarray  # (N+1, nx)
    controls: np.ndarray  # (N, nu)
    couplings: np.ndarray  # (N+1, nw)
    coupling_increments: np.ndarray  # (N, nw)
    slacks: np.ndarray  # (N, nh)
    terminal_slacks: np.ndarray  # (nhf,)
    objective_value: float = 0.0
    kkt_residual: float = 0.0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def constraint_slacks(self):
        return list(self.slacks) + [self.terminal_slacks]


def simulate(dynamics, x0, controls):
    xs = np.empty((controls.shape[0] + 1, np.size(x0)))
    xs[0] = x0
    for l, u in enumerate(controls):
        xs[l + 1] = dynamics.step(xs[l], u)
    return xs


def propagate_couplings(w0, increments):
    w0 = np.reshape(w0, (1, -1))
    return np.vstack([w0, w0 + np.cumsum(increments, axis=0)])


def evaluate_cost(spec: OCPSpec, traj: Trajectory) -> float:
    """Discounted objective of a trajectory, linear (dual) terms included."""
    N = spec.horizon
    xs, us, ws = traj.states, traj.controls, traj.couplings
    if xs.shape != (N + 1, spec.nx) or us.shape != (N, spec.nu) or ws.shape != (N + 1, spec.nw):
        raise InputError("trajectory dimensions do not match the problem")
    si, sf = spec.stage_ineq, spec.terminal_ineq
    disc = spec.discount ** np.arange(N + 1)
    stage = np.zeros(N)
    for t in spec.stage_terms:
        stage += t.values(xs[:N], us, ws[:N])
    stage += np.sum(spec.lin_x[:N] * xs[:N], axis=1) + np.sum(spec.lin_u * us, axis=1)
    stage += np.sum(spec.lin_w[:N] * ws[:N], axis=1)
    if si.rows:
        stage += traj.slacks @ si.weights
    if spec.coupling_mode == "increment" and spec.nw:
        D = traj.coupling_increments
        stage += np.sum((D @ spec.smoothing) * D, axis=1)
    term = sum(t.value(xs[N], None, ws[N]) for t in spec.terminal_terms)
    term += spec.lin_x[N] @ xs[N] + spec.lin_w[N] @ ws[N]
    if sf.rows:
        term += sf.weights @ traj.terminal_slacks
    return float(disc[:N] @ stage + disc[N] * term)


class _Layout:
    """Index bookkeeping for the condensed decision vector."""

    def __init__(self, spec):
        N, nu, nw = spec.horizon, spec.nu, spec.nw
        self.N, self.nu, self.nw = N, nu, nw
        self.nh = spec.stage_ineq.rows
        self.nhf = spec.terminal_ineq.rows
        self.free = spec.coupling_mode == "free"
        nwv = (N + 1) * nw if self.free else N * nw
        self.u = slice(0, N * nu)
        self.wv = slice(self.u.stop, self.u.stop + nwv)
        self.s = slice(self.wv.stop, self.wv.stop + N * self.nh)
        self.sf = slice(self.s.stop, self.s.stop + self.nhf)
        self.nz = self.sf.stop


class OCPSolver:
    """Condensed solver that caches structure across repeated solves.

    Successive calls that only change the linear cost terms (``lin_x``,
    ``lin_w``) reuse the condensed Hessian, the constraint matrices and the
    active-set factorizations, and warm-start from the previous solution.
    """

    def __init__(self, spec: OCPSpec):
        self.spec = spec
        self.layout = _Layout(spec)
        self._lin_point = None  # controls the current condensation is built around
        self._qp = None
        self._last_z = None
        self._last_active = None
        self._last_lam = None
        self._static = None
        if spec.dynamics.linear:
            self._condense(None)

    # -- condensation ---------------------------------------------------
    def _condense(self, u_nom):
        spec, L = self.spec, self.layout
        N, nx, nu, nw, nz = spec.horizon, spec.nx, spec.nu, spec.nw, L.nz
        if u_nom is None:
            x_nom = None
            A_l, B_l = spec.dynamics.jacobians(None, np.zeros((N, nu)))
            c_l = np.broadcast_to(spec.dynamics.c, (N, nx))
        else:
            x_nom = simulate(spec.dynamics, spec.initial_state, u_nom)
            A_l, B_l = spec.dynamics.jacobians(x_nom[:-1], u_nom)
            c_l = x_nom[1:] - np.einsum("lij,lj->li", A_l, x_nom[:-1]) - np.einsum("lij,lj->li", B_l, u_nom)
        self._A_lin = A_l
        # x = x_aff + X z
        X = np.zeros((N + 1, nx, nz))
        x_aff = np.zeros((N + 1, nx))
        x_aff[0] = spec.initial_state
        for l in range(N):
            X[l + 1] = A_l[l] @ X[l]
            X[l + 1][:, L.u.start + l * nu : L.u.start + (l + 1) * nu] += B_l[l]
            x_aff[l + 1] = A_l[l] @ x_aff[l] + c_l[l]
        st = self._static_parts()
        U, Wm, w_aff, disc = st["U"], st["Wm"], st["w_aff"], st["disc"]
        self.X, self.x_aff, self.U, self.Wm, self.w_aff = X, x_aff, U, Wm, w_aff
        self.disc = disc

        H = st["H"].copy()
        q = st["q"].copy()
        for term in spec.stage_terms:
            J = np.zeros((N, term.nr, nz))
            r0 = np.tile(term.e0, (N, 1))
            if term.Ex is not None:
                J += np.asarray(term.Ex) @ X[:N]
                r0 += x_aff[:N] @ np.asarray(term.Ex).T
            if term.Eu is not None:
                J += np.asarray(term.Eu) @ U
            if term.Ew is not None and nw:
                J += np.asarray(term.Ew) @ Wm[:N]
                r0 += w_aff[:N] @ np.asarray(term.Ew).T
            WJ = (term.weight @ J) * disc[:N, None, None]
            H += 2 * J.reshape(-1, nz).T @ WJ.reshape(-1, nz)
            q += 2 * WJ.reshape(-1, nz).T @ r0.ravel()
        for term in spec.terminal_terms:
            J = np.zeros((term.nr, nz))
            r0 = term.e0.copy()
            if term.Ex is not None:
                J += np.asarray(term.Ex) @ X[N]
                r0 += np.asarray(term.Ex) @ x_aff[N]
            if term.Ew is not None and nw:
                J += np.asarray(term.Ew) @ Wm[N]
                r0 += np.asarray(term.Ew) @ w_aff[N]
            H += 2 * disc[N] * J.T @ term.weight @ J
            q += 2 * disc[N] * J.T @ term.weight @ r0
        si, sf = spec.stage_ineq, spec.terminal_ineq
        self.H = 0.5 * (H + H.T)
        self.q_base = q
        # maps from undiscounted linear coefficients to q
        self.Xflat = X.reshape((N + 1) * nx, nz)
        self.Wflat = Wm.reshape((N + 1) * nw, nz)
        self.x_aff_flat = x_aff.ravel()
        self.w_aff_flat = w_aff.ravel()

        # inequalities C z <= d
        rows, rhs = [], []
        if L.nh:
            G = si.Hx @ X[:N]
            if si.Hu is not None:
                G = G + si.Hu @ U
            G = G.reshape(N * L.nh, nz)
            G[:, L.s] -= np.eye(N * L.nh)
            rows.append(G)
            rhs.append(-(x_aff[:N] @ si.Hx.T + si.h0).ravel())
        if L.nhf:
            G = sf.Hx @ X[N]
            G[:, L.sf] -= np.eye(L.nhf)
            rows.append(G)
            rhs.append(-(sf.Hx @ x_aff[N] + sf.h0))
        rows.extend(st["rows"])
        rhs.extend(st["rhs"])
        self.C = np.vstack(rows) if rows else np.zeros((0, nz))
        self.d = np.concatenate(rhs) if rhs else np.zeros(0)
        self.n_soft_rows = N * L.nh + L.nhf
        self._qp = ActiveSetQP(self.H, None, self.C)
        self._lin_point = None if u_nom is None else u_nom.copy()
        if u_nom is None:
            # cost at z = 0 without linear terms; the QP objective is measured from here
            zero = replace(spec, lin_x=np.zeros_like(spec.lin_x), lin_w=np.zeros_like(spec.lin_w))
            self._const = evaluate_cost(zero, self._assemble_raw(np.zeros(nz)))

    def _static_parts(self):
        """Pieces of the condensed problem that do not depend on the linearization."""
        if self._static is not None:
            return self._static
        spec, L = self.spec, self.layout
        N, nu, nw, nz = spec.horizon, spec.nu, spec.nw, L.nz
        U = np.zeros((N, nu, nz))
        for l in range(N):
            U[l][:, l * nu : (l + 1) * nu] = np.eye(nu)
        Wm = np.zeros((N + 1, nw, nz))
        w_aff = np.zeros((N + 1, nw))
        if nw:
            if L.free:
                for l in range(N + 1):
                    Wm[l][:, L.wv.start + l * nw : L.wv.start + (l + 1) * nw] = np.eye(nw)
            else:
                w_aff[:] = spec.initial_coupling
                for l in range(N):
                    Wm[l + 1] = Wm[l]
                    Wm[l + 1][:, L.wv.start + l * nw : L.wv.start + (l + 1) * nw] += np.eye(nw)
        disc = spec.discount ** np.arange(N + 1)
        H = np.zeros((nz, nz))
        q = np.zeros(nz)
        if nw and not L.free:
            for l in range(N):
                sl = slice(L.wv.start + l * nw, L.wv.start + (l + 1) * nw)
                H[sl, sl] += 2 * disc[l] * spec.smoothing
        for l in range(N):
            q[L.s.start + l * L.nh : L.s.start + (l + 1) * L.nh] += disc[l] * spec.stage_ineq.weights
            q[l * nu : (l + 1) * nu] += disc[l] * spec.lin_u[l]
        q[L.sf] += disc[N] * spec.terminal_ineq.weights
        rows, rhs = [], []
        nslack = N * L.nh + L.nhf
        if nslack:
            G = np.zeros((nslack, nz))
            G[:, L.s.start : L.sf.stop] = -np.eye(nslack)
            rows.append(G)
            rhs.append(np.zeros(nslack))
        for k in range(nu):
            for bound, sign in ((spec.u_upper[k], 1.0), (spec.u_lower[k], -1.0)):
                if np.isfinite(bound):
                    G = np.zeros((N, nz))
                    G[np.arange(N), np.arange(N) * nu + k] = sign
                    rows.append(G)
                    rhs.append(sign * bound * np.ones(N))
        self._static = dict(U=U, Wm=Wm, w_aff=w_aff, disc=disc, H=H, q=q, rows=rows, rhs=rhs)
        return self._static

    def linear_term(self, lin_x, lin_w):
        spec = self.spec
        N, nx, nw = spec.horizon, spec.nx, spec.nw
        wx = (self.disc[:, None] * lin_x).ravel()
        q = self.q_base + self.Xflat.T @ wx
        if nw:
            ww = (self.disc[:, None] * lin_w).ravel()
            q = q + self.Wflat.T @ ww
        self._q_scale = float(np.max(np.abs(q), initial=0.0))
        return q

    # -- feasible starts ------------------------------------------------
    def _feasible_start(self, u):
        spec, L = self.spec, self.layout
        z = np.zeros(L.nz)
        u = np.clip(u, spec.u_lower, spec.u_upper)
        z[L.u] = u.ravel()
        if self._last_z is not None:
            z[L.wv] = self._last_z[L.wv]
        if self.n_soft_rows:
            # slack rows come first in C; set slacks to the smallest feasible value
            zs = z.copy()
            zs[L.s.start : L.sf.stop] = 0.0
            viol = self.C[: self.n_soft_rows] @ zs - self.d[: self.n_soft_rows]
            z[L.s.start : L.sf.stop] = np.maximum(viol, 0.0)
        return z

    # -- solve ----------------------------------------------------------
    def solve(self, lin_x=None, lin_w=None, tol=1e-6, warm=True) -> Trajectory:
        spec = self.spec
        lin_x = spec.lin_x if lin_x is None else np.asarray(lin_x, dtype=float).reshape(spec.lin_x.shape)
        lin_w = spec.lin_w if lin_w is None else np.asarray(lin_w, dtype=float).reshape(spec.lin_w.shape)
        if spec.dynamics.linear:
            z, res = self._solve_linear(lin_x, lin_w, warm)
            iters = res.iterations
        else:
            z, res, iters = self._solve_sqp(lin_x, lin_w, tol, warm)
        # residuals scale with the cost data, so the tolerance is relative to |q|
        if res.kkt_residual > tol * max(1.0, self._q_scale):
            raise ConvergenceError(
                f"QP KKT residual {res.kkt_residual:.3e} exceeds {tol:.1e}", residual=res.kkt_residual
            )
        self._last_z = z
        self._last_active = res.active
        self._last_lam = res.lam
        return self._assemble(z, lin_x, lin_w, res, iters)

    def _solve_linear(self, lin_x, lin_w, warm):
        q = self.linear_term(lin_x, lin_w)
        if warm and self._last_z is not None:
            x0, hint = self._last_z, self._last_active
        else:
            guess = self.spec.initial_guess
            guess = np.zeros((self.spec.horizon, self.spec.nu)) if guess is None else guess
            x0, hint = self._feasible_start(np.asarray(guess, dtype=float)), None
        res = self._qp.solve(q, None, self.d, x0=x0, working=hint)
        return res.x, res

    def _merit(self, z, lin_x, lin_w):
        traj = self._assemble_raw(z)
        spec = replace(self.spec, lin_x=lin_x, lin_w=lin_w)
        return evaluate_cost(spec, traj)

    def _solve_sqp(self, lin_x, lin_w, tol, warm):
        spec, L = self.spec, self.layout
        if warm and self._last_z is not None:
            u = self._last_z[L.u].reshape(spec.horizon, spec.nu)
            z = self._last_z.copy()
            hint = self._last_active
        else:
            guess = spec.initial_guess
            u = np.zeros((spec.horizon, spec.nu)) if guess is None else np.asarray(guess, dtype=float)
            u = np.clip(u, spec.u_lower, spec.u_upper)
            z, hint = None, None
        lam = self._last_lam
        total_iters = 0
        for it in range(1, SQP_MAX_ITER + 1):
            if self._lin_point is None or not np.array_equal(self._lin_point, u):
                self._condense(u)
            if z is None:
                z = self._feasible_start(u)
            # slacks from the true dynamics are feasible for the new linearization
            z = self._reslack(z)
            Hn = self._newton_hessian(z, lin_x, lam)
            self._qp = ActiveSetQP(Hn, None, self.C)
            # the added curvature is centred at the current iterate
            q = self.linear_term(lin_x, lin_w) - (Hn - self.H) @ z
            res = self._qp.solve(q, None, self.d, x0=z, working=hint)
            lam = res.lam
            total_iters += res.iterations
            hint = res.active
            step = res.x - z
            step_u = np.max(np.abs(step[L.u])) if spec.nu else 0.0
            m0 = self._merit(z, lin_x, lin_w)
            # decrease predicted by the local model; flat directions make step_u a poor test alone
            predicted = 0.5 * z @ Hn @ z + q @ z - res.objective
            small = step_u <= SQP_STEP_TOL or predicted <= SQP_DECREASE_TOL * (1.0 + abs(m0))
            if small and res.kkt_residual <= tol * max(1.0, self._q_scale):
                return res.x, res, total_iters
            t = 1.0
            accepted = None
            for _ in range(40):
                cand = self._reslack(z + t * step)
                if self._merit(cand, lin_x, lin_w) <= m0 + 1e-12 * (1 + abs(m0)):
                    accepted = cand
                    break
                t *= 0.5
            if accepted is None:
                if step_u <= 1e3 * SQP_STEP_TOL:
                    return res.x, res, total_iters
                raise ConvergenceError("SQP line search failed", residual=float(step_u))
            z = accepted
            u = z[L.u].reshape(spec.horizon, spec.nu)
        raise ConvergenceError(f"SQP hit {SQP_MAX_ITER} iterations", residual=float(step_u))

    def _costates(self, traj, lin_x, lam):
        """Sensitivities of the Lagrangian to each predicted state (later controls fixed)."""
        spec = self.spec
        N, nx = spec.horizon, spec.nx
        xs, us, ws = traj.states, traj.controls, traj.couplings
        g = np.zeros((N + 1, nx))
        for t in spec.stage_terms:
            if t.Ex is None:
                continue
            R = np.broadcast_to(t.e0, (N, t.nr)) + xs[:N] @ np.asarray(t.Ex).T
            if t.Eu is not None:
                R = R + us @ np.asarray(t.Eu).T
            if t.Ew is not None and spec.nw:
                R = R + ws[:N] @ np.asarray(t.Ew).T
            g[:N] += R @ (t.weight + t.weight.T) @ np.asarray(t.Ex)
        for t in spec.terminal_terms:
            if t.Ex is None:
                continue
            r = t.residual(xs[N], None, ws[N])
            g[N] += np.asarray(t.Ex).T @ (t.weight + t.weight.T) @ r
        g = self.disc[:, None] * (g + lin_x)
        if lam is not None:
            L, si, sf = self.layout, spec.stage_ineq, spec.terminal_ineq
            if L.nh:
                g[:N] += lam[: N * L.nh].reshape(N, L.nh) @ si.Hx
            if L.nhf:
                g[N] += lam[N * L.nh : N * L.nh + L.nhf] @ sf.Hx
        p = np.zeros((N + 1, nx))
        p[N] = g[N]
        for l in range(N - 1, 0, -1):
            p[l] = g[l] + self._A_lin[l].T @ p[l + 1]
        return p

    def _newton_hessian(self, z, lin_x, lam):
        """Gauss-Newton Hessian plus the dynamics' second-order term.

        The curvature of the dynamics matters when tracking residuals stay
        large over the horizon; without it the iteration only converges
        linearly. Negative eigenvalues are mirrored to keep the QP convex.
        """
        spec = self.spec
        N, nx, nu = spec.horizon, spec.nx, spec.nu
        traj = self._assemble_raw(z)
        p = self._costates(traj, lin_x, lam)
        M = spec.dynamics.weighted_hessians(traj.states[:N], traj.controls, p[1:])
        S = np.concatenate([self.X[:N], self.U], axis=1)  # (N, nx+nu, nz)
        H = self.H + np.einsum("laz,lab,lby->zy", S, M, S, optimize=True)
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        floor = 1e-10 * max(1.0, float(np.max(np.abs(w))))
        if w[0] < -floor:
            H = (V * np.maximum(np.abs(w), 0.0)) @ V.T
            H = 0.5 * (H + H.T)
        return H

    def _reslack(self, z):
        """Replace slacks by their smallest feasible values under the true dynamics."""
        L, spec = self.layout, self.spec
        if not self.n_soft_rows:
            return z
        u = z[L.u].reshape(spec.horizon, spec.nu)
        xs = simulate(spec.dynamics, spec.initial_state, u)
        z = z.copy()
        si, sf = spec.stage_ineq, spec.terminal_ineq
        if L.nh:
            vals = np.array([si.evaluate(xs[l], u[l]) for l in range(spec.horizon)])
            z[L.s] = np.maximum(vals, 0.0).ravel()
        if L.nhf:
            z[L.sf] = np.maximum(sf.evaluate(xs[-1]), 0.0)
        return z

    def _assemble_raw(self, z):
        spec, L = self.spec, self.layout
        N, nu, nw = spec.horizon, spec.nu, spec.nw
        u = z[L.u].reshape(N, nu)
        if spec.dynamics.linear and self._qp is not None:
            xs = self.x_aff + (self.Xflat @ z).reshape(N + 1, spec.nx)
        else:
            xs = simulate(spec.dynamics, spec.initial_state, u)
        if nw == 0:
            ws, ds = np.zeros((N + 1, 0)), np.zeros((N, 0))
        elif L.free:
            ws, ds = z[L.wv].reshape(N + 1, nw).copy(), np.zeros((N, nw))
        else:
            ds = z[L.wv].reshape(N, nw).copy()
            ws = propagate_couplings(spec.initial_coupling, ds)
        s = np.maximum(z[L.s].reshape(N, L.nh), 0.0)
        sf = np.maximum(z[L.sf], 0.0)
        return Trajectory(xs, u.copy(), ws, ds, s, sf)

    def _assemble(self, z, lin_x, lin_w, res, iters):
        traj = self._assemble_raw(z)
        if self.spec.dynamics.linear:
            lin = self.disc @ np.sum(lin_x * self.x_aff, axis=1)
            if self.spec.nw:
                lin += self.disc @ np.sum(lin_w * self.w_aff, axis=1)
            traj.objective_value = float(res.objective + self._const + lin)
        else:
            traj.objective_value = evaluate_cost(replace(self.spec, lin_x=lin_x, lin_w=lin_w), traj)
        traj.kkt_residual = res.kkt_residual
        traj.iterations = iters
        traj.info = {"active": res.active, "qp_objective": res.objective}
        return traj


def solve_ocp(spec: OCPSpec, tol: float = 1e-6) -> Trajectory:
    """Solve one OCP from scratch.

    Raises
    ------
    ConvergenceError
        Iteration limit reached or KKT residual above ``tol``.
    """
    return OCPSolver(spec).solve(tol=tol, warm=False)
