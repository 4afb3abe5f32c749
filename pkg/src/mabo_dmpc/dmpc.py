"""Dual-decomposition distributed MPC.

Each agent ``i`` keeps a local copy ``wbar_i`` of its neighbors' selected
states. The coupling ``wbar_i = W_i(x_neighbors)`` is dualized: agent ``i``
pays ``mu_i' wbar_i - sum_j mu_ji' W_ji(x_i)`` and the multipliers move by
``mu_i += beta (wbar_i - what_i)`` until they settle.

Three local formulations are available:

``plain``
    free coupling copies at every stage, hard constraints, no discount.
``modified``
    the first copy is pinned to the neighbors' measured states and later
    copies evolve by penalized increments.
``parametric``
    modified plus learnable cost/constraint shifts, soft constraints and a
    discount factor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import plants
from .errors import ConvergenceError, InputError, IterationError
from .qp import ActiveSetQP
from .trajopt import Inequalities, OCPSolver, OCPSpec, QuadTerm

HARD_WEIGHT = 1e9
HARD_TOL = 1e-6


@dataclass(frozen=True)
class CouplingGraph:
    """Directed edges ``(i, j)``: agent ``i`` copies agent ``j``'s states."""

    n_agents: int
    edges: tuple
    copied: np.ndarray
    coupled: np.ndarray
    offsets: dict
    weight: float = 10.0
    smoothing: float = 1.0

    @classmethod
    def from_scenario(cls, cfg):
        cp = cfg.coupling
        edges = tuple(sorted((e.agent, e.neighbor) for e in cp.edges))
        offsets = {(e.agent, e.neighbor): np.asarray(e.offset, dtype=float) for e in cp.edges}
        return cls(
            cfg.n_agents, edges, np.asarray(cp.copied_states, dtype=int),
            np.asarray(cp.coupled_states, dtype=int), offsets, cp.weight, cp.smoothing,
        )

    def neighbors(self, i):
        return [j for a, j in self.edges if a == i]

    def copiers(self, i):
        """Agents holding a copy of agent ``i``."""
        return [a for a, j in self.edges if j == i]

    def nw(self, i):
        return len(self.neighbors(i)) * len(self.copied)

    def block(self, i, j):
        k = self.neighbors(i).index(j)
        c = len(self.copied)
        return slice(k * c, (k + 1) * c)

    def stack(self, i, trajectories):
        """``what_i``: neighbors' state trajectories through the selections."""
        nb = self.neighbors(i)
        if not nb:
            T = trajectories[i].shape[0]
            return np.zeros((T, 0))
        return np.concatenate([trajectories[j][:, self.copied] for j in nb], axis=1)

    def coupled_positions(self):
        """Positions of the coupled components inside one copied block."""
        return np.array([int(np.nonzero(self.copied == c)[0][0]) for c in self.coupled], dtype=int)


@dataclass
class ThetaParams:
    """Per-agent learnable shifts; all zeros is the unlearned controller."""

    reference_bias: np.ndarray
    log_weight: np.ndarray
    input_log_weight: np.ndarray
    backoff: np.ndarray
    coupling_bias: np.ndarray

    @classmethod
    def identity(cls, cfg, agent):
        ag = cfg.agents[agent]
        graph = CouplingGraph.from_scenario(cfg)
        return cls(
            np.zeros(ag.plant.nx), np.zeros(ag.plant.nx), np.zeros(ag.plant.nu),
            np.zeros(len(ag.state_constraints)),
            np.zeros(len(graph.neighbors(agent)) * len(graph.coupled)),
        )

    def is_identity(self):
        return all(not np.any(getattr(self, f)) for f in self.__dataclass_fields__)

    def check_finite(self):
        for f in self.__dataclass_fields__:
            if not np.all(np.isfinite(getattr(self, f))):
                raise InputError(f"non-finite parameter {f}")


def theta_from_vector(cfg, zeta):
    """Split a global parameter vector into per-agent ``ThetaParams``.

    Component ``k`` follows ``cfg.learning.params[k]``: its owner agent,
    the field it shifts and the index within that field.
    """
    specs = cfg.learning.params
    zeta = np.asarray(zeta, dtype=float).ravel()
    if zeta.size != len(specs):
        raise InputError(f"parameter vector has {zeta.size} entries, expected {len(specs)}")
    thetas = [ThetaParams.identity(cfg, i) for i in range(cfg.n_agents)]
    for val, pc in zip(zeta, specs):
        arr = getattr(thetas[pc.agent], pc.kind)
        if not 0 <= pc.index < arr.size:
            raise InputError(f"parameter index {pc.index} out of range for {pc.kind}")
        arr[pc.index] += val
    return thetas


def identity_thetas(cfg):
    return [ThetaParams.identity(cfg, i) for i in range(cfg.n_agents)]


@dataclass
class DualState:
    """Multipliers ``mu_i`` (N+1, nw_i) per agent plus the last two snapshots.

    The block of ``mu_i`` for neighbor ``j`` is the edge multiplier ``mu_ij``.
    """

    mu: list
    iteration: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=2))

    @classmethod
    def zeros(cls, graph, horizon):
        return cls([np.zeros((horizon + 1, graph.nw(i))) for i in range(graph.n_agents)])

    def edge_multiplier(self, graph, i, j):
        return self.mu[i][:, graph.block(i, j)]


def dual_linear_terms(graph, dual, agent, nx, horizon):
    """``(lin_x, lin_w)`` of agent ``agent`` for the current multipliers."""
    lin_w = dual.mu[agent]
    lin_x = np.zeros((horizon + 1, nx))
    for j in graph.copiers(agent):
        lin_x[:, graph.copied] -= dual.mu[j][:, graph.block(j, agent)]
    return lin_x, lin_w


# -- local problem construction -------------------------------------------

def _diag(v, n, default):
    return np.diag(np.full(n, default) if v is None else np.asarray(v, dtype=float))


def _local_base(agent, cfg, state, neighbor_states, theta, mode, graph, model=None):
    ag = cfg.agents[agent]
    model = plants.prediction_model(agent, cfg) if model is None else model
    nx, nu, N = model.nx, model.nu, cfg.horizon
    param = mode == "parametric"
    th = theta if (param and theta is not None) else ThetaParams.identity(cfg, agent)
    th.check_finite()
    ref = np.zeros(nx) if ag.reference is None else np.asarray(ag.reference, dtype=float)
    ref = ref + th.reference_bias
    scale = np.exp(th.log_weight)
    Q = _diag(ag.state_weight, nx, 1.0) * scale
    Qf = (_diag(ag.terminal_weight, nx, 1.0) if ag.terminal_weight is not None else _diag(ag.state_weight, nx, 1.0)) * scale
    R = _diag(ag.input_weight, nu, 0.1) * np.exp(th.input_log_weight)
    eye = np.eye(nx)
    stage = [QuadTerm(Q, Ex=eye, e0=-ref), QuadTerm(R, Eu=np.eye(nu))]
    terminal = [QuadTerm(Qf, Ex=eye, e0=-ref)]

    nb = graph.neighbors(agent)
    nw = graph.nw(agent)
    if nb and graph.weight > 0 and graph.coupled.size:
        pos = graph.coupled_positions()
        nc = graph.coupled.size
        rows = len(nb) * nc
        Ex = np.zeros((rows, nx))
        Ew = np.zeros((rows, nw))
        e0 = np.zeros(rows)
        for k, j in enumerate(nb):
            r = slice(k * nc, (k + 1) * nc)
            Ex[r, graph.coupled] = -np.eye(nc)
            blk = graph.block(agent, j)
            Ew[r, blk.start + pos] = np.eye(nc)
            e0[r] = -(graph.offsets[(agent, j)] + th.coupling_bias[r])
        W = graph.weight * np.eye(rows)
        stage.append(QuadTerm(W, Ex=Ex, Ew=Ew, e0=e0))
        terminal.append(QuadTerm(W, Ex=Ex, Ew=Ew, e0=e0))

    rows_H, rows_h, rows_p = [], [], []
    for k, sc in enumerate(ag.state_constraints):
        pl, pu = (ag.constraint_penalty * 2)[:2] if len(ag.constraint_penalty) == 1 else ag.constraint_penalty[:2]
        b = th.backoff[k]
        if sc.lower is not None:
            r = np.zeros(nx)
            r[sc.index] = -1.0
            rows_H.append(r), rows_h.append(sc.lower + b), rows_p.append(pl)
        if sc.upper is not None:
            r = np.zeros(nx)
            r[sc.index] = 1.0
            rows_H.append(r), rows_h.append(-(sc.upper - b)), rows_p.append(pu)
    if rows_H:
        p = np.asarray(rows_p, dtype=float) if param else np.full(len(rows_p), HARD_WEIGHT)
        ineq = Inequalities(np.array(rows_H), np.array(rows_h), p)
    else:
        ineq = None

    kw = dict(
        horizon=N, dynamics=model.dynamics(), initial_state=state,
        stage_terms=tuple(stage), terminal_terms=tuple(terminal),
        discount=cfg.discount if param else 1.0, nw=nw,
        stage_ineq=ineq, terminal_ineq=ineq,
        u_lower=ag.input_lower, u_upper=ag.input_upper,
    )
    if mode in ("modified", "parametric"):
        if nb and any(neighbor_states is None or neighbor_states[j] is None for j in nb):
            raise InputError(f"agent {agent} needs its neighbors' measured states")
        w0 = (
            np.concatenate([np.asarray(neighbor_states[j], dtype=float)[graph.copied] for j in nb])
            if nb else np.zeros(0)
        )
        kw.update(coupling_mode="increment", initial_coupling=w0, smoothing=graph.smoothing * np.eye(nw))
    elif mode != "plain":
        raise InputError(f"unknown mode {mode!r}")
    return OCPSpec(**kw)


def build_local_problem(agent, scenario, state, neighbor_states, dual, params=None, mode="parametric"):
    """Agent ``agent``'s OCP including the current dual terms.

    ``neighbor_states`` is indexable by agent id (the full joint state
    works); it is required in the modified and parametric modes, where
    the first coupling copy is pinned to the neighbors' measured states.
    """
    graph = CouplingGraph.from_scenario(scenario)
    spec = _local_base(agent, scenario, state, neighbor_states, params, mode, graph)
    lin_x, lin_w = dual_linear_terms(graph, dual, agent, spec.nx, scenario.horizon)
    return spec.with_duals(lin_x, lin_w)


class LocalProblem:
    """One agent's OCP for the current time step, solved repeatedly with new duals."""

    def __init__(self, agent, spec, graph, tol=1e-6):
        self.agent = agent
        self.spec = spec
        self.graph = graph
        self.tol = tol
        self.solver = OCPSolver(spec)
        si = spec.stage_ineq
        self.hard = bool(si.rows) and np.all(si.weights >= HARD_WEIGHT)
        self.last = None

    def solve(self, dual):
        lin_x, lin_w = dual_linear_terms(self.graph, dual, self.agent, self.spec.nx, self.spec.horizon)
        try:
            traj = self.solver.solve(lin_x, lin_w, tol=self.tol, warm=self.last is not None)
        except (ConvergenceError, InputError) as exc:
            raise IterationError(f"agent {self.agent}: {exc}", agent=self.agent) from exc
        if self.hard:
            viol = max(np.max(traj.slacks[1:], initial=0.0), np.max(traj.terminal_slacks, initial=0.0))
            if viol > HARD_TOL:
                raise IterationError(
                    f"agent {self.agent}: hard constraints infeasible (violation {viol:.2e})", agent=self.agent
                )
        self.last = traj
        return traj


def dual_iteration(problems, dual: DualState, beta, graph):
    """Solve every local problem at the current multipliers, then ascend.

    ``beta`` is a scalar or one step per agent. Returns the trajectories
    and the (mutated) dual state.
    """
    m = len(problems)
    betas = np.broadcast_to(np.asarray(beta, dtype=float), (m,))
    trajs = [p.solve(dual) for p in problems]
    states = [t.states for t in trajs]
    mu_used = [mu.copy() for mu in dual.mu]
    wbars = [t.couplings.copy() for t in trajs]
    for i in range(m):
        what = graph.stack(i, states)
        dual.mu[i] = dual.mu[i] + betas[i] * (trajs[i].couplings - what)
    dual.history.append((mu_used, wbars))
    dual.iteration += 1
    return trajs, dual


def check_stop(dual: DualState, eps1, eps2, max_iter, use_coupling=True):
    """``"converged"``, ``"budget_exhausted"`` or ``"continue"``.

    Converged when every agent's multiplier change is strictly below
    ``eps1``, or (if ``use_coupling``) every agent's coupling-copy change is
    strictly below ``eps2``. Needs two snapshots.
    """
    if len(dual.history) == 2:
        (mu0, w0), (mu1, w1) = dual.history
        dmu = [np.linalg.norm(a - b) for a, b in zip(mu1, mu0)]
        if all(d < eps1 for d in dmu):
            return "converged"
        if use_coupling:
            dw = [np.linalg.norm(a - b) for a, b in zip(w1, w0)]
            if all(d < eps2 for d in dw):
                return "converged"
    if dual.iteration >= max_iter:
        return "budget_exhausted"
    return "continue"


@dataclass
class DMPCResult:
    actions: list
    multipliers: list
    trajectories: list
    iterations: int
    stop_reason: str
    primal_residual: float
    dual_value: float
    objective: float


def _residual(graph, trajs):
    states = [t.states for t in trajs]
    r = 0.0
    for i, t in enumerate(trajs):
        if t.couplings.size:
            r = max(r, float(np.max(np.abs(t.couplings - graph.stack(i, states)))))
    return r


class DMPCController:
    """Receding-horizon controller running the dual iteration at each step.

    Holds per-agent prediction models and the previous step's solution for
    warm starts (shifted controls); multipliers are reset every step.
    """

    def __init__(self, scenario, thetas=None, mode=None, dual_cfg=None):
        self.cfg = scenario
        self.mode = scenario.mode if mode is None else mode
        self.dual_cfg = scenario.dual if dual_cfg is None else dual_cfg
        self.graph = CouplingGraph.from_scenario(scenario)
        self.thetas = identity_thetas(scenario) if thetas is None else thetas
        self.models = [plants.prediction_model(i, scenario) for i in range(scenario.n_agents)]
        self._prev = None

    def reset(self):
        self._prev = None

    def problems(self, states):
        probs = []
        for i in range(self.cfg.n_agents):
            spec = _local_base(i, self.cfg, states[i], states, self.thetas[i], self.mode, self.graph, self.models[i])
            if self._prev is not None:
                u = self._prev[i].controls
                spec = _with_guess(spec, np.vstack([u[1:], u[-1:]]))
            probs.append(LocalProblem(i, spec, self.graph, self.dual_cfg.solver_tol))
        return probs

    def step(self, states):
        dc = self.dual_cfg
        probs = self.problems(states)
        dual = DualState.zeros(self.graph, self.cfg.horizon)
        while True:
            trajs, dual = dual_iteration(probs, dual, dc.step, self.graph)
            reason = check_stop(dual, dc.eps_mu, dc.eps_w, dc.max_iter, dc.stop_on_coupling)
            if reason != "continue":
                break
        self._prev = trajs
        mu_final = dual.history[-1][0]
        objective = sum(_primal_cost(p.spec, t) for p, t in zip(probs, trajs))
        return DMPCResult(
            actions=[t.controls[0].copy() for t in trajs],
            multipliers=mu_final,
            trajectories=trajs,
            iterations=dual.iteration,
            stop_reason=reason,
            primal_residual=_residual(self.graph, trajs),
            dual_value=float(sum(t.objective_value for t in trajs)),
            objective=float(objective),
        )


def _with_guess(spec, guess):
    from dataclasses import replace

    return replace(spec, initial_guess=guess)


def _primal_cost(spec, traj):
    from .trajopt import evaluate_cost

    return evaluate_cost(spec.with_duals(np.zeros_like(spec.lin_x), np.zeros_like(spec.lin_w)), traj)


def solve_dmpc(scenario, states, thetas=None, dual_cfg=None, mode=None):
    """One receding-horizon step from the joint state ``states``.

    Returns a :class:`DMPCResult`; ``actions[i]`` is agent ``i``'s first
    control and ``multipliers`` the multipliers the last local solves used.
    """
    return DMPCController(scenario, thetas, mode, dual_cfg).step(states)


# -- centralized oracle ---------------------------------------------------

@dataclass
class CentralizedResult:
    actions: list
    trajectories: list
    multipliers: list
    objective: float


def solve_centralized(scenario, states, thetas=None, mode=None):
    """Joint QP with the couplings ``wbar_i = W_i(x)`` imposed as equalities.

    Only linear prediction models are supported. Multipliers are returned
    per agent in the same (undiscounted) convention as the dual iteration.

    Raises
    ------
    ConvergenceError
        Hard constraints cannot be met, or the QP fails.
    """
    mode = scenario.mode if mode is None else mode
    graph = CouplingGraph.from_scenario(scenario)
    thetas = identity_thetas(scenario) if thetas is None else thetas
    m = scenario.n_agents
    specs = [_local_base(i, scenario, states[i], states, thetas[i], mode, graph) for i in range(m)]
    if not all(s.dynamics.linear for s in specs):
        raise InputError("the centralized oracle needs linear prediction models")
    solvers = [OCPSolver(s) for s in specs]
    sizes = [s.layout.nz for s in solvers]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    nz = int(offs[-1])
    H = np.zeros((nz, nz))
    q = np.zeros(nz)
    Cs, ds = [], []
    for i, s in enumerate(solvers):
        sl = slice(offs[i], offs[i + 1])
        H[sl, sl] = s.H
        q[sl] = s.q_base
        C = np.zeros((s.C.shape[0], nz))
        C[:, sl] = s.C
        Cs.append(C)
        ds.append(s.d)
    C = np.vstack(Cs)
    d = np.concatenate(ds)
    N = scenario.horizon
    first = 1 if mode in ("modified", "parametric") else 0
    A_rows, b_rows, index = [], [], []
    for i in range(m):
        si = solvers[i]
        for j in graph.neighbors(i):
            sj = solvers[j]
            blk = graph.block(i, j)
            for l in range(first, N + 1):
                row = np.zeros((blk.stop - blk.start, nz))
                row[:, offs[i] : offs[i + 1]] = si.Wm[l][blk]
                row[:, offs[j] : offs[j + 1]] -= sj.X[l][graph.copied]
                A_rows.append(row)
                b_rows.append(sj.x_aff[l][graph.copied] - si.w_aff[l][blk])
                index.append((i, blk, l))
    A = np.vstack(A_rows) if A_rows else None
    b = np.concatenate(b_rows) if b_rows else None
    try:
        qp = ActiveSetQP(H, A, C)
        res = qp.solve(q, b, d)
    except InputError as exc:
        raise ConvergenceError(f"centralized problem infeasible: {exc}") from exc
    if res.kkt_residual > 1e-6:
        raise ConvergenceError("centralized QP did not converge", residual=res.kkt_residual)
    trajs = []
    for i, s in enumerate(solvers):
        t = s._assemble_raw(res.x[offs[i] : offs[i + 1]])
        t.objective_value = _primal_cost(specs[i], t)
        trajs.append(t)
        si = specs[i].stage_ineq
        if si.rows and np.all(si.weights >= HARD_WEIGHT):
            viol = max(np.max(t.slacks[1:], initial=0.0), np.max(t.terminal_slacks, initial=0.0))
            if viol > HARD_TOL:
                raise ConvergenceError(f"hard constraints infeasible for agent {i}", residual=float(viol))
    mus = [np.zeros((N + 1, graph.nw(i))) for i in range(m)]
    pos = 0
    for i, blk, l in index:
        k = blk.stop - blk.start
        mus[i][l, blk] = res.y[pos : pos + k] / solvers[i].disc[l]
        pos += k
    return CentralizedResult(
        actions=[t.controls[0].copy() for t in trajs],
        trajectories=trajs,
        multipliers=mus,
        objective=float(sum(t.objective_value for t in trajs)),
    )
