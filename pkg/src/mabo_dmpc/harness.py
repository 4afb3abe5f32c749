"""Closed-loop episodes and the coordinated learning loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import coordinator as co
from . import plants
from .dmpc import CouplingGraph, DMPCController, identity_thetas, theta_from_vector
from .errors import EpisodeError, InputError, MaboError
from .seeding import derive_seed


# -- performance ----------------------------------------------------------

def baseline_stage_costs(cfg, states, controls):
    """Unparameterized per-agent stage costs along a closed-loop trace.

    ``states[i]`` is (n+1, nx_i) and ``controls[i]`` is (n, nu_i); the last
    stage is charged with zero input. Returns an (n+1, m) array.
    """
    graph = CouplingGraph.from_scenario(cfg)
    m = cfg.n_agents
    n = states[0].shape[0] - 1
    out = np.zeros((n + 1, m))
    for i, ag in enumerate(cfg.agents):
        X = np.asarray(states[i], dtype=float)
        U = np.vstack([np.asarray(controls[i], dtype=float), np.zeros((1, ag.plant.nu))])
        if X.shape[0] != n + 1 or U.shape[0] != n + 1:
            raise InputError("trace is incomplete")
        nx, nu = X.shape[1], U.shape[1]
        ref = np.zeros(nx) if ag.reference is None else np.asarray(ag.reference, dtype=float)
        q = np.ones(nx) if ag.state_weight is None else np.asarray(ag.state_weight, dtype=float)
        r = np.full(nu, 0.1) if ag.input_weight is None else np.asarray(ag.input_weight, dtype=float)
        cost = ((X - ref) ** 2) @ q + (U ** 2) @ r
        for j in graph.neighbors(i):
            d = X[:, graph.coupled] - np.asarray(states[j])[:, graph.coupled]
            resid = -d - graph.offsets[(i, j)]  # x_j - x_i - offset
            cost = cost + graph.weight * np.sum(resid ** 2, axis=1)
        pens = ag.constraint_penalty * 2 if len(ag.constraint_penalty) == 1 else ag.constraint_penalty
        for sc in ag.state_constraints:
            if sc.lower is not None:
                cost = cost + pens[0] * np.maximum(0.0, sc.lower - X[:, sc.index])
            if sc.upper is not None:
                cost = cost + pens[1] * np.maximum(0.0, X[:, sc.index] - sc.upper)
        out[:, i] = cost
    return out


def performance_index(stage_costs, n):
    """``(1/n) * sum_{k=0..n} L_i`` per agent from an (n+1, m) cost table."""
    C = np.atleast_2d(np.asarray(stage_costs, dtype=float))
    if C.shape[0] != n + 1:
        raise InputError(f"trace has {C.shape[0]} stages, expected {n + 1}")
    return C.sum(axis=0) / n


def distance_pairs(cfg):
    """Unordered coupled pairs ``(i, j, desired)`` with ``i < j``.

    ``desired`` is the norm of the offset of edge ``(i, j)`` (or of the
    reverse edge when only that one is declared).
    """
    out = {}
    for e in cfg.coupling.edges:
        i, j = sorted((e.agent, e.neighbor))
        if (i, j) not in out:
            out[(i, j)] = float(np.linalg.norm(e.offset))
    return [(i, j, d) for (i, j), d in sorted(out.items())]


def pair_distances(cfg, states):
    """(n+1, pairs) Euclidean distances between the coupled components."""
    c = np.asarray(cfg.coupling.coupled_states, dtype=int)
    cols = [np.linalg.norm(np.asarray(states[j])[:, c] - np.asarray(states[i])[:, c], axis=1)
            for i, j, _ in distance_pairs(cfg)]
    return np.stack(cols, axis=1) if cols else np.zeros((len(states[0]), 0))


def distance_errors(cfg, states, last=10):
    """Mean ``|actual - desired|`` per pair over the final ``last`` stages."""
    desired = np.array([d for _, _, d in distance_pairs(cfg)])
    return np.mean(np.abs(pair_distances(cfg, states)[-last:] - desired), axis=0)


def formation_error(cfg, states, components=(0, 1)):
    """Sum over agents of the distance between the final position and the reference."""
    c = list(components)
    return float(sum(
        np.linalg.norm(np.asarray(s)[-1, c] - np.asarray(a.reference)[c]) for s, a in zip(states, cfg.agents)
    ))


# -- episodes -------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    performance: np.ndarray  # J_i^N per agent
    states: list  # per agent (n+1, nx)
    controls: list  # per agent (n, nu)
    params: Optional[np.ndarray]  # (m, d) copies used, None for the unlearned controller
    seed: int
    stop_reasons: list  # per step
    dual_iterations: list  # per step
    residuals: list  # per step, coupling mismatch at stop
    multipliers: list = field(default_factory=list)  # per step, per agent first-stage mu
    warmup: bool = False

    @property
    def global_performance(self):
        return float(np.sum(self.performance))


def disturbance_seed(cfg, seed, episode, agent):
    purpose = "disturbance" if cfg.learning.common_random_numbers else f"disturbance/{episode}"
    return derive_seed(seed, purpose, agent)


def run_episode(cfg, thetas=None, seed=0, episode=0, params=None, steps=None):
    """Simulate the closed loop for ``steps`` (default ``learning.steps``) steps.

    Raises
    ------
    EpisodeError
        A DMPC solve failed; ``step`` names the time step.
    """
    n = cfg.learning.steps if steps is None else steps
    m = cfg.n_agents
    thetas = identity_thetas(cfg) if thetas is None else thetas
    truth = [plants.true_model(i, cfg) for i in range(m)]
    rngs = [np.random.default_rng(disturbance_seed(cfg, seed, episode, i)) for i in range(m)]
    ctrl = DMPCController(cfg, thetas)
    x = [np.asarray(a.initial_state, dtype=float) for a in cfg.agents]
    X = [[xi.copy()] for xi in x]
    U = [[] for _ in range(m)]
    reasons, iters, resid, mus = [], [], [], []
    for k in range(n):
        try:
            res = ctrl.step(x)
        except MaboError as exc:
            raise EpisodeError(f"step {k}: {exc}", step=k) from exc
        reasons.append(res.stop_reason)
        iters.append(res.iterations)
        resid.append(res.primal_residual)
        mus.append([mu[0].copy() for mu in res.multipliers])
        x = [plants.step_plant(truth[i], x[i], res.actions[i], rngs[i]) for i in range(m)]
        if not all(np.all(np.isfinite(xi)) for xi in x):
            raise EpisodeError(f"step {k}: state diverged", step=k)
        for i in range(m):
            X[i].append(x[i].copy())
            U[i].append(np.asarray(res.actions[i], dtype=float).copy())
    states = [np.array(s) for s in X]
    controls = [np.array(u).reshape(n, -1) for u in U]
    J = performance_index(baseline_stage_costs(cfg, states, controls), n)
    return EpisodeRecord(episode, J, states, controls, params, seed, reasons, iters, resid, mus)


def evaluate_baseline(cfg, seed=0, episode=0):
    """Closed loop with every learnable shift at zero."""
    return run_episode(cfg, identity_thetas(cfg), seed, episode)


def thetas_for(cfg, points):
    """Agent ``i`` runs with its own block of its own copy ``points[i]``."""
    per = [theta_from_vector(cfg, p) for p in points]
    return [per[i][i] for i in range(cfg.n_agents)]


def analytic_values(cfg, points):
    an = cfg.learning.analytic
    return np.array([
        s * float(np.sum((np.asarray(p) - np.asarray(c)) ** 2)) for p, c, s in zip(points, an.centers, an.scales)
    ])


# -- learning -------------------------------------------------------------

@dataclass
class LearningHistory:
    records: list  # EpisodeRecord (closed loop) or None (analytic), warm-up first
    values: np.ndarray  # (episodes, m) objective values in evaluation order
    points: np.ndarray  # (episodes, m, d)
    diagnostics: list  # RoundDiagnostics per coordinated round
    warmup: int
    consensus: np.ndarray
    locals: list
    lower: np.ndarray
    upper: np.ndarray

    def best_so_far(self):
        return np.minimum.accumulate(self.values, axis=0)

    def best_episode(self):
        """Index of the evaluation with the lowest summed objective."""
        return int(np.argmin(self.values.sum(axis=1)))

    def learned_points(self):
        return self.points[self.best_episode()]


def settings_for(cfg, **overrides):
    lc = cfg.learning
    kw = dict(normalize=lc.normalize)
    if lc.acquisition == "nonmyopic":
        kw.update(lookahead=lc.lookahead, samples=lc.samples)
    kw.update(overrides)
    return co.BOSettings(**kw)


def learn(cfg, episodes=None, seed=None, settings=None, callback: Optional[Callable] = None):
    """Warm-up designs followed by ``episodes`` coordinated rounds.

    Each round evaluates all agents' proposals in one closed-loop episode
    (or through the analytic objectives when the scenario declares them).
    ``callback(history_so_far)`` is invoked after every evaluation.
    """
    lc = cfg.learning
    K = lc.episodes if episodes is None else episodes
    if K < 1:
        raise InputError("need at least one episode")
    seed = cfg.seed if seed is None else seed
    if not lc.params:
        raise InputError("scenario declares no learnable parameters")
    settings = settings_for(cfg) if settings is None else settings
    lo = np.array([p.lower for p in lc.params])
    hi = np.array([p.upper for p in lc.params])
    m = cfg.n_agents
    records, values, points = [], [], []

    def evaluate(pts, episode, warm):
        pts = [np.asarray(p, dtype=float) for p in pts]
        if lc.analytic is not None:
            y = analytic_values(cfg, pts)
            rec = None
        else:
            rec = run_episode(cfg, thetas_for(cfg, pts), seed, episode, np.array(pts))
            rec.warmup = warm
            y = rec.performance
        records.append(rec)
        values.append(np.asarray(y, dtype=float))
        points.append(np.array(pts))
        return y

    designs = [co.initial_design(lo, hi, lc.warmup, derive_seed(seed, "design", i)) for i in range(m)]
    for w in range(lc.warmup):
        evaluate([designs[i][w] for i in range(m)], len(values), True)
        if callback:
            callback(_history(records, values, points, [], lc.warmup, None, lo, hi))
    agents = [
        co.AgentBOState(np.array([p[i] for p in points]), np.array([v[i] for v in values]), lo, hi)
        for i in range(m)
    ]
    coord = co.CoordState.start(lo, hi, m, lc.rho)
    diags = []
    for k in range(K):
        agents, coord, diag = co.mabo_round(
            agents, coord, lambda pts: evaluate(pts, len(values), False),
            seed=derive_seed(seed, "round", k), settings=settings, round_index=k,
        )
        diags.append(diag)
        if callback:
            callback(_history(records, values, points, diags, lc.warmup, coord, lo, hi))
    return _history(records, values, points, diags, lc.warmup, coord, lo, hi)


def _history(records, values, points, diags, warmup, coord, lo, hi):
    return LearningHistory(
        list(records), np.array(values), np.array(points), list(diags), warmup,
        None if coord is None else coord.consensus.copy(),
        None if coord is None else [z.copy() for z in coord.locals], lo, hi,
    )


def replay(cfg, history: LearningHistory, seed=None, episode=None):
    """Re-run the closed loop with the best evaluated parameters."""
    seed = cfg.seed if seed is None else seed
    k = history.best_episode() if episode is None else episode
    pts = history.points[k]
    return run_episode(cfg, thetas_for(cfg, pts), seed, k, pts)
