"""Finite multi-agent MDPs: policy evaluation, value decomposition and
value-based cost modification checked by exact enumeration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SizeError

MAX_PATHS = 1_000_000


@dataclass(frozen=True)
class FiniteMDP:
    """``transition[s, a, s']`` over joint actions and per-agent ``costs[i, s, a]``.

    Joint action ``a`` indexes the product of the per-agent action sets
    (``np.ravel_multi_index`` order). ``available[s, a]`` marks the joint
    actions allowed in state ``s`` (all by default).
    """

    transition: np.ndarray
    costs: np.ndarray
    discount: float
    agent_actions: tuple
    available: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        L = np.asarray(self.costs, dtype=float)
        if L.ndim == 2:
            L = L[None]
        S, A = P.shape[:2]
        if P.shape != (S, A, S):
            raise InputError("transition must have shape (S, A, S)")
        if L.shape[1:] != (S, A):
            raise InputError("costs must have shape (m, S, A)")
        if int(np.prod(self.agent_actions)) != A or len(self.agent_actions) != L.shape[0]:
            raise InputError("agent action counts do not match the joint action set")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise InputError("transition rows must be distributions")
        if not np.all(np.isfinite(L)):
            raise InputError("costs must be finite")
        if not 0.0 < self.discount <= 1.0:
            raise InputError("discount must lie in (0, 1]")
        avail = np.ones((S, A), dtype=bool) if self.available is None else np.asarray(self.available, dtype=bool)
        if avail.shape != (S, A) or not np.all(avail.any(axis=1)):
            raise InputError("every state needs an available action")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "costs", L)
        object.__setattr__(self, "agent_actions", tuple(int(n) for n in self.agent_actions))
        object.__setattr__(self, "available", avail)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_agents(self):
        return self.costs.shape[0]

    def with_transition(self, P_hat):
        return FiniteMDP(P_hat, self.costs, self.discount, self.agent_actions, self.available)


@dataclass(frozen=True)
class PolicyTable:
    """Deterministic per-agent choices ``actions[i, s]``; the joint policy is their product."""

    actions: np.ndarray

    def joint(self, mdp: FiniteMDP):
        acts = np.asarray(self.actions, dtype=int)
        if acts.shape != (mdp.n_agents, mdp.n_states):
            raise InputError("policy table has the wrong shape")
        for i, n in enumerate(mdp.agent_actions):
            if np.any(acts[i] < 0) or np.any(acts[i] >= n):
                raise InputError(f"agent {i} picks an undefined action")
        a = np.ravel_multi_index(tuple(acts), mdp.agent_actions)
        if not np.all(mdp.available[np.arange(mdp.n_states), a]):
            raise InputError("policy picks an unavailable action")
        return a


def _closed_loop(mdp, policy, agent):
    a = policy.joint(mdp)
    s = np.arange(mdp.n_states)
    P = mdp.transition[s, a]
    L = mdp.costs.sum(axis=0)[s, a] if agent is None else mdp.costs[agent][s, a]
    return P, L


def policy_value(mdp: FiniteMDP, policy: PolicyTable, agent=None, tol=1e-12, max_sweeps=1_000_000):
    """Fixed point of ``V = L_pi + gamma P_pi V`` by successive substitution.

    ``agent=None`` evaluates the global cost (sum over agents). Stops when
    the sup-norm change drops to ``tol``.
    """
    if mdp.discount >= 1.0:
        raise InputError("policy evaluation needs discount < 1")
    P, L = _closed_loop(mdp, policy, agent)
    V = L.copy()
    for _ in range(max_sweeps):
        V_new = L + mdp.discount * P @ V
        if np.max(np.abs(V_new - V)) <= tol:
            return V_new
        V = V_new
    return V  # pragma: no cover


def decomposition_check(mdp: FiniteMDP, policy: PolicyTable) -> float:
    """``max_s |V(s) - sum_i V_i(s)|`` for the joint policy."""
    V = policy_value(mdp, policy)
    parts = sum(policy_value(mdp, policy, i) for i in range(mdp.n_agents))
    return float(np.max(np.abs(V - parts)))


@dataclass(frozen=True)
class ModifiedCosts:
    terminal: np.ndarray  # (S,)
    stage: np.ndarray  # (S, A)
    infinite: np.ndarray  # (S, A) bool; set where the one-step expectation diverges
    discount: float


def modified_costs(true_values, surrogate: FiniteMDP) -> ModifiedCosts:
    """Terminal ``V`` and stage ``V(s) - gamma E_Phat[V(s')]`` for a wrong model."""
    V = np.asarray(true_values, dtype=float)
    if V.shape != (surrogate.n_states,):
        raise InputError("value table does not match the surrogate")
    with np.errstate(invalid="ignore", over="ignore"):
        nxt = surrogate.transition @ V
    infinite = ~np.isfinite(nxt)
    stage = np.where(infinite, np.inf, V[:, None] - surrogate.discount * np.where(infinite, 0.0, nxt))
    return ModifiedCosts(V.copy(), stage, infinite, surrogate.discount)


def nstep_value(mod: ModifiedCosts, surrogate: FiniteMDP, policy: PolicyTable, start: int, horizon: int,
                max_paths=MAX_PATHS) -> float:
    """Expected modified N-step cost along the surrogate chain, by path enumeration.

    Raises
    ------
    SizeError
        More than ``max_paths`` paths with positive probability.
    """
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    a = policy.joint(surrogate)
    P = surrogate.transition
    g = mod.discount
    # frontier of (state, probability, accumulated discounted cost)
    states = np.array([start])
    probs = np.array([1.0])
    acc = np.array([0.0])
    count = 1
    for l in range(horizon):
        acc = acc + (g ** l) * mod.stage[states, a[states]]
        rows = P[states, a[states]]  # (paths, S)
        src, dst = np.nonzero(rows > 0)
        count += src.size
        if count > max_paths:
            raise SizeError(f"enumeration exceeds {max_paths} paths")
        probs = probs[src] * rows[src, dst]
        acc = acc[src]
        states = dst
    acc = acc + (g ** horizon) * mod.terminal[states]
    return float(np.sum(probs * acc))


def random_mdp(rng, n_states=4, agent_actions=(2, 2), discount=0.9, sparsity=0.0):
    """Random instance with Dirichlet transition rows and uniform costs."""
    A = int(np.prod(agent_actions))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, A))
    if sparsity > 0:
        mask = rng.uniform(size=P.shape) < sparsity
        mask[..., 0] = False
        P = np.where(mask, 0.0, P)
        P /= P.sum(axis=2, keepdims=True)
    L = rng.uniform(0.0, 1.0, size=(len(agent_actions), n_states, A))
    return FiniteMDP(P, L, discount, tuple(agent_actions))


def random_policy(rng, mdp):
    return PolicyTable(np.array([rng.integers(0, n, size=mdp.n_states) for n in mdp.agent_actions]))


def theorem_check(mdp, surrogate, policy, horizons=(1, 2, 3, 4, 5)):
    """Largest gap between the modified N-step values and the true values."""
    worst = 0.0
    for i in range(mdp.n_agents):
        V = policy_value(mdp, policy, i)
        mod = modified_costs(V, surrogate)
        for N in horizons:
            for s in range(mdp.n_states):
                worst = max(worst, abs(nstep_value(mod, surrogate, policy, s, N) - V[s]))
    return worst


def all_policies(mdp):
    """Every deterministic joint policy restricted to available actions."""
    per_state = [np.nonzero(mdp.available[s])[0] for s in range(mdp.n_states)]
    for combo in itertools.product(*per_state):
        acts = np.array(np.unravel_index(np.array(combo), mdp.agent_actions))
        yield PolicyTable(acts)


def optimal_values(mdp, agent=None, tol=1e-12, max_sweeps=1_000_000):
    """Bellman optimality fixed point for one agent's cost (or the global cost)."""
    L = mdp.costs.sum(axis=0) if agent is None else mdp.costs[agent]
    L = np.where(mdp.available, L, np.inf)
    V = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        V_new = np.min(L + mdp.discount * mdp.transition @ V, axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            return V_new
        V = V_new
    return V  # pragma: no cover


@dataclass
class ConsistencyReport:
    value_gap: float  # brute-force minimum vs Bellman optimality fixed point
    bellman_residual: float  # of the brute-force minimizer in the optimality equation
    policies: int


def bellman_consistency(mdp: FiniteMDP, agent=None) -> ConsistencyReport:
    """Brute-force the joint policy minimizing the summed values and check
    that it satisfies the Bellman optimality equation."""
    best, best_V, count = None, None, 0
    for pol in all_policies(mdp):
        count += 1
        V = policy_value(mdp, pol, agent)
        if best_V is None or V.sum() < best_V.sum() - 1e-12:
            best, best_V = pol, V
    V_star = optimal_values(mdp, agent)
    L = mdp.costs.sum(axis=0) if agent is None else mdp.costs[agent]
    a = best.joint(mdp)
    s = np.arange(mdp.n_states)
    rhs = L[s, a] + mdp.discount * mdp.transition[s, a] @ best_V
    Q = np.where(mdp.available, L + mdp.discount * mdp.transition @ best_V, np.inf)
    residual = max(np.max(np.abs(best_V - rhs)), np.max(np.abs(best_V - Q.min(axis=1))))
    return ConsistencyReport(float(np.max(np.abs(best_V - V_star))), float(residual), count)


@dataclass
class BatteryReport:
    theorem_max_error: float
    theorem_trials: int
    decomposition_max_error: float
    decomposition_trials: int
    bellman_max_gap: float
    bellman_trials: int

    def passed(self, theorem_tol=1e-8, decomposition_tol=1e-10, bellman_tol=1e-8):
        return (self.theorem_max_error <= theorem_tol and self.decomposition_max_error <= decomposition_tol
                and self.bellman_max_gap <= bellman_tol)


def theory_battery(seed=0, theorem_trials=50, decomposition_trials=100, bellman_trials=10):
    """Randomized checks of the cost-modification identity, the value
    decomposition and Bellman consistency of the brute-force optimum.

    Trial ``t`` of each check draws from its own child stream, so results
    depend only on ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    s_thm, s_dec, s_bel = ss.spawn(3)
    thm = 0.0
    for child in s_thm.spawn(theorem_trials):
        rng = np.random.default_rng(child)
        S = int(rng.integers(2, 7))
        acts = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        g = float(rng.uniform(0.3, 0.95))
        mdp = random_mdp(rng, S, acts, g)
        wrong = random_mdp(rng, S, acts, g, sparsity=0.5)
        thm = max(thm, theorem_check(mdp, wrong, random_policy(rng, mdp)))
    dec = 0.0
    for child in s_dec.spawn(decomposition_trials):
        rng = np.random.default_rng(child)
        mdp = random_mdp(rng, 5, (2, 2), float(rng.uniform(0.3, 0.95)))
        dec = max(dec, decomposition_check(mdp, random_policy(rng, mdp)))
    bel = 0.0
    for child in s_bel.spawn(bellman_trials):
        rng = np.random.default_rng(child)
        mdp = random_mdp(rng, int(rng.integers(2, 5)), (2, 2), float(rng.uniform(0.3, 0.9)))
        rep = bellman_consistency(mdp)
        bel = max(bel, rep.value_gap, rep.bellman_residual)
    return BatteryReport(float(thm), theorem_trials, float(dec), decomposition_trials, float(bel), bellman_trials)
