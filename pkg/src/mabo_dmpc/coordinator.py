"""ADMM-coordinated multi-agent Bayesian optimization.

Every agent keeps its own copy ``zeta_i`` of the global parameter vector,
a GP surrogate of its own objective over that copy, and a multiplier
``lambda_i``. A round fits the surrogates, moves the consensus point,
minimizes each agent's penalized acquisition, evaluates all new points in
one call and updates the multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from . import acquisition as acq
from . import gp as gpmod
from .errors import EvaluationError, InputError, StateError
from .seeding import derive_seed

N_STARTS = 16
SEARCH_TOL = 1e-6


@dataclass
class CoordState:
    consensus: np.ndarray
    multipliers: list
    penalty: float = 1.0
    locals: Optional[list] = None  # last proposed zeta_i per agent

    def __post_init__(self):
        self.consensus = np.asarray(self.consensus, dtype=float).ravel()
        self.multipliers = [np.asarray(l, dtype=float).ravel() for l in self.multipliers]
        if any(l.shape != self.consensus.shape for l in self.multipliers):
            raise InputError("multipliers must share the consensus dimension")
        if self.penalty < 0:
            raise InputError("penalty must be non-negative")
        if self.locals is None:
            self.locals = [self.consensus.copy() for _ in self.multipliers]

    @classmethod
    def start(cls, lower, upper, n_agents, penalty=1.0):
        """Zero multipliers and the consensus at the box center."""
        center = 0.5 * (np.asarray(lower, dtype=float) + np.asarray(upper, dtype=float))
        return cls(center, [np.zeros_like(center) for _ in range(n_agents)], penalty)


@dataclass
class AgentBOState:
    params: np.ndarray  # (n, d)
    values: np.ndarray  # (n,)
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        d = self.lower.size
        self.params = np.asarray(self.params, dtype=float).reshape(-1, d)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.params.shape[0] != self.values.size:
            raise InputError("params and values lengths differ")
        if np.any(self.lower >= self.upper):
            raise InputError("box must be non-degenerate")
        tol = 1e-12 * (1 + np.abs(self.upper - self.lower))
        if np.any(self.params < self.lower - tol) or np.any(self.params > self.upper + tol):
            raise InputError("evaluated parameters leave the box")

    def __len__(self):
        return self.values.size

    @property
    def dim(self):
        return self.lower.size

    def append(self, zeta, y):
        return AgentBOState(np.vstack([self.params, zeta]), np.append(self.values, y), self.lower, self.upper)

    def best_so_far(self):
        return np.minimum.accumulate(self.values)

    def to_unit(self, Z):
        return (np.asarray(Z, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, U):
        return self.lower + np.asarray(U, dtype=float) * (self.upper - self.lower)

    def dataset(self):
        return gpmod.Dataset(self.to_unit(self.params), self.values)


@dataclass(frozen=True)
class BOSettings:
    """How each agent builds and minimizes its acquisition.

    ``penalized`` is ``"composite"`` (expected improvement of the penalized
    surrogate ``mean + Xi``) or ``"additive"`` (standardized EI plus
    ``Xi``).
    """

    penalized: str = "composite"
    hyper_bounds: gpmod.HyperBounds = gpmod.HyperBounds((0.05, 5.0), (0.05, 5.0), (1e-6, 0.5))
    hyper_starts: int = 3
    normalize: bool = True
    lookahead: int = 1
    samples: int = 64
    n_starts: int = N_STARTS
    search_tol: float = SEARCH_TOL


# -- ADMM updates ---------------------------------------------------------

def update_consensus(states, multipliers, rho):
    """``mean_i(zeta_i + lambda_i / rho)``; with ``rho == 0`` the plain mean."""
    Z = np.atleast_2d(np.asarray(states, dtype=float))
    L = np.atleast_2d(np.asarray(multipliers, dtype=float))
    if Z.shape != L.shape or Z.shape[0] < 1:
        raise InputError("states and multipliers must have matching shapes")
    if rho == 0:
        if np.any(L):
            raise InputError("non-zero multipliers need a positive penalty")
        return Z.mean(axis=0)
    return (Z + L / rho).mean(axis=0)


def update_multiplier(lam, zeta_new, consensus, rho):
    lam = np.asarray(lam, dtype=float)
    zeta_new = np.asarray(zeta_new, dtype=float)
    consensus = np.asarray(consensus, dtype=float)
    if not lam.shape == zeta_new.shape == consensus.shape:
        raise InputError("dimension mismatch")
    return lam + rho * (zeta_new - consensus)


def penalty_term(zeta, coord: CoordState, agent: int):
    """``lambda_i' zeta + rho/2 |zeta - consensus|^2``, vectorized over rows."""
    Z = np.asarray(zeta, dtype=float)
    lam = coord.multipliers[agent]
    diff = Z - coord.consensus
    return Z @ lam + 0.5 * coord.penalty * np.sum(diff * diff, axis=-1)


def residuals(prev_consensus, new_consensus, points, rho):
    """``(max_i |zeta_i - consensus|, rho |consensus change|)``."""
    new_consensus = np.asarray(new_consensus, dtype=float)
    P = np.atleast_2d(np.asarray(points, dtype=float))
    primal = float(np.max(np.linalg.norm(P - new_consensus, axis=1)))
    dual = float(rho * np.linalg.norm(new_consensus - np.asarray(prev_consensus, dtype=float)))
    return primal, dual


# -- surrogate and acquisition --------------------------------------------

def fit_agent(agent_state: AgentBOState, settings: BOSettings, seed=0, init=None):
    data = agent_state.dataset()
    if len(data) >= 2:
        hyper = gpmod.optimize_hyperparameters(
            data, settings.hyper_bounds, seed=seed, n_starts=settings.hyper_starts,
            init=init, normalize=settings.normalize,
        )
    else:
        hyper = gpmod.KernelHyper(1.0, 0.5, settings.hyper_bounds.noise_variance[0])
    return gpmod.fit(data, hyper, settings.normalize)


def acquisition_values(Z, agent_state, model, coord, agent, settings, rng_seed=0):
    """Penalized acquisition at rows of ``Z`` (parameter units)."""
    Z = np.atleast_2d(Z)
    U = agent_state.to_unit(Z)
    mean, std = gpmod.predict(model, U, return_std=True)
    xi = penalty_term(Z, coord, agent) if coord is not None and _active(coord, agent) else 0.0
    best = float(np.min(agent_state.values))
    future = 0.0
    if settings.lookahead > 1:
        # rollout gain beyond the one-step EI of the raw objective
        cfg = acq.RolloutConfig(settings.lookahead, settings.samples, rng_seed)
        grid = qmc.LatinHypercube(d=agent_state.dim, seed=np.random.default_rng(rng_seed)).random(32)
        data = agent_state.dataset()
        ahead = np.array([acq.nonmyopic_ei(model, data, u, cfg, grid) for u in U])
        future = ahead - acq.ei(mean, std, best)
    if settings.penalized == "composite":
        if coord is not None and _active(coord, agent):
            best_pen = float(np.min(agent_state.values + penalty_term(agent_state.params, coord, agent)))
        else:
            best_pen = best
        return acq.ei(mean + xi, std, best_pen) + future
    if settings.penalized != "additive":
        raise InputError(f"unknown penalized acquisition {settings.penalized!r}")
    ei_vals = acq.ei(mean, std, best) + future
    return ei_vals / model.y_scale + xi


def _active(coord, agent):
    return coord.penalty > 0 or np.any(coord.multipliers[agent])


def minimize_box(fn, lower, upper, seed=0, n_starts=N_STARTS, tol=SEARCH_TOL):
    """Multi-start bounded coordinate search.

    Starts are a seeded Latin-hypercube sample. Each start probes
    ``x +/- step_k e_k`` coordinate by coordinate, keeps improvements and
    halves all steps after a sweep without progress; it stops once every
    step is below ``tol`` (parameter units). ``fn`` maps ``(n, d)`` to
    ``(n,)``. Ties go to the lowest start index.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.size
    X = qmc.scale(qmc.LatinHypercube(d=d, seed=np.random.default_rng(seed)).random(n_starts), lower, upper)
    F = np.asarray(fn(X), dtype=float)
    step = np.tile(0.25 * (upper - lower), (n_starts, 1))
    live = np.ones(n_starts, dtype=bool)
    while np.any(live):
        moved = np.zeros(n_starts, dtype=bool)
        idx = np.nonzero(live)[0]
        for k in range(d):
            for sign in (1.0, -1.0):
                cand = X[idx].copy()
                cand[:, k] = np.clip(cand[:, k] + sign * step[idx, k], lower[k], upper[k])
                fc = np.asarray(fn(cand), dtype=float)
                better = fc < F[idx]
                if np.any(better):
                    X[idx[better]] = cand[better]
                    F[idx[better]] = fc[better]
                    moved[idx[better]] = True
        stuck = live & ~moved
        step[stuck] *= 0.5
        live &= np.max(step, axis=1) >= tol
    best = int(np.argmin(F))
    return X[best].copy(), float(F[best])


def local_step(agent_state: AgentBOState, model, coord: CoordState, agent: int, seed=0, settings=BOSettings()):
    """Minimize the penalized acquisition over the agent's box."""
    if model is None:
        raise StateError("the agent's surrogate has not been fitted")
    fn = lambda Z: acquisition_values(Z, agent_state, model, coord, agent, settings, seed)
    z, _ = minimize_box(fn, agent_state.lower, agent_state.upper, seed, settings.n_starts, settings.search_tol)
    return z


# -- rounds ---------------------------------------------------------------

@dataclass
class RoundDiagnostics:
    round: int
    values: np.ndarray
    best_so_far: np.ndarray
    primal_residual: float
    dual_residual: float
    consensus: np.ndarray
    points: np.ndarray
    hypers: list = field(default_factory=list)


def mabo_round(agents, coord: CoordState, evaluator: Callable, seed=0, settings=BOSettings(), round_index=0, models=None):
    """One ADMM-MABO round: fit, consensus, local minimization, evaluate,
    multiplier update, append.

    ``evaluator`` receives the list of new points (one per agent) and
    returns one value per agent. If it raises, the round is abandoned and
    the inputs are left untouched.

    Returns
    -------
    (agents, coord, diagnostics)
    """
    m = len(agents)
    if any(len(a) < 1 for a in agents):
        raise StateError("every agent needs at least one evaluation")
    if models is None:
        models = [
            fit_agent(a, settings, derive_seed(seed, "hyper", i)) for i, a in enumerate(agents)
        ]
    rho = coord.penalty
    prev = coord.consensus
    zbar = update_consensus(coord.locals, coord.multipliers, rho)
    inner = CoordState(zbar, coord.multipliers, rho, coord.locals)
    new_points = [
        local_step(a, models[i], inner, i, derive_seed(seed, "search", i), settings) for i, a in enumerate(agents)
    ]
    try:
        values = np.asarray(evaluator(new_points), dtype=float).ravel()
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"objective evaluation failed: {exc}") from exc
    if values.size != m or not np.all(np.isfinite(values)):
        raise EvaluationError("evaluator must return one finite value per agent")
    lams = [update_multiplier(coord.multipliers[i], new_points[i], zbar, rho) for i in range(m)]
    new_agents = [a.append(z, y) for a, z, y in zip(agents, new_points, values)]
    new_coord = CoordState(zbar, lams, rho, [z.copy() for z in new_points])
    primal, dual = residuals(prev, zbar, new_points, rho)
    diag = RoundDiagnostics(
        round_index, values, np.array([a.values.min() for a in new_agents]), primal, dual, zbar.copy(),
        np.array(new_points), [mdl.hyper for mdl in models],
    )
    return new_agents, new_coord, diag


def initial_design(lower, upper, count, seed):
    """Space-filling warm-up points (seeded Latin hypercube)."""
    sampler = qmc.LatinHypercube(d=np.size(lower), seed=np.random.default_rng(seed))
    return qmc.scale(sampler.random(count), lower, upper)
