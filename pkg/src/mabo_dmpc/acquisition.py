"""Expected-improvement acquisition for minimization.

Sign convention: ``ei`` returns ``E[min(J - J*, 0)]`` which is never
positive; more negative means more expected improvement, so the
acquisition is minimized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import gp as gpmod
from .errors import InputError

STD_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class EIContext:
    """Exploration/exploitation split of one EI evaluation."""

    best_observed: float
    exploration: float  # posterior std
    exploitation: float  # best - mean

    def __post_init__(self):
        if self.exploration < 0:
            raise InputError("exploration term must be non-negative")


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 1
    samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")
        if self.samples < 1:
            raise InputError("samples must be >= 1")


def ei(mean, std, best):
    """Closed-form expected improvement, vectorized over its arguments.

    ``-((best - mean) * Phi(Z) + std * phi(Z))`` with ``Z = (best - mean) / std``;
    where ``std`` is below ``STD_FLOOR`` the deterministic limit
    ``-max(best - mean, 0)`` is used.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = best - mean
    safe = np.where(std > STD_FLOOR, std, 1.0)
    z = gap / safe
    val = -(gap * ndtr(z) + safe * _pdf(z))
    out = np.where(std > STD_FLOOR, val, -np.maximum(gap, 0.0))
    out = np.minimum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def ei_at(model, Q, best):
    """EI of a fitted model at the rows of ``Q``."""
    mean, std = gpmod.predict(model, Q, return_std=True)
    return ei(mean, std, best)


def ei_gradient(model, query, best):
    """Gradient of ``ei`` composed with the GP posterior.

    Uses ``d ei / d mean = Phi(Z)`` and ``d ei / d std = -phi(Z)``. When the
    std vanishes the gradient of ``-max(best - mean, 0)`` is returned.
    """
    mean, std, dmean, dstd = gpmod.posterior_gradients(model, query)
    gap = best - mean
    if std < STD_FLOOR:
        return dmean.copy() if gap > 0 else np.zeros_like(dmean)
    z = gap / std
    return ndtr(z) * dmean - _pdf(z) * dstd


def best_observed(data):
    return float(np.min(data.observations))


def _draw(model, x, rng):
    mean, var = gpmod.posterior(model, x)
    noise = model.hyper.noise_variance * model.y_scale ** 2
    return mean + np.sqrt(var + noise) * rng.standard_normal()


def fantasy_improvement(model, data, query, horizon, grid, rng):
    """One rollout: observe a fantasy value at ``query``, then greedily
    query ``grid`` by one-step EI for ``horizon - 1`` steps.

    Returns the summed improvements ``(best - y)^+`` of the greedy steps.
    """
    hyper = model.hyper
    y = _draw(model, query, rng)
    fantasy = data.append(query, y)
    best = min(best_observed(data), y)
    total = 0.0
    for _ in range(horizon - 1):
        current = gpmod.fit(fantasy, hyper, model.normalized)
        scores = ei_at(current, grid, best)
        pick = grid[int(np.argmin(scores))]
        y = _draw(current, pick, rng)
        total += max(best - y, 0.0)
        best = min(best, y)
        fantasy = fantasy.append(pick, y)
    return total


def nonmyopic_ei(model, data, query, cfg: RolloutConfig, candidate_grid=None, return_samples=False):
    """H-step lookahead acquisition.

    With ``cfg.horizon == 1`` this is exactly ``ei`` at ``query``. Otherwise
    the Monte Carlo mean of future greedy improvements is subtracted from
    the one-step EI (improvements lower the acquisition, as EI does).
    Each sample draws from its own child seed, so results do not depend
    on evaluation order.
    """
    best = best_observed(data)
    query = np.atleast_1d(np.asarray(query, dtype=float))
    mean, var = gpmod.posterior(model, query)
    base = ei(mean, np.sqrt(var), best)
    if cfg.horizon == 1:
        return (base, np.zeros(0)) if return_samples else base
    if candidate_grid is None or len(candidate_grid) == 0:
        raise InputError("a non-empty candidate grid is required for horizon > 1")
    grid = np.atleast_2d(np.asarray(candidate_grid, dtype=float))
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.samples)
    samples = np.array([
        fantasy_improvement(model, data, query, cfg.horizon, grid, np.random.default_rng(ss))
        for ss in children
    ])
    value = base - float(np.mean(samples))
    return (value, samples) if return_samples else value


def beta(alpha1, alpha2):
    """``alpha2 * Phi(alpha2 / alpha1) + alpha1 * phi(alpha2 / alpha1)``; equals ``-ei``."""
    r = alpha2 / alpha1
    return alpha2 * ndtr(r) + alpha1 * _pdf(r)


def beta_partials(alpha1, alpha2):
    """``(d beta / d alpha1, d beta / d alpha2) = (phi(r), Phi(r))`` with ``r = alpha2 / alpha1``."""
    r = np.asarray(alpha2, dtype=float) / np.asarray(alpha1, dtype=float)
    return _pdf(r), ndtr(r)


def monotonicity_probe(alpha1_grid, alpha2_grid, fn=beta, partials=None):
    """Check that ``fn`` increases in both arguments over a grid.

    With ``partials`` (a callable returning both partial derivatives) the
    sign is read at every grid node; ``fn=beta`` uses ``beta_partials`` by
    default. Finite differences of ``beta`` lose all resolution once
    ``alpha2 / alpha1`` exceeds about 8, where ``beta`` equals ``alpha2`` to
    machine precision. Without partials, forward differences between
    adjacent nodes are used instead.

    Returns a list of ``(axis, i, j, value)`` for every node (or adjacent
    pair, indexed by its lower node) whose derivative or difference is not
    strictly positive; ``axis`` is ``"alpha1"`` or ``"alpha2"``.
    """
    a1 = np.asarray(alpha1_grid, dtype=float)
    a2 = np.asarray(alpha2_grid, dtype=float)
    if np.any(a1 <= 0):
        raise InputError("alpha1 grid must be strictly positive")
    if partials is None and fn is beta:
        partials = beta_partials
    A1, A2 = a1[:, None], a2[None, :]
    if partials is not None:
        d1, d2 = (np.broadcast_to(d, (a1.size, a2.size)) for d in partials(A1, A2))
    else:
        values = fn(A1, A2)
        d1, d2 = np.diff(values, axis=0), np.diff(values, axis=1)
    report = []
    for axis, d in (("alpha1", d1), ("alpha2", d2)):
        for i, j in zip(*np.nonzero(~(d > 0))):
            report.append((axis, int(i), int(j), float(d[i, j])))
    return report


def gradient_difference_quotients(model, best, lower, upper, n_pairs=10_000, seed=0, radius=None):
    """Sampled ``|grad(a) - grad(b)| / |a - b|`` over the box.

    Pairs are a uniform point plus a perturbation of size at most
    ``radius`` (default 5% of the box diagonal), clipped into the box.
    """
    rng = np.random.default_rng(seed)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if radius is None:
        radius = 0.05 * np.linalg.norm(upper - lower)
    a = rng.uniform(lower, upper, size=(n_pairs, lower.size))
    step = rng.normal(size=a.shape)
    step *= (radius * rng.uniform(0.1, 1.0, size=(n_pairs, 1))) / np.linalg.norm(step, axis=1, keepdims=True)
    b = np.clip(a + step, lower, upper)
    out = np.empty(n_pairs)
    for k in range(n_pairs):
        dist = np.linalg.norm(a[k] - b[k])
        if dist == 0:
            out[k] = 0.0
            continue
        ga = ei_gradient(model, a[k], best)
        gb = ei_gradient(model, b[k], best)
        out[k] = np.linalg.norm(ga - gb) / dist
    return out
