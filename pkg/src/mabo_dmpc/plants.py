"""True plants and (deliberately imperfect) prediction models."""

from __future__ import annotations

import math

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError
from .trajopt import LinearDynamics, NonlinearDynamics


@dataclass(frozen=True)
class LinearAgentModel:
    """``x+ = A x + B u + [e, 0, ...]`` with ``e ~ U[lo, hi]`` when enabled."""

    A: np.ndarray
    B: np.ndarray
    disturbance: Optional[tuple] = None  # (low, high) on the first state

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise InputError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.disturbance is not None:
            lo, hi = map(float, self.disturbance)
            if lo > hi:
                raise InputError("disturbance interval is inverted")
            object.__setattr__(self, "disturbance", (lo, hi))

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def dynamics(self):
        return LinearDynamics(self.A, self.B)


@dataclass(frozen=True)
class WMRModel:
    """Unicycle ``(x, y, psi)`` driven by ``scale * (v, omega)``, RK4 with step ``dt``."""

    input_scale: float = 1.0
    step_size: float = 0.1

    def __post_init__(self):
        if self.step_size <= 0:
            raise InputError("step_size must be positive")
        if self.input_scale <= 0:
            raise InputError("input_scale must be positive")

    nx = 3
    nu = 2

    def rate(self, x, u):
        u = self.input_scale * np.asarray(u, dtype=float)
        psi = x[..., 2]
        v, om = u[..., 0], u[..., 1]
        out = np.empty(np.broadcast_shapes(psi.shape, v.shape) + (3,))
        out[..., 0] = v * np.cos(psi)
        out[..., 1] = v * np.sin(psi)
        out[..., 2] = om
        return out

    def step(self, x, u):
        """One RK4 step; accepts batched ``(..., 3)`` / ``(..., 2)`` arrays."""
        x = np.asarray(x, dtype=float)
        h = self.step_size
        if x.ndim == 1 and np.ndim(u) == 1:
            return self._step_single(x, u)
        k1 = self.rate(x, u)
        k2 = self.rate(x + 0.5 * h * k1, u)
        k3 = self.rate(x + 0.5 * h * k2, u)
        k4 = self.rate(x + h * k3, u)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def _step_single(self, x, u):
        # scalar arithmetic; array overhead dominates for one 3-vector
        h = self.step_size
        v = self.input_scale * float(u[0])
        om = self.input_scale * float(u[1])
        px, py, psi = float(x[0]), float(x[1]), float(x[2])
        c1, s1 = math.cos(psi), math.sin(psi)
        p2 = psi + 0.5 * h * om
        c2, s2 = math.cos(p2), math.sin(p2)
        p4 = psi + h * om
        c4, s4 = math.cos(p4), math.sin(p4)
        # the heading rate is constant, so stages 2 and 3 share their angle
        return np.array([
            px + (h / 6.0) * v * (c1 + 4 * c2 + c4),
            py + (h / 6.0) * v * (s1 + 4 * s2 + s4),
            psi + h * om,
        ])

    def dynamics(self):
        return NonlinearDynamics(self.step, 3, 2)


def step_linear(model: LinearAgentModel, x, u, rng=None):
    """Advance the linear plant; draws one uniform sample when the disturbance is on."""
    x = np.asarray(x, dtype=float).reshape(model.nx)
    u = np.asarray(u, dtype=float).reshape(model.nu)
    out = model.A @ x + model.B @ u
    if model.disturbance is not None:
        if rng is None:
            raise InputError("a random generator is required when the disturbance is enabled")
        out[0] += rng.uniform(*model.disturbance)
    return out


def step_wmr(model: WMRModel, x, u):
    x = np.asarray(x, dtype=float).reshape(3)
    return model.step(x, np.asarray(u, dtype=float).reshape(2))


def step_plant(model, x, u, rng=None):
    if isinstance(model, LinearAgentModel):
        return step_linear(model, x, u, rng)
    return step_wmr(model, x, u)


def prediction_model(agent: int, scenario):
    """Model an agent's MPC predicts with, as declared by the scenario.

    Agents without a prediction block predict with their true plant,
    disturbance excluded.
    """
    if not 0 <= agent < scenario.n_agents:
        raise InputError(f"unknown agent {agent}")
    ag = scenario.agents[agent]
    model = build_model(ag.prediction if ag.prediction is not None else ag.plant)
    if isinstance(model, LinearAgentModel) and model.disturbance is not None:
        model = LinearAgentModel(model.A, model.B, None)
    return model


def true_model(agent: int, scenario):
    if not 0 <= agent < scenario.n_agents:
        raise InputError(f"unknown agent {agent}")
    return build_model(scenario.agents[agent].plant)


def build_model(mc):
    """Instantiate a model from its scenario block."""
    if mc.type == "linear":
        dist = tuple(mc.disturbance) if mc.disturbance is not None else None
        return LinearAgentModel(mc.A, mc.B, dist)
    if mc.type == "wmr":
        return WMRModel(mc.input_scale, mc.dt)
    raise InputError(f"unknown model type {mc.type!r}")
