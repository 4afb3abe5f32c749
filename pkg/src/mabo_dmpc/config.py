"""Scenario documents: schema, validation and (de)serialization.

A scenario is a JSON object. Unknown keys are rejected and every error
names the dotted path of the offending entry. Defaults are filled in on
parse, so ``serialize(parse(doc))`` is a complete, canonical document.
"""

from __future__ import annotations

import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from typing import List, Optional

from .errors import SchemaError

KINDS = ("linear-3agent", "wmr-formation", "custom")
MODES = ("plain", "modified", "parametric")
PARAM_KINDS = ("reference_bias", "log_weight", "input_log_weight", "backoff", "coupling_bias")


@dataclass
class ModelConfig:
    """Either ``type="linear"`` (A, B, optional disturbance on the first
    state) or ``type="wmr"`` (unicycle with input scale and step size)."""

    type: str = "linear"
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    disturbance: Optional[List[float]] = None
    input_scale: float = 1.0
    dt: float = 0.1

    def validate(self, path):
        if self.type == "linear":
            if self.A is None or self.B is None:
                raise SchemaError("linear model needs A and B", path)
            n = len(self.A)
            if n == 0 or any(len(r) != n for r in self.A):
                raise SchemaError("A must be square", f"{path}.A")
            if len(self.B) != n or len({len(r) for r in self.B}) != 1:
                raise SchemaError("B must have one row per state", f"{path}.B")
            if self.disturbance is not None and (
                len(self.disturbance) != 2 or self.disturbance[0] > self.disturbance[1]
            ):
                raise SchemaError("disturbance must be [low, high]", f"{path}.disturbance")
        elif self.type == "wmr":
            if self.input_scale <= 0:
                raise SchemaError("must be positive", f"{path}.input_scale")
            if self.dt <= 0:
                raise SchemaError("must be positive", f"{path}.dt")
        else:
            raise SchemaError(f"unknown model type {self.type!r}", f"{path}.type")

    @property
    def nx(self):
        return len(self.A) if self.type == "linear" else 3

    @property
    def nu(self):
        return len(self.B[0]) if self.type == "linear" else 2


@dataclass
class StateConstraint:
    index: int = 0
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass
class AgentConfig:
    plant: ModelConfig = field(default_factory=ModelConfig)
    prediction: Optional[ModelConfig] = None  # defaults to the plant
    initial_state: List[float] = field(default_factory=list)
    reference: Optional[List[float]] = None
    state_weight: Optional[List[float]] = None
    input_weight: Optional[List[float]] = None
    terminal_weight: Optional[List[float]] = None
    input_lower: Optional[List[float]] = None
    input_upper: Optional[List[float]] = None
    state_constraints: List[StateConstraint] = field(default_factory=list)
    constraint_penalty: List[float] = field(default_factory=lambda: [100.0, 100.0])
    name: str = ""


@dataclass
class EdgeConfig:
    """Agent ``agent`` keeps a copy of agent ``neighbor``'s states and
    penalizes ``x_neighbor[c] - x_agent[c] - offset`` on the coupled components."""

    agent: int = 0
    neighbor: int = 0
    offset: List[float] = field(default_factory=list)


@dataclass
class CouplingConfig:
    edges: List[EdgeConfig] = field(default_factory=list)
    copied_states: List[int] = field(default_factory=list)
    coupled_states: List[int] = field(default_factory=list)
    weight: float = 10.0
    smoothing: float = 1.0


@dataclass
class DualConfig:
    step: float = 0.05
    eps_mu: float = 1e-4
    eps_w: float = 1e-4
    max_iter: int = 200
    stop_on_coupling: bool = False
    solver_tol: float = 1e-6


@dataclass
class ParamConfig:
    """One learnable component: its owner agent, what it shifts and its box."""

    agent: int = 0
    kind: str = "reference_bias"
    index: int = 0
    lower: float = -1.0
    upper: float = 1.0


@dataclass
class AnalyticConfig:
    """Per-agent quadratic objective ``scale * |zeta - center|^2`` (plant bypassed)."""

    centers: List[List[float]] = field(default_factory=list)
    scales: List[float] = field(default_factory=list)


@dataclass
class LearningConfig:
    episodes: int = 20
    steps: int = 40
    rho: float = 1.0
    warmup: int = 5
    acquisition: str = "ei"
    lookahead: int = 1
    samples: int = 64
    common_random_numbers: bool = True
    normalize: bool = True
    params: List[ParamConfig] = field(default_factory=list)
    analytic: Optional[AnalyticConfig] = None


@dataclass
class ScenarioConfig:
    name: str = "custom"
    kind: str = "custom"
    seed: int = 0
    mode: str = "parametric"
    horizon: int = 10
    discount: float = 1.0
    agents: List[AgentConfig] = field(default_factory=list)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    dual: DualConfig = field(default_factory=DualConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    notes: str = ""
    expected: Optional[dict] = None  # properties the regression suite asserts; free-form

    @property
    def n_agents(self):
        return len(self.agents)


# -- generic conversion ---------------------------------------------------

def _is_optional(tp):
    return typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp)


def _convert(value, tp, path):
    if _is_optional(tp):
        if value is None:
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _convert(value, inner, path)
    origin = typing.get_origin(tp)
    if origin in (list, List):
        if not isinstance(value, list):
            raise SchemaError("expected a list", path)
        (inner,) = typing.get_args(tp)
        return [_convert(v, inner, f"{path}[{k}]") for k, v in enumerate(value)]
    if is_dataclass(tp):
        return _build(tp, value, path)
    if tp is dict:
        if not isinstance(value, dict):
            raise SchemaError("expected an object", path)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise SchemaError("expected a boolean", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError("expected an integer", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError("expected a number", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise SchemaError("expected a string", path)
        return value
    raise SchemaError(f"unsupported type {tp}", path)  # pragma: no cover


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise SchemaError("expected an object", path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise SchemaError(f"unknown key {key!r}", where)
    kw = {}
    for f in fields(cls):
        where = f"{path}.{f.name}" if path else f.name
        if f.name in doc:
            kw[f.name] = _convert(doc[f.name], hints[f.name], where)
        elif f.default is MISSING and f.default_factory is MISSING:  # pragma: no cover
            raise SchemaError("missing required key", where)
    return cls(**kw)


# -- semantic validation --------------------------------------------------

def _check_len(seq, n, path):
    if seq is not None and len(seq) != n:
        raise SchemaError(f"expected length {n}, got {len(seq)}", path)


def _validate(cfg: ScenarioConfig):
    if cfg.kind not in KINDS:
        raise SchemaError(f"unknown kind {cfg.kind!r}", "kind")
    if cfg.mode not in MODES:
        raise SchemaError(f"unknown mode {cfg.mode!r}", "mode")
    if cfg.horizon < 1:
        raise SchemaError("must be >= 1", "horizon")
    if not 0.0 < cfg.discount <= 1.0:
        raise SchemaError("must lie in (0, 1]", "discount")
    m = cfg.n_agents
    lc = cfg.learning
    if m == 0:
        raise SchemaError("at least one agent is required", "agents")
    for i, ag in enumerate(cfg.agents):
        p = f"agents[{i}]"
        ag.plant.validate(f"{p}.plant")
        if ag.prediction is not None:
            ag.prediction.validate(f"{p}.prediction")
            if (ag.prediction.nx, ag.prediction.nu) != (ag.plant.nx, ag.plant.nu):
                raise SchemaError("prediction model dimensions differ from the plant", f"{p}.prediction")
        nx, nu = ag.plant.nx, ag.plant.nu
        _check_len(ag.initial_state, nx, f"{p}.initial_state")
        for name in ("reference", "state_weight", "terminal_weight"):
            _check_len(getattr(ag, name), nx, f"{p}.{name}")
        for name in ("input_weight", "input_lower", "input_upper"):
            _check_len(getattr(ag, name), nu, f"{p}.{name}")
        for w in (ag.state_weight or []) + (ag.input_weight or []) + (ag.terminal_weight or []):
            if w < 0:
                raise SchemaError("weights must be non-negative", p)
        if ag.input_lower and ag.input_upper and any(a > b for a, b in zip(ag.input_lower, ag.input_upper)):
            raise SchemaError("input bounds are inverted", f"{p}.input_lower")
        for k, sc in enumerate(ag.state_constraints):
            q = f"{p}.state_constraints[{k}]"
            if not 0 <= sc.index < nx:
                raise SchemaError("state index out of range", f"{q}.index")
            if sc.lower is None and sc.upper is None:
                raise SchemaError("needs lower or upper", q)
            if sc.lower is not None and sc.upper is not None and sc.lower > sc.upper:
                raise SchemaError("bounds are inverted", q)
        if any(w <= 0 for w in ag.constraint_penalty):
            raise SchemaError("penalties must be positive", f"{p}.constraint_penalty")
        if ag.state_constraints and len(ag.constraint_penalty) not in (1, 2):
            raise SchemaError("give one penalty or a [lower, upper] pair", f"{p}.constraint_penalty")
    cp = cfg.coupling
    seen = set()
    for k, e in enumerate(cp.edges):
        q = f"coupling.edges[{k}]"
        for name in ("agent", "neighbor"):
            if not 0 <= getattr(e, name) < m:
                raise SchemaError("references an undefined agent", f"{q}.{name}")
        if e.agent == e.neighbor:
            raise SchemaError("self-coupling is not allowed", q)
        if (e.agent, e.neighbor) in seen:
            raise SchemaError("duplicate edge", q)
        seen.add((e.agent, e.neighbor))
        _check_len(e.offset, len(cp.coupled_states), f"{q}.offset")
        for s in cp.copied_states:
            if not 0 <= s < cfg.agents[e.neighbor].plant.nx:
                raise SchemaError("copied state out of range", "coupling.copied_states")
    if cp.edges and not set(cp.coupled_states) <= set(cp.copied_states):
        raise SchemaError("coupled states must be among the copied states", "coupling.coupled_states")
    offs = {(e.agent, e.neighbor): e.offset for e in cp.edges}
    for (i, j), off in offs.items():
        back = offs.get((j, i))
        if back is not None and any(abs(a + b) > 1e-12 for a, b in zip(off, back)):
            raise SchemaError(f"offsets of ({i},{j}) and ({j},{i}) must be opposite", "coupling.edges")
    if cp.weight < 0 or cp.smoothing < 0:
        raise SchemaError("must be non-negative", "coupling")
    d = cfg.dual
    if d.step < 0 or d.eps_mu < 0 or d.eps_w < 0 or d.max_iter < 1:
        raise SchemaError("invalid dual settings", "dual")
    if lc.episodes < 1 or lc.steps < 1 or lc.warmup < 1:
        raise SchemaError("episodes, steps and warmup must be >= 1", "learning")
    if lc.rho < 0:
        raise SchemaError("must be non-negative", "learning.rho")
    if lc.acquisition not in ("ei", "nonmyopic"):
        raise SchemaError(f"unknown acquisition {lc.acquisition!r}", "learning.acquisition")
    if lc.lookahead < 1 or lc.samples < 1:
        raise SchemaError("must be >= 1", "learning")
    for k, pc in enumerate(lc.params):
        q = f"learning.params[{k}]"
        if pc.kind not in PARAM_KINDS:
            raise SchemaError(f"unknown parameter kind {pc.kind!r}", f"{q}.kind")
        if not 0 <= pc.agent < m:
            raise SchemaError("references an undefined agent", f"{q}.agent")
        if not pc.lower < pc.upper:
            raise SchemaError("box must be non-degenerate", q)
    if lc.analytic is not None:
        an = lc.analytic
        if len(an.centers) != m or len(an.scales) != m:
            raise SchemaError("one center and scale per agent", "learning.analytic")
        for k, c in enumerate(an.centers):
            _check_len(c, len(lc.params), f"learning.analytic.centers[{k}]")
    elif not lc.params:
        pass
    return cfg


def parse_scenario(document) -> ScenarioConfig:
    """Parse a scenario from a JSON string, bytes or an already-decoded dict.

    Raises
    ------
    SchemaError
        Malformed JSON, unknown keys or values violating the schema; the
        message starts with the offending path.
    """
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON ({exc.msg})", "<root>") from None
    cfg = _build(ScenarioConfig, document, "")
    return _validate(cfg)


def to_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)


def serialize(cfg: ScenarioConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
