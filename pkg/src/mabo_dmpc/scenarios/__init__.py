"""Bundled scenario documents.

Each ``<id>.json`` file in this directory is one scenario; the
``notes`` entry says which values are modelling choices rather than
given constants, and ``expected`` lists properties the test suite checks.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..config import ScenarioConfig, parse_scenario
from ..errors import InputError


def list_scenarios():
    """Sorted identifiers of the bundled scenarios."""
    root = resources.files(__name__)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def scenario_text(identifier: str) -> str:
    if identifier not in list_scenarios():
        raise InputError(f"unknown scenario {identifier!r}; bundled: {', '.join(list_scenarios())}")
    return resources.files(__name__).joinpath(f"{identifier}.json").read_text(encoding="utf-8")


def load_scenario(identifier: str) -> ScenarioConfig:
    """Parse a bundled scenario.

    Raises
    ------
    InputError
        ``identifier`` is not bundled.
    """
    return parse_scenario(scenario_text(identifier))


def resolve(ref: str) -> str:
    """Scenario text for a file path or a bundled identifier.

    A trailing ``.json`` on a bundled identifier is accepted.
    """
    path = Path(ref)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    if str(path.parent) in ("", ".") and name in list_scenarios():
        return scenario_text(name)
    raise InputError(f"no scenario file or bundled scenario named {ref!r}")
