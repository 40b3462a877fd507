"""Run configuration: one JSON file covering every pipeline stage.

Example (every key optional; missing keys take the documented defaults)::

    {
      "seed": 0,
      "world": {"n_scenes": 2000, "maneuver_weights": {"cruise": 2.0}},
      "sft": {"learning_rate": 0.01, "steps": 6000, "batch_size": 32, "route_threshold": 0.5},
      "grpo": {"G": 6, "epsilon": 0.2, "beta": 0.04, "iterations": 200},
      "rewards": {"w_t": 1.0, "w_m": 1.0, "w_f": 1.0, "w_r": 1.0},
      "eval": {"convention": "stp3", "holdout_fraction": 0.2},
      "ablate": {"groups": [6, 12, 24]}
    }

Component seeds (``sft.seed``, ``grpo.seed``, ...) default to values derived
from the root ``seed`` and the component name; set one explicitly to pin it.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .grpo import GrpoConfig
from .metrics import CONVENTIONS
from .rewards import RewardWeights
from .seeding import derive_seed
from .sft import SftConfig
from .world import MANEUVERS, WorldConfig


class ConfigError(ValueError):
    """Configuration file missing, malformed or inconsistent."""


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _check_keys(section: str, data: Mapping, allowed) -> None:
    for key in data:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r}")


@dataclass(frozen=True)
class EvalSettings:
    convention: str = "stp3"
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


@dataclass(frozen=True)
class AblateSettings:
    groups: tuple = (6, 12, 24)
    iterations: Optional[int] = None

    def __post_init__(self):
        groups = tuple(int(g) for g in self.groups)
        if not groups or min(groups) < 2:
            raise ValueError("ablate.groups needs group sizes >= 2")
        object.__setattr__(self, "groups", groups)
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("ablate.iterations must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_scenes: int = 2000
    world: WorldConfig = field(default_factory=WorldConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablate: AblateSettings = field(default_factory=AblateSettings)

    def seed_for(self, label: str, *index: int) -> int:
        return derive_seed(self.seed, label, *index)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "world": {"n_scenes": self.n_scenes, **dataclasses.asdict(self.world)},
            "sft": dataclasses.asdict(self.sft),
            "grpo": dataclasses.asdict(self.grpo),
            "rewards": dataclasses.asdict(self.rewards),
            "eval": dataclasses.asdict(self.eval),
            "ablate": {"groups": list(self.ablate.groups), "iterations": self.ablate.iterations},
        }
        return d

    def with_overrides(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


_SECTIONS = ("seed", "world", "sft", "grpo", "rewards", "eval", "ablate")


def _section(name: str, cls, data: Mapping, extra: Mapping | None = None):
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    _check_keys(name, data, _fields(cls))
    kwargs = dict(extra or {})
    kwargs.update(data)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from exc


def from_dict(data: Mapping[str, Any], seed: Optional[int] = None) -> RunConfig:
    """Build a ``RunConfig``, rejecting unknown keys at any level."""
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a JSON object")
    _check_keys("", data, _SECTIONS)
    root = data.get("seed", 0) if seed is None else seed
    if not isinstance(root, int) or isinstance(root, bool):
        raise ConfigError("seed must be an integer")

    world_data = dict(data.get("world", {}))
    if not isinstance(world_data, Mapping):
        raise ConfigError("config section 'world' must be an object")
    n_scenes = world_data.pop("n_scenes", 2000)
    if not isinstance(n_scenes, int) or n_scenes < 1:
        raise ConfigError("world.n_scenes must be a positive integer")
    weights = {m.value: 1.0 for m in MANEUVERS}
    if "maneuver_weights" in world_data:
        given = world_data["maneuver_weights"]
        if not isinstance(given, Mapping):
            raise ConfigError("world.maneuver_weights must be an object")
        for key in given:
            if key not in weights:
                raise ConfigError(f"unknown maneuver weight key {key!r} in world.maneuver_weights")
        weights.update(given)
    world_data["maneuver_weights"] = weights
    world = _section("world", WorldConfig, world_data)

    sft = _section("sft", SftConfig, data.get("sft", {}), {"seed": derive_seed(root, "sft")})
    grpo = _section("grpo", GrpoConfig, data.get("grpo", {}), {"seed": derive_seed(root, "grpo")})
    rewards = _section("rewards", RewardWeights, data.get("rewards", {}))
    ev = _section("eval", EvalSettings, data.get("eval", {}))
    ab = _section("ablate", AblateSettings, data.get("ablate", {}))
    return RunConfig(root, n_scenes, world, sft, grpo, rewards, ev, ab)


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return from_dict(data, seed)


def write_resolved(config: RunConfig, path, extra: Optional[Mapping] = None) -> Path:
    """Write the effective configuration; it reloads to the same ``RunConfig``."""
    d = copy.deepcopy(config.to_dict())
    if extra:
        d["_run"] = dict(extra)
    path = Path(path)
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_resolved(path) -> RunConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    data.pop("_run", None)
    return from_dict(data)
