"""Strict run configuration. Unknown keys anywhere are rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .affect import AffectMap, HintMaps, Temperature, TraitParams
from .controller import ControllerParams, TemplateParams
from .memory import MemoryConfig, ReconcileConfig

CONFIG_SCHEMA = "affectloop.config/1"

INJECTOR_NAMES = (
    "IDENTITY_KEY",
    "TIMESTAMP_KEY",
    "SECOND_READER",
    "CROSS_EPISODE_SUMMARY",
    "TELEMETRY_FEEDBACK",
    "UNFROZEN_PARAM",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# Reference maps for B=2 affect channels (lonely-like, crowded-like) and
# L=3 needs (affiliation, independence, safety). Policy rows are
# SEEK, AVOID, EXPLORE, FLEE, REST; affect columns are v1 v2 m1 m2 a d1 d2 d3.
REFERENCE_VALENCE = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]
REFERENCE_MAGNITUDE = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
REFERENCE_NEED_HINTS = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.4, 0.0, 0.0],
    [0.0, 0.0, 2.0],
    [0.0, 0.0, 0.0],
]
REFERENCE_AFFECT_HINTS = [
    [-0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0],
]


class TemplateSection(_Strict):
    explore_move: float = Field(0.6, ge=0, le=1)
    explore_pause: float = Field(0.2, ge=0, le=1)
    rest_pause: float = Field(1.0, ge=0, le=1)
    rest_move: float = Field(0.1, ge=0, le=1)
    directional_pause: float = Field(0.0, ge=0, le=1)
    invalid: float = Field(0.5, ge=0, le=1)


class ControllerSection(_Strict):
    drive_gains: List[float] = [1.0, 1.0, 1.0]
    valence_map: List[List[float]] = REFERENCE_VALENCE
    magnitude_map: List[List[float]] = REFERENCE_MAGNITUDE
    need_hint_map: List[List[float]] = REFERENCE_NEED_HINTS
    affect_hint_map: List[List[float]] = REFERENCE_AFFECT_HINTS
    alphas: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    traits: Optional[List[float]] = None
    tau_policy: Tuple[float, float] = (2.0, 0.25)
    tau_action: Tuple[float, float] = (0.5, 0.05)
    memory_weight: float = Field(0.5, ge=0, le=1)
    mood_weight: float = Field(0.15, ge=0, le=1)
    mood_decay: float = Field(0.95, ge=0.9, le=0.99)
    templates: TemplateSection = TemplateSection()
    success_gain: float = Field(4.0, ge=0)
    success_mode: Literal["drive_reduction", "hedonic"] = "drive_reduction"
    action_mode: Literal["sample", "argmax"] = "sample"


class MemorySection(_Strict):
    k: int = Field(5, ge=1)
    capacity: int = Field(500, ge=1)
    combine_weight: float = Field(0.5, ge=0, le=1)
    flash_threshold: float = Field(0.8, ge=0, le=1)


class ReconcileSection(_Strict):
    interval: int = Field(50, ge=0)  # 0 disables
    dup_threshold: float = Field(0.98, ge=0, le=1)
    flash_threshold: float = Field(0.8, ge=0, le=1)
    max_age: int = Field(200, ge=0)
    min_retrievals: int = Field(1, ge=0)
    horizon: int = Field(5, ge=0)
    rare_threshold: float = Field(0.9, ge=-1, le=1)
    bonus: float = Field(0.1, ge=0, le=1)
    reestimate_weight: float = Field(0.7, ge=0, le=1)


class FeatureSection(_Strict):
    mood: bool = True
    ablate_memory: bool = False
    trace: bool = True
    injectors: List[Literal[INJECTOR_NAMES]] = []  # type: ignore[valid-type]


class RunConfig(_Strict):
    schema_: Literal[CONFIG_SCHEMA] = Field(CONFIG_SCHEMA, alias="schema")
    seed: int = Field(0, ge=0)
    steps: int = Field(200, ge=0)
    scenario: str = "builtin:reference"
    agent_id: int = Field(0, ge=0)
    controller: ControllerSection = ControllerSection()
    memory: MemorySection = MemorySection()
    reconcile: ReconcileSection = ReconcileSection()
    features: FeatureSection = FeatureSection()

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _shapes(self):
        # building the runtime parameters runs every dimension check
        controller_params(self)
        return self

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.model_dump(by_alias=True)
        for dotted, value in changes.items():
            node = data
            *path, last = dotted.split(".")
            for part in path:
                node = node[part]
            node[last] = value
        return RunConfig.model_validate(data)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True, mode="json"), indent=2, sort_keys=True)


def controller_params(cfg: RunConfig) -> ControllerParams:
    c = cfg.controller
    n_needs = len(c.drive_gains)
    params = ControllerParams(
        affect=AffectMap(c.drive_gains, c.valence_map, c.magnitude_map),
        hints=HintMaps(c.need_hint_map, c.affect_hint_map, c.alphas),
        traits=TraitParams(c.traits if c.traits is not None else [1.0] * n_needs),
        tau_policy=Temperature(*c.tau_policy),
        tau_action=Temperature(*c.tau_action),
        memory_weight=c.memory_weight,
        mood_weight=c.mood_weight,
        mood_decay=c.mood_decay if cfg.features.mood else None,
        templates=TemplateParams(**c.templates.model_dump()),
        success_gain=c.success_gain,
        success_mode=c.success_mode,
        action_mode=c.action_mode,
    )
    if cfg.features.ablate_memory:
        params = params.ablate_memory()
    return params


def memory_config(cfg: RunConfig) -> MemoryConfig:
    return MemoryConfig(**cfg.memory.model_dump())


def reconcile_config(cfg: RunConfig) -> ReconcileConfig:
    data = cfg.reconcile.model_dump()
    data.pop("interval")
    return ReconcileConfig(**data)


def load_config(path) -> RunConfig:
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def reference_config(**overrides) -> RunConfig:
    return RunConfig().with_overrides(**overrides) if overrides else RunConfig()
