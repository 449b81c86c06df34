"""Assembles world, memory and controller from a run config and drives the loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .affect import entropy
from .config import RunConfig, controller_params, memory_config, reconcile_config
from .controller import ControllerParams, EmotionController, Policy, TickTrace
from .memory import EpisodicMemory, MemoryConfig, PhaseGuard, SICViolation
from .world import N_HEADINGS, CrowdWorld, Perception, Scenario, WorldState, load_scenario

MANIFEST_SCHEMA = "affectloop.manifest/1"

MemoryFactory = Callable[[MemoryConfig, PhaseGuard], EpisodicMemory]
SetupHook = Callable[["Runtime"], None]


def default_memory(config: MemoryConfig, guard: PhaseGuard) -> EpisodicMemory:
    return EpisodicMemory(config, guard, audit_mode=True)


def reference_manifest(
    obs_dim: int = 20, affect_dim: int = 8, n_policies: int = 5, *, telemetry: bool = True
) -> dict:
    """Declared dataflow of the witness build."""

    def signal(name, producer, consumers, dim, origin="internal", schema="typed-narrow"):
        return {
            "name": name,
            "producer": producer,
            "consumers": consumers,
            "schema": schema,
            "origin": origin,
            "dim": dim,
            "self_ascription": False,
        }

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "modules": [
            {"name": "world", "kind": "sensor"},
            {"name": "categorizer", "kind": "perception"},
            {"name": "need_appraisal", "kind": "appraisal"},
            {"name": "memory", "kind": "memory"},
            {"name": "controller", "kind": "controller"},
            {"name": "instantiation", "kind": "controller"},
            {"name": "effector", "kind": "effector"},
            {"name": "telemetry", "kind": "telemetry"},
        ],
        "signals": [
            signal("x", "world", ["categorizer", "need_appraisal"], obs_dim, origin="exogenous"),
            signal("c", "categorizer", ["memory", "need_appraisal"], 6),
            signal("y", "categorizer", ["need_appraisal", "instantiation"], 8),
            signal("needs", "need_appraisal", ["controller"], 3),
            signal("z_need", "need_appraisal", ["controller"], affect_dim),
            signal("h_need", "need_appraisal", ["controller"], n_policies),
            signal("retrieval", "memory", ["controller"], affect_dim + n_policies + 1),
            signal("q", "controller", ["instantiation"], n_policies),
            signal("s", "instantiation", ["controller"], N_HEADINGS + 1),
            signal("u", "controller", ["effector"], 1),
            signal("episode", "controller", ["memory"], 6 + 3 * affect_dim + n_policies + 1),
            signal("trace", "controller", ["telemetry"], 0),
        ],
        "memory": {
            "module": "memory",
            "readers": ["controller"],
            "writers": ["controller"],
            "read_phase": "A3",
            "write_phase": "A8",
        },
        "parameter_groups": [
            {"name": name, "module": "controller", "frozen": True}
            for name in (
                "affect_map",
                "hint_maps",
                "traits",
                "temperatures",
                "fusion",
                "mood",
                "templates",
                "reappraisal",
            )
        ],
        "optimizers": [],
        "key_provenance": ["x"],
    }
    if not telemetry:
        manifest["modules"] = [m for m in manifest["modules"] if m["kind"] != "telemetry"]
        manifest["signals"] = [sig for sig in manifest["signals"] if sig["name"] != "trace"]
    return manifest


@dataclass
class WitnessSystem:
    """Everything needed to instantiate one run; injectors return modified copies."""

    config: RunConfig
    params: ControllerParams
    scenario: Scenario
    manifest: dict
    memory_factory: MemoryFactory = default_memory
    setup_hooks: Tuple[SetupHook, ...] = ()
    injectors: Tuple[str, ...] = ()

    def copy(self, **changes) -> "WitnessSystem":
        out = replace(self, **changes)
        if "manifest" not in changes:
            out.manifest = copy.deepcopy(self.manifest)
        return out


def build_system(config: RunConfig, *, scenario: Optional[Scenario] = None) -> WitnessSystem:
    scenario = scenario if scenario is not None else load_scenario(config.scenario)
    params = controller_params(config)
    if len(scenario.perception.needs) != params.affect.n_needs:
        raise ValueError(
            f"scenario declares {len(scenario.perception.needs)} needs, "
            f"controller is configured for {params.affect.n_needs}"
        )
    manifest = reference_manifest(
        obs_dim=scenario.perception.obs_dim,
        affect_dim=params.affect.affect_dim,
        n_policies=len(Policy),
        telemetry=config.features.trace,
    )
    system = WitnessSystem(config, params, scenario, manifest)
    if config.features.injectors:
        from .audit import inject

        for name in config.features.injectors:
            system = inject(name, system)
    return system


@dataclass
class Runtime:
    system: WitnessSystem
    world: CrowdWorld
    memory: EpisodicMemory
    controller: EmotionController
    state: WorldState


@dataclass
class MetricsRow:
    tick: int
    mean_nearest_peer_distance: Optional[float]
    discrepancy: Tuple[float, ...]
    policy_entropy: float
    policy: str
    succ: float
    memory_size: int

    @staticmethod
    def header(need_names) -> List[str]:
        return (
            ["tick", "mean_nearest_peer_distance"]
            + [f"discrepancy_{n}" for n in need_names]
            + ["policy_entropy", "policy", "succ", "memory_size"]
        )

    def row(self) -> list:
        dist = "" if self.mean_nearest_peer_distance is None else repr(self.mean_nearest_peer_distance)
        return (
            [self.tick, dist]
            + [repr(d) for d in self.discrepancy]
            + [repr(self.policy_entropy), self.policy, repr(self.succ), self.memory_size]
        )


@dataclass
class RunResult:
    traces: List[TickTrace] = field(default_factory=list)
    metrics: List[MetricsRow] = field(default_factory=list)
    states: List[WorldState] = field(default_factory=list)
    hashes_pre: dict = field(default_factory=dict)
    hashes_post: dict = field(default_factory=dict)
    reconciles: list = field(default_factory=list)
    violation: Optional[SICViolation] = None
    manifest: dict = field(default_factory=dict)
    trace_enabled: bool = True

    @property
    def records(self) -> List[dict]:
        """Serialized traces; empty when trace logging is disabled."""
        return [t.to_dict() for t in self.traces] if self.trace_enabled else []

    @property
    def ok(self) -> bool:
        return self.violation is None


def make_runtime(system: WitnessSystem, seed: Optional[int] = None) -> Runtime:
    seed = system.config.seed if seed is None else seed
    world_seed, ctrl_seed = np.random.SeedSequence(seed).spawn(2)
    world = CrowdWorld(system.scenario, world_seed)
    memory = system.memory_factory(memory_config(system.config), PhaseGuard())
    controller = EmotionController(
        system.params,
        Perception(system.scenario.perception),
        memory,
        seed=ctrl_seed,
        agent_id=system.config.agent_id,
    )
    return Runtime(system, world, memory, controller, world.reset())


def metrics_row(trace: TickTrace, state: WorldState, runtime: Runtime) -> MetricsRow:
    n = trace.needs_post
    return MetricsRow(
        tick=trace.tick,
        mean_nearest_peer_distance=state.mean_nearest_peer_distance(runtime.world.n_slots),
        discrepancy=tuple((n.targets - n.values).tolist()),
        policy_entropy=entropy(trace.q),
        policy=Policy(trace.policy).name,
        succ=trace.succ,
        memory_size=len(runtime.memory),
    )


def run_system(
    system: WitnessSystem,
    steps: Optional[int] = None,
    *,
    seed: Optional[int] = None,
    runtime: Optional[Runtime] = None,
) -> RunResult:
    """Run the loop; an SIC violation stops the run and is reported in the result."""
    steps = system.config.steps if steps is None else steps
    result = RunResult(manifest=system.manifest, trace_enabled=system.config.features.trace)
    try:
        rt = runtime if runtime is not None else make_runtime(system, seed)
        result.hashes_pre = rt.controller.frozen_hashes()
        for hook in system.setup_hooks:
            hook(rt)
        interval = system.config.reconcile.interval
        rc = reconcile_config(system.config)
        for t in range(steps):
            trace, rt.state = rt.controller.tick(rt.world, rt.state)
            result.traces.append(trace)
            result.states.append(rt.state)
            result.metrics.append(metrics_row(trace, rt.state, rt))
            if interval and (t + 1) % interval == 0:
                result.reconciles.append(rt.memory.reconcile(rc))
        result.hashes_post = rt.controller.frozen_hashes()
    except SICViolation as exc:
        result.violation = exc
        if "rt" in locals():
            result.hashes_post = rt.controller.frozen_hashes()
    return result


def run_random_baseline(scenario: Scenario, steps: int, seed: int) -> List[WorldState]:
    """Uniform-random action agent in the same world (same world seed stream)."""
    world_seed, action_seed = np.random.SeedSequence(seed).spawn(2)
    world = CrowdWorld(scenario, world_seed)
    rng = np.random.default_rng(action_seed)
    state = world.reset()
    states = []
    for _ in range(steps):
        state = world.execute(state, int(rng.integers(0, N_HEADINGS + 1)))
        states.append(state)
    return states


def resolve_scenario_path(config: RunConfig, config_path) -> RunConfig:
    if config.scenario.startswith("builtin:") or Path(config.scenario).is_absolute():
        return config
    base = Path(config_path).resolve().parent
    return config.with_overrides(scenario=str(base / config.scenario))

