"""2-D crowd scene: peers, an optional threat, a safe region, and the agent's perception.

Bearings are world-frame angles in (-pi, pi]; the agent moves on a fixed
compass of eight headings or pauses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .affect import Needs, frozen_array

SCENARIO_SCHEMA = "affectloop.scenario/1"
NEED_CHANNELS = ("affiliation", "independence", "safety")
N_HEADINGS = 8
PAUSE = N_HEADINGS


def wrap_angle(a: float) -> float:
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a <= -math.pi else a


def heading_angle(action: int) -> float:
    if not 0 <= action < N_HEADINGS:
        raise ValueError(f"action {action} is not a heading")
    return wrap_angle(action * math.pi / 4.0)


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class PerceptionConfig:
    n_slots: int = 4
    density_radius: float = 4.0
    density_cap: float = 6.0
    comfort_near: float = 1.5
    comfort_far: float = 4.0
    affiliation_falloff: float = 12.0
    density_comfort: float = 0.5
    threat_half_distance: float = 6.0
    threat_width: float = 1.5
    needs: Tuple[str, ...] = NEED_CHANNELS
    targets: Tuple[float, ...] = (1.0, 1.0, 1.0)
    safe_center: Tuple[float, float] = (0.0, 0.0)
    safe_radius: float = 0.0

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("n_slots must be positive")
        if len(self.targets) != len(self.needs):
            raise ValueError("one target per need channel is required")
        unknown = set(self.needs) - set(NEED_CHANNELS)
        if unknown:
            raise ValueError(f"unknown need channels: {sorted(unknown)}")
        if not 0.0 <= self.density_comfort < 1.0:
            raise ValueError("density_comfort must lie in [0, 1)")
        if not 0.0 < self.comfort_near <= self.comfort_far:
            raise ValueError("comfort band must satisfy 0 < near <= far")

    @property
    def obs_dim(self) -> int:
        return 1 + 3 * self.n_slots + 3 + 4


@dataclass(frozen=True)
class ThreatScript:
    spawn_tick: int = 0
    spawn_offset: Tuple[float, float] = (10.0, 0.0)
    speed: float = 0.5
    capture_radius: float = 0.5


@dataclass(frozen=True)
class Scenario:
    arena: Tuple[float, float, float, float] = (0.0, 0.0, 40.0, 40.0)
    agent_position: Tuple[float, float] = (5.0, 5.0)
    agent_heading: float = 0.0
    agent_speed: float = 1.0
    peer_positions: Tuple[Tuple[float, float], ...] = ()
    peer_motion: str = "static"  # static | random_walk | scripted
    peer_step_sigma: float = 0.1
    peer_velocities: Tuple[Tuple[float, float], ...] = ()
    threat: Optional[ThreatScript] = None
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)

    def __post_init__(self):
        if self.peer_motion not in ("static", "random_walk", "scripted"):
            raise ValueError(f"unknown peer motion {self.peer_motion!r}")
        if self.peer_motion == "scripted" and len(self.peer_velocities) != len(self.peer_positions):
            raise ValueError("scripted peers need one velocity per peer")
        x0, y0, x1, y1 = self.arena
        if not (x1 > x0 and y1 > y0):
            raise ValueError("arena must have positive extent")


def _pairs(items) -> Tuple[Tuple[float, float], ...]:
    return tuple((float(a), float(b)) for a, b in items)


def scenario_from_dict(data: dict) -> Scenario:
    data = dict(data)
    schema = data.pop("schema", None)
    if schema != SCENARIO_SCHEMA:
        raise ValueError(f"unsupported scenario schema {schema!r}")
    allowed = {"arena", "agent", "peers", "threat", "safe_region", "perception"}
    extra = set(data) - allowed
    if extra:
        raise ValueError(f"unknown scenario fields: {sorted(extra)}")
    agent = data.get("agent", {})
    peers = data.get("peers", {})
    safe = data.get("safe_region", {"center": [0.0, 0.0], "radius": 0.0})
    perception = dict(data.get("perception", {}))
    for key in ("needs", "targets"):
        if key in perception:
            perception[key] = tuple(perception[key])
    perception["safe_center"] = tuple(float(v) for v in safe["center"])
    perception["safe_radius"] = float(safe["radius"])
    threat = data.get("threat")
    return Scenario(
        arena=tuple(float(v) for v in data.get("arena", (0.0, 0.0, 40.0, 40.0))),
        agent_position=tuple(float(v) for v in agent.get("position", (5.0, 5.0))),
        agent_heading=float(agent.get("heading", 0.0)),
        agent_speed=float(agent.get("speed", 1.0)),
        peer_positions=_pairs(peers.get("positions", ())),
        peer_motion=peers.get("motion", "static"),
        peer_step_sigma=float(peers.get("step_sigma", 0.1)),
        peer_velocities=_pairs(peers.get("velocities", ())),
        threat=None
        if threat is None
        else ThreatScript(
            spawn_tick=int(threat.get("spawn_tick", 0)),
            spawn_offset=tuple(float(v) for v in threat.get("spawn_offset", (10.0, 0.0))),
            speed=float(threat.get("speed", 0.5)),
            capture_radius=float(threat.get("capture_radius", 0.5)),
        ),
        perception=PerceptionConfig(**perception),
    )


def load_scenario(path) -> Scenario:
    """Load a scenario file; ``builtin:<name>`` selects a bundled scenario."""
    path = str(path)
    if path.startswith("builtin:"):
        path = str(Path(__file__).parent / "scenarios" / f"{path[len('builtin:'):]}.json")
    return scenario_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- state


@dataclass(frozen=True, eq=False)
class WorldState:
    tick: int
    agent_position: np.ndarray
    heading: float
    speed: float
    peers: np.ndarray  # (n, 2)
    threat_position: Optional[np.ndarray] = None
    threat_status: str = "none"  # none | pending | active | gone
    escaped_tick: Optional[int] = None
    caught_tick: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "agent_position", frozen_array(self.agent_position, ndim=1))
        peers = np.array(self.peers, dtype=float).reshape(-1, 2)
        peers.setflags(write=False)
        object.__setattr__(self, "peers", peers)
        if self.threat_position is not None:
            object.__setattr__(self, "threat_position", frozen_array(self.threat_position, ndim=1))

    @property
    def threat_active(self) -> bool:
        return self.threat_status == "active"

    def nearest_peer_distance(self) -> Optional[float]:
        if len(self.peers) == 0:
            return None
        return float(np.min(np.hypot(*(self.peers - self.agent_position).T)))

    def mean_nearest_peer_distance(self, n: int) -> Optional[float]:
        if len(self.peers) == 0:
            return None
        dist = np.sort(np.hypot(*(self.peers - self.agent_position).T))[:n]
        return math.fsum(dist.tolist()) / len(dist)


@dataclass(frozen=True, eq=False)
class Observation:
    """Exogenous sensor vector: density, nearest-peer slots, threat, proprioception.

    ``extra`` holds any additional channels appended after the fixed layout;
    the categorizer and need model never read it.
    """

    density: float
    peer_present: np.ndarray
    peer_bearing: np.ndarray
    peer_distance: np.ndarray
    threat_present: float
    threat_bearing: float
    threat_distance: float
    heading: float
    position: np.ndarray
    speed: float
    extra: Tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("peer_present", "peer_bearing", "peer_distance", "position"):
            object.__setattr__(self, name, frozen_array(getattr(self, name), ndim=1))
        object.__setattr__(self, "extra", tuple(float(v) for v in self.extra))

    @property
    def n_slots(self) -> int:
        return self.peer_present.shape[0]

    def to_vector(self) -> np.ndarray:
        slots = np.stack([self.peer_present, self.peer_bearing, self.peer_distance], axis=1).ravel()
        return np.concatenate(
            [
                [self.density],
                slots,
                [self.threat_present, self.threat_bearing, self.threat_distance],
                [self.heading],
                self.position,
                [self.speed],
                self.extra,
            ]
        )

    @classmethod
    def from_vector(cls, vec, n_slots: int) -> "Observation":
        vec = np.asarray(vec, dtype=float)
        base = 1 + 3 * n_slots + 3 + 4
        if vec.shape[0] < base:
            raise ValueError(f"observation vector too short: {vec.shape[0]} < {base}")
        slots = vec[1 : 1 + 3 * n_slots].reshape(n_slots, 3)
        t = 1 + 3 * n_slots
        return cls(
            density=float(vec[0]),
            peer_present=slots[:, 0],
            peer_bearing=slots[:, 1],
            peer_distance=slots[:, 2],
            threat_present=float(vec[t]),
            threat_bearing=float(vec[t + 1]),
            threat_distance=float(vec[t + 2]),
            heading=float(vec[t + 3]),
            position=vec[t + 4 : t + 6],
            speed=float(vec[t + 6]),
            extra=tuple(vec[base:].tolist()),
        )


@dataclass(frozen=True)
class InstantiationParams:
    peer_bearing: float
    peer_distance: float
    peer_valid: bool
    threat_bearing: float
    threat_distance: float
    threat_valid: bool
    safe_bearing: float
    safe_valid: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------- perception


def _triangle(x: float, peak: float, half_width: float) -> float:
    return max(0.0, 1.0 - abs(x - peak) / half_width)


class Perception:
    """Fuzzy situation categorizer plus the need model.

    The category depends on the fixed observation layout only: three
    triangular density kernels crossed with a crisp threat flag, L2-normalized.
    """

    n_categories = 6

    def __init__(self, config: PerceptionConfig):
        self.config = config

    def categorize(self, x: Observation) -> Tuple[np.ndarray, InstantiationParams]:
        rho = min(max(x.density, 0.0), 1.0)
        levels = [_triangle(rho, 0.0, 0.5), _triangle(rho, 0.5, 0.5), _triangle(rho, 1.0, 0.5)]
        threat = 1.0 if x.threat_present > 0.5 else 0.0
        raw = np.array([lv * (1.0 - threat) for lv in levels] + [lv * threat for lv in levels])
        c = raw / math.sqrt(math.fsum(float(v) * float(v) for v in raw))
        c.setflags(write=False)
        return c, self._params(x)

    def _params(self, x: Observation) -> InstantiationParams:
        present = x.peer_present > 0.5
        if present.any():
            r = x.peer_distance[present]
            b = x.peer_bearing[present]
            cx = math.fsum((r * np.cos(b)).tolist())
            cy = math.fsum((r * np.sin(b)).tolist())
            peer_bearing = wrap_angle(math.atan2(cy, cx)) if (cx or cy) else 0.0
            peer_distance = float(np.min(r))
        else:
            peer_bearing, peer_distance = 0.0, 0.0
        cfg = self.config
        dx = cfg.safe_center[0] - float(x.position[0])
        dy = cfg.safe_center[1] - float(x.position[1])
        safe_dist = math.hypot(dx, dy)
        safe_valid = cfg.safe_radius > 0.0 and safe_dist > cfg.safe_radius
        threat_valid = x.threat_present > 0.5
        return InstantiationParams(
            peer_bearing=peer_bearing,
            peer_distance=peer_distance,
            peer_valid=bool(present.any()),
            threat_bearing=x.threat_bearing if threat_valid else 0.0,
            threat_distance=x.threat_distance if threat_valid else 0.0,
            threat_valid=bool(threat_valid),
            safe_bearing=wrap_angle(math.atan2(dy, dx)) if safe_valid else 0.0,
            safe_valid=bool(safe_valid),
        )

    def affiliation(self, y: InstantiationParams) -> float:
        if not y.peer_valid:
            return 0.0
        cfg = self.config
        excess = y.peer_distance - cfg.comfort_far
        if excess <= 0.0:
            return 1.0
        return max(0.0, 1.0 - excess / cfg.affiliation_falloff)

    def independence(self, y: InstantiationParams, x: Observation) -> float:
        cfg = self.config
        rho = min(max(x.density, 0.0), 1.0)
        crowd = 1.0 if rho <= cfg.density_comfort else 1.0 - (rho - cfg.density_comfort) / (
            1.0 - cfg.density_comfort
        )
        close = 1.0
        if y.peer_valid and y.peer_distance < cfg.comfort_near:
            close = y.peer_distance / cfg.comfort_near
        return min(max(crowd, 0.0), close)

    def safety(self, y: InstantiationParams) -> float:
        if not y.threat_valid:
            return 1.0
        cfg = self.config
        return 1.0 / (1.0 + math.exp(-(y.threat_distance - cfg.threat_half_distance) / cfg.threat_width))

    def assess_needs(self, c, y: InstantiationParams, x: Observation) -> Needs:
        curves = {
            "affiliation": lambda: self.affiliation(y),
            "independence": lambda: self.independence(y, x),
            "safety": lambda: self.safety(y),
        }
        values = [min(1.0, max(0.0, curves[name]())) for name in self.config.needs]
        return Needs(values, self.config.targets)


# ---------------------------------------------------------------- world


class CrowdWorld:
    """Scenario dynamics. Stepping is deterministic given the seed."""

    def __init__(self, scenario: Scenario, seed: int | np.random.SeedSequence = 0):
        self.scenario = scenario
        self.rng = np.random.default_rng(seed)

    @property
    def n_slots(self) -> int:
        return self.scenario.perception.n_slots

    def _clamp(self, p: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.scenario.arena
        return np.array([min(max(p[0], x0), x1), min(max(p[1], y0), y1)])

    def _inside_safe(self, p: np.ndarray) -> bool:
        cfg = self.scenario.perception
        if cfg.safe_radius <= 0.0:
            return False
        return math.hypot(p[0] - cfg.safe_center[0], p[1] - cfg.safe_center[1]) <= cfg.safe_radius

    def reset(self) -> WorldState:
        sc = self.scenario
        pos = self._clamp(np.array(sc.agent_position))
        state = WorldState(
            tick=0,
            agent_position=pos,
            heading=wrap_angle(sc.agent_heading),
            speed=sc.agent_speed,
            peers=np.array([self._clamp(np.array(p)) for p in sc.peer_positions]).reshape(-1, 2),
            threat_status="pending" if sc.threat is not None else "none",
        )
        return self._maybe_spawn(state)

    def _maybe_spawn(self, state: WorldState) -> WorldState:
        threat = self.scenario.threat
        if state.threat_status != "pending" or state.tick < threat.spawn_tick:
            return state
        if self._inside_safe(state.agent_position):
            return replace(state, threat_status="gone")
        pos = self._clamp(state.agent_position + np.array(threat.spawn_offset))
        return replace(state, threat_position=pos, threat_status="active")

    def observe(self, state: WorldState) -> Observation:
        cfg = self.scenario.perception
        p = cfg.n_slots
        present = np.zeros(p)
        bearing = np.zeros(p)
        distance = np.zeros(p)
        density = 0.0
        if len(state.peers):
            delta = state.peers - state.agent_position
            dist = np.hypot(delta[:, 0], delta[:, 1])
            order = np.lexsort((np.arange(len(dist)), dist))[:p]
            for slot, j in enumerate(order):
                present[slot] = 1.0
                bearing[slot] = wrap_angle(math.atan2(delta[j, 1], delta[j, 0]))
                distance[slot] = dist[j]
            density = min(1.0, float(np.sum(dist <= cfg.density_radius)) / cfg.density_cap)
        t_present, t_bearing, t_dist = 0.0, 0.0, 0.0
        if state.threat_active:
            d = state.threat_position - state.agent_position
            t_present = 1.0
            t_bearing = wrap_angle(math.atan2(d[1], d[0]))
            t_dist = float(math.hypot(d[0], d[1]))
        return Observation(
            density=density,
            peer_present=present,
            peer_bearing=bearing,
            peer_distance=distance,
            threat_present=t_present,
            threat_bearing=t_bearing,
            threat_distance=t_dist,
            heading=state.heading,
            position=state.agent_position,
            speed=state.speed,
        )

    def execute(self, state: WorldState, action: int) -> WorldState:
        sc = self.scenario
        pos = state.agent_position
        heading = state.heading
        if action != PAUSE:
            heading = heading_angle(action)
            pos = self._clamp(pos + state.speed * np.array([math.cos(heading), math.sin(heading)]))
        peers = self._move_peers(state.peers)
        tick = state.tick + 1
        threat_pos, status = state.threat_position, state.threat_status
        escaped, caught = state.escaped_tick, state.caught_tick
        if status == "active":
            if self._inside_safe(pos):
                status, threat_pos = "gone", None
                escaped = tick
            else:
                d = pos - threat_pos
                dist = math.hypot(d[0], d[1])
                step = min(sc.threat.speed, dist)
                if dist > 0.0:
                    threat_pos = self._clamp(threat_pos + step * d / dist)
                if math.hypot(*(pos - threat_pos)) <= sc.threat.capture_radius:
                    status = "gone"
                    caught = tick
        new = WorldState(
            tick=tick,
            agent_position=pos,
            heading=heading,
            speed=state.speed,
            peers=peers,
            threat_position=threat_pos,
            threat_status=status,
            escaped_tick=escaped,
            caught_tick=caught,
        )
        return self._maybe_spawn(new)

    def _move_peers(self, peers: np.ndarray) -> np.ndarray:
        sc = self.scenario
        if len(peers) == 0 or sc.peer_motion == "static":
            return peers
        if sc.peer_motion == "scripted":
            moved = peers + np.array(sc.peer_velocities)
        else:
            moved = peers + self.rng.normal(0.0, sc.peer_step_sigma, size=peers.shape)
        x0, y0, x1, y1 = sc.arena
        lo, hi = np.array([x0, y0]), np.array([x1, y1])
        # reflect off the arena walls, then clamp as a guard against large steps
        moved = np.where(moved < lo, 2 * lo - moved, moved)
        moved = np.where(moved > hi, 2 * hi - moved, moved)
        return np.clip(moved, lo, hi)


def observation_dim(n_slots: int) -> int:
    return 1 + 3 * n_slots + 3 + 4


