"""One tick of the hierarchical, dual-source control loop.

A tick runs categorize -> appraise -> retrieve -> fuse -> choose policy mix ->
score actions -> act -> reappraise -> store. Memory is touched exactly twice:
one read in phase A3 and one write in phase A8.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .affect import (
    AffectMap,
    AffectState,
    HintMaps,
    Needs,
    Temperature,
    TraitParams,
    affect_from_needs,
    affect_hints,
    fuse_affect,
    fuse_hints,
    need_hints,
    policy_distribution,
    softmax,
)
from .memory import Episode, EpisodicMemory, Phase, RetrievalResult, SICViolation
from .world import (
    N_HEADINGS,
    CrowdWorld,
    InstantiationParams,
    Observation,
    Perception,
    WorldState,
    heading_angle,
)

TRACE_SCHEMA = "affectloop.trace/1"


class Policy(IntEnum):
    SEEK = 0
    AVOID = 1
    EXPLORE = 2
    FLEE = 3
    REST = 4


N_ACTIONS = N_HEADINGS + 1
ACTION_NAMES = tuple(f"H{k}" for k in range(N_HEADINGS)) + ("PAUSE",)


@dataclass(frozen=True)
class TemplateParams:
    explore_move: float = 0.6
    explore_pause: float = 0.2
    rest_pause: float = 1.0
    rest_move: float = 0.1
    directional_pause: float = 0.0
    invalid: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"template constant {name} outside [0, 1]")


@dataclass(frozen=True)
class ControllerParams:
    affect: AffectMap
    hints: HintMaps
    traits: TraitParams
    tau_policy: Temperature = Temperature(2.0, 0.25)
    tau_action: Temperature = Temperature(0.5, 0.05)
    memory_weight: float = 0.5
    mood_weight: float = 0.15
    mood_decay: Optional[float] = 0.95  # None disables mood
    templates: TemplateParams = TemplateParams()
    success_gain: float = 4.0
    success_mode: str = "drive_reduction"  # or "hedonic"
    action_mode: str = "sample"  # or "argmax"

    def __post_init__(self):
        if self.hints.need_map.shape[1] != self.affect.n_needs:
            raise ValueError("need hint map columns must equal the number of needs")
        if self.hints.affect_map.shape[1] != self.affect.affect_dim:
            raise ValueError("affect hint map columns must equal the affect dimension")
        if self.hints.n_policies != len(Policy):
            raise ValueError(f"hint maps need {len(Policy)} policy rows")
        if self.traits.gains.shape[0] != self.affect.n_needs:
            raise ValueError("one trait gain per need channel is required")
        if not 0.0 <= self.memory_weight <= 1.0 or not 0.0 <= self.mood_weight <= 1.0:
            raise ValueError("memory_weight and mood_weight must lie in [0, 1]")
        if self.mood_decay is not None and not 0.9 <= self.mood_decay <= 0.99:
            raise ValueError("mood decay must lie in [0.9, 0.99]")
        if self.success_mode not in ("drive_reduction", "hedonic"):
            raise ValueError(f"unknown success mode {self.success_mode!r}")
        if self.action_mode not in ("sample", "argmax"):
            raise ValueError(f"unknown action mode {self.action_mode!r}")

    def ablate_memory(self) -> "ControllerParams":
        alphas = self.hints.alphas.copy()
        alphas[1] = 0.0
        return replace(self, memory_weight=0.0, hints=replace(self.hints, alphas=alphas))

    def groups(self) -> dict:
        """Parameter groups as plain data, keyed by group name."""
        return {
            "affect_map": {
                "drive_gains": self.affect.drive_gains.tolist(),
                "valence_map": self.affect.valence_map.tolist(),
                "magnitude_map": self.affect.magnitude_map.tolist(),
            },
            "hint_maps": {
                "need_map": self.hints.need_map.tolist(),
                "affect_map": self.hints.affect_map.tolist(),
                "alphas": self.hints.alphas.tolist(),
            },
            "traits": {"gains": self.traits.gains.tolist()},
            "temperatures": {
                "policy": [self.tau_policy.t_max, self.tau_policy.t_min],
                "action": [self.tau_action.t_max, self.tau_action.t_min],
            },
            "fusion": {"memory_weight": self.memory_weight, "mood_weight": self.mood_weight},
            "mood": {"decay": self.mood_decay},
            "templates": dict(self.templates.__dict__),
            "reappraisal": {"gain": self.success_gain, "mode": self.success_mode},
        }


def hash_groups(groups: dict) -> dict:
    return {
        name: hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        for name, body in sorted(groups.items())
    }


# ---------------------------------------------------------------- mood


@dataclass(frozen=True)
class MoodBuffer:
    value: AffectState
    decay: float

    def __post_init__(self):
        if not 0.9 <= self.decay <= 0.99:
            raise ValueError("mood decay must lie in [0.9, 0.99]")

    @classmethod
    def empty(cls, n_channels: int, n_needs: int, decay: float) -> "MoodBuffer":
        return cls(AffectState.zeros(n_channels, n_needs), decay)


def update_mood(buffer: MoodBuffer, z: AffectState) -> MoodBuffer:
    g = buffer.decay
    flat = g * buffer.value.flat() + (1.0 - g) * z.flat()
    value = AffectState.from_flat(flat, z.n_channels, z.n_needs, clip=True)
    return MoodBuffer(value, g)


# ---------------------------------------------------------------- A5-A7


def _alignment(bearing: float) -> np.ndarray:
    return np.array([(1.0 + math.cos(heading_angle(k) - bearing)) / 2.0 for k in range(N_HEADINGS)])


def policy_templates(y: InstantiationParams, tp: TemplateParams = TemplateParams()) -> np.ndarray:
    """Per-policy action scores, shape (policies, actions), all in [0, 1]."""
    out = np.empty((len(Policy), N_ACTIONS))

    def directional(valid: bool, bearing: float) -> np.ndarray:
        if not valid:
            return np.full(N_ACTIONS, tp.invalid)
        return np.append(_alignment(bearing), tp.directional_pause)

    out[Policy.SEEK] = directional(y.peer_valid, y.peer_bearing)
    out[Policy.AVOID] = directional(y.peer_valid, y.peer_bearing + math.pi)
    out[Policy.FLEE] = directional(y.safe_valid, y.safe_bearing)
    out[Policy.EXPLORE] = np.append(np.full(N_HEADINGS, tp.explore_move), tp.explore_pause)
    out[Policy.REST] = np.append(np.full(N_HEADINGS, tp.rest_move), tp.rest_pause)
    return out


def score_actions(q, y: InstantiationParams, tp: TemplateParams = TemplateParams()) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (len(Policy),) or np.any(q < 0) or abs(math.fsum(q.tolist()) - 1.0) > 1e-9:
        raise ValueError("policy distribution must be a normalized vector over policies")
    return q @ policy_templates(y, tp)


def select_action(
    s, arousal: float, mode: str, rng: Optional[np.random.Generator], temperature: Temperature
) -> Tuple[int, Optional[float]]:
    """Return the chosen action index and the uniform draw used (None for argmax)."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("action scores must be finite")
    if mode == "argmax":
        return int(np.argmax(s)), None
    draw = float(rng.random())
    return sample_index(softmax(s, temperature(arousal)), draw), draw


def sample_index(p: np.ndarray, draw: float) -> int:
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, draw, side="right"))
    return min(idx, len(p) - 1)


def reappraise(
    z_pre: AffectState,
    n_pre: Needs,
    n_post: Needs,
    z_need_post: AffectState,
    *,
    gain: float = 4.0,
    mode: str = "drive_reduction",
) -> Tuple[AffectState, float]:
    if len(n_pre) != len(n_post):
        raise ValueError("pre- and post-action needs differ in length")
    z_post = z_need_post
    if mode == "hedonic":
        raw = float(np.mean(z_post.valence) - np.mean(z_pre.valence)) if z_pre.n_channels else 0.0
    else:
        raw = math.fsum(
            (np.abs(n_pre.targets - n_pre.values) - np.abs(n_post.targets - n_post.values)).tolist()
        )
    return z_post, min(1.0, max(-1.0, gain * raw)) + 0.0


# ---------------------------------------------------------------- trace


@dataclass(frozen=True, eq=False)
class TickTrace:
    tick: int
    x: np.ndarray
    c: np.ndarray
    y: InstantiationParams
    needs: Needs
    z_need: AffectState
    h_need: np.ndarray
    retrieval: RetrievalResult
    z: AffectState
    h: np.ndarray
    q: np.ndarray
    s: np.ndarray
    action: int
    draw: Optional[float]
    x_post: np.ndarray
    c_post: np.ndarray
    y_post: InstantiationParams
    needs_post: Needs
    z_post: AffectState
    succ: float
    stored_index: int

    @property
    def policy(self) -> int:
        return int(np.argmax(self.q))

    def to_dict(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "tick": self.tick,
            "x": self.x.tolist(),
            "c": self.c.tolist(),
            "y": self.y.to_dict(),
            "needs": self.needs.values.tolist(),
            "z_need": self.z_need.to_dict(),
            "h_need": self.h_need.tolist(),
            "retrieval": self.retrieval.to_dict(),
            "z": self.z.to_dict(),
            "h": self.h.tolist(),
            "q": self.q.tolist(),
            "s": self.s.tolist(),
            "action": self.action,
            "draw": self.draw,
            "x_post": self.x_post.tolist(),
            "c_post": self.c_post.tolist(),
            "y_post": self.y_post.to_dict(),
            "needs_post": self.needs_post.values.tolist(),
            "z_post": self.z_post.to_dict(),
            "succ": self.succ,
            "stored_index": self.stored_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------- controller


class EmotionController:
    """Frozen affect-driven controller bound to a single memory store.

    The controller takes the store's only reader and writer tokens at
    construction, so no other component can read the episodes it writes.
    """

    def __init__(
        self,
        params: ControllerParams,
        perception: Perception,
        memory: EpisodicMemory,
        *,
        seed: int | np.random.SeedSequence = 0,
        agent_id: int = 0,
    ):
        self.params = params
        self.perception = perception
        self.memory = memory
        self.guard = memory.guard
        self.agent_id = agent_id
        self._reader = memory.reader_token()
        self._writer = memory.writer_token()
        memory.set_shape(params.affect.n_channels, params.affect.n_needs, len(Policy))
        self.mood = None
        if params.mood_decay is not None:
            self.mood = MoodBuffer.empty(params.affect.n_channels, params.affect.n_needs, params.mood_decay)
        self.rng = np.random.default_rng(seed)
        self.tick_count = 0
        self.pre_tick_hooks: List[Callable[["EmotionController"], None]] = []
        self.last_trace: Optional[TickTrace] = None

    def frozen_hashes(self) -> dict:
        return hash_groups(self.params.groups())

    def snapshot_memory(self) -> List[Episode]:
        return self.memory.snapshot(self._reader)

    def tick(self, world: CrowdWorld, state: WorldState) -> Tuple[TickTrace, WorldState]:
        p = self.params
        guard = self.guard
        with guard.tick():
            for hook in self.pre_tick_hooks:
                hook(self)
            with guard.enter(Phase.A1):
                x = world.observe(state)
                c, y = self.perception.categorize(x)
            with guard.enter(Phase.A2):
                n = self.perception.assess_needs(c, y, x)
                z_need = affect_from_needs(n, p.affect)
                h_need = need_hints(z_need, p.hints, p.traits)
            with guard.enter(Phase.A3):
                ret = self.memory.retrieve(self._reader, c)
            with guard.enter(Phase.A4):
                z = fuse_affect(
                    z_need,
                    ret.z_mem,
                    ret.reliability,
                    memory_weight=p.memory_weight,
                    mood=None if self.mood is None else self.mood.value,
                    mood_weight=p.mood_weight,
                )
                if self.mood is not None:
                    self.mood = update_mood(self.mood, z)
                h = fuse_hints(h_need, ret.h_mem, affect_hints(z, p.hints), p.hints)
                q = policy_distribution(h, z.arousal, p.tau_policy)
            with guard.enter(Phase.A5):
                s = score_actions(q, y, p.templates)
            with guard.enter(Phase.A6):
                u, draw = select_action(s, z.arousal, p.action_mode, self.rng, p.tau_action)
                state_post = world.execute(state, u)
                x_post = world.observe(state_post)
                c_post, y_post = self.perception.categorize(x_post)
            with guard.enter(Phase.A7):
                n_post = self.perception.assess_needs(c_post, y_post, x_post)
                z_need_post = affect_from_needs(n_post, p.affect)
                z_post, succ = reappraise(
                    z, n, n_post, z_need_post, gain=p.success_gain, mode=p.success_mode
                )
            with guard.enter(Phase.A8):
                index = self.memory.store(self._writer, Episode(c, z, h, z_post, succ))
            if guard.reads != 1 or guard.writes != 1:
                raise SICViolation(
                    "SIC-5", f"tick made {guard.reads} reads and {guard.writes} writes"
                )
        trace = TickTrace(
            tick=self.tick_count,
            x=x.to_vector(),
            c=c,
            y=y,
            needs=n,
            z_need=z_need,
            h_need=h_need,
            retrieval=ret,
            z=z,
            h=h,
            q=q,
            s=s,
            action=u,
            draw=draw,
            x_post=x_post.to_vector(),
            c_post=c_post,
            y_post=y_post,
            needs_post=n_post,
            z_post=z_post,
            succ=succ,
            stored_index=index,
        )
        self.tick_count += 1
        self.last_trace = trace
        return trace, state_post


# ---------------------------------------------------------------- replay


@dataclass(frozen=True)
class ReplayResult:
    ok: bool
    ticks: int
    failed_tick: Optional[int] = None
    failed_field: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def _dump(value) -> str:
    return json.dumps(value, sort_keys=True)


def replay(records: Sequence[dict], params: ControllerParams, perception: Perception) -> ReplayResult:
    """Re-run the controller math on logged inputs and compare every logged output bit-exactly.

    Memory and world dynamics are taken from the log (retrieval result,
    post-action observation); everything the controller computes is
    recomputed. Mood is rebuilt from the logged fused affect.
    """
    n_slots = perception.config.n_slots
    b, l = params.affect.n_channels, params.affect.n_needs
    mood = None if params.mood_decay is None else MoodBuffer.empty(b, l, params.mood_decay)

    def fail(tick, name):
        return ReplayResult(False, tick, tick, name)

    for i, rec in enumerate(records):
        tick = rec.get("tick")
        if rec.get("schema") != TRACE_SCHEMA:
            return fail(tick, "schema")
        if tick != i:
            return fail(tick, "tick")
        x = Observation.from_vector(rec["x"], n_slots)
        c, y = perception.categorize(x)
        checks = [("c", c.tolist()), ("y", y.to_dict())]
        n = perception.assess_needs(c, y, x)
        z_need = affect_from_needs(n, params.affect)
        h_need = need_hints(z_need, params.hints, params.traits)
        checks += [("needs", n.values.tolist()), ("z_need", z_need.to_dict()), ("h_need", h_need.tolist())]
        for name, value in checks:
            if _dump(value) != _dump(rec[name]):
                return fail(tick, name)
        r = rec["retrieval"]
        z_mem = AffectState.from_dict(r["z_mem"])
        z = fuse_affect(
            z_need,
            z_mem,
            r["reliability"],
            memory_weight=params.memory_weight,
            mood=None if mood is None else mood.value,
            mood_weight=params.mood_weight,
        )
        if mood is not None:
            mood = update_mood(mood, z)
        h = fuse_hints(h_need, np.asarray(r["h_mem"], dtype=float), affect_hints(z, params.hints), params.hints)
        q = policy_distribution(h, z.arousal, params.tau_policy)
        s = score_actions(q, y, params.templates)
        if params.action_mode == "argmax":
            u = int(np.argmax(s))
        else:
            draw = rec["draw"]
            if draw is None:
                return fail(tick, "draw")
            u = sample_index(softmax(s, params.tau_action(z.arousal)), draw)
        x_post = Observation.from_vector(rec["x_post"], n_slots)
        c_post, y_post = perception.categorize(x_post)
        n_post = perception.assess_needs(c_post, y_post, x_post)
        z_post, succ = reappraise(
            z,
            n,
            n_post,
            affect_from_needs(n_post, params.affect),
            gain=params.success_gain,
            mode=params.success_mode,
        )
        checks = [
            ("z", z.to_dict()),
            ("h", h.tolist()),
            ("q", q.tolist()),
            ("s", s.tolist()),
            ("action", u),
            ("c_post", c_post.tolist()),
            ("y_post", y_post.to_dict()),
            ("needs_post", n_post.values.tolist()),
            ("z_post", z_post.to_dict()),
            ("succ", succ),
        ]
        for name, value in checks:
            if _dump(value) != _dump(rec[name]):
                return fail(tick, name)
    return ReplayResult(True, len(records))
