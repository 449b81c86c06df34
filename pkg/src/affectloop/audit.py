"""Separation audits over a manifest, run traces, memory fixtures and parameter hashes.

Checks combine static analysis of the declared dataflow with replay of logged
traces. Negative controls (injectors) perturb one pathway of a built system so
the checks can be shown to fire.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .affect import AffectState
from .controller import ControllerParams, EmotionController, MoodBuffer, Policy, update_mood
from .memory import (
    Episode,
    EpisodicMemory,
    MemoryConfig,
    Phase,
    PhaseGuard,
    RetrievalResult,
    similarity,
)
from .world import Observation, Perception

REPORT_SCHEMA = "affectloop.audit/1"
CHECKS = ("R1", "R2", "R3a", "R3b", "R3c", "R4")

SCOPE = {
    "covered": {
        "R1": "consumer fan-out per signal; memory reader count; runtime single-reader events",
        "R2": "input provenance from telemetry; self-ascription tags; trace-to-input hash sweep",
        "R3a": "retrieval keys recomputed from logged observations; key provenance",
        "R3b": "shuffle and trim invariance of retrieval; retrieval write-back probe",
        "R3c": "mood impulse response against its geometric bound",
        "R4": "parameter-group hashes before and after the run; optimizer declarations",
    },
    "out_of_scope": [
        "implicit probes (activation classifiers, mutual-information estimates): "
        "the build has no learned representations",
        "inter-module bandwidth caps: bandwidth is logged, no threshold is defined",
    ],
}

# names that must never feed a retrieval key
FORBIDDEN_KEY_INPUTS = frozenset(
    {"tick", "time", "timestamp", "clock", "agent_id", "identity", "id",
     "z", "z_need", "z_post", "mood", "affect", "h", "q", "trace"}
)


class ManifestError(ValueError):
    pass


class MissingTraces(FileNotFoundError):
    pass


@dataclass
class CheckResult:
    check: str
    passed: bool
    evidence: List[str] = field(default_factory=list)
    measured: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "status": self.status,
            "evidence": list(self.evidence),
            "measured": self.measured,
        }


@dataclass
class AuditReport:
    checks: Dict[str, CheckResult]
    injectors: Tuple[str, ...] = ()

    def __post_init__(self):
        missing = [c for c in CHECKS if c not in self.checks]
        if missing:
            raise ValueError(f"audit report is missing checks {missing}")

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.checks.values())

    @property
    def failed(self) -> List[str]:
        return [c for c in CHECKS if not self.checks[c].passed]

    def statuses(self) -> Dict[str, str]:
        return {c: self.checks[c].status for c in CHECKS}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "tool_version": __version__,
            "scope": SCOPE,
            "injectors": list(self.injectors),
            "passed": self.passed,
            "checks": [self.checks[c].to_dict() for c in CHECKS],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- manifest


def validate_manifest(manifest: dict) -> Dict[str, dict]:
    """Return modules by name; raise ManifestError on structural problems."""
    try:
        modules = {m["name"]: m for m in manifest["modules"]}
        if len(modules) != len(manifest["modules"]):
            raise ManifestError("duplicate module names")
        seen = set()
        for sig in manifest["signals"]:
            name = sig["name"]
            if name in seen:
                raise ManifestError(f"signal {name!r} has more than one producer")
            seen.add(name)
            if sig["producer"] not in modules:
                raise ManifestError(f"signal {name!r} has undeclared producer {sig['producer']!r}")
            for c in sig["consumers"]:
                if c not in modules:
                    raise ManifestError(f"signal {name!r} has undeclared consumer {c!r}")
            if sig["schema"] not in ("typed-narrow", "content-general"):
                raise ManifestError(f"signal {name!r} has unknown schema tag {sig['schema']!r}")
        mem = manifest["memory"]
        for role in ("readers", "writers"):
            for m in mem[role]:
                if m not in modules:
                    raise ManifestError(f"memory {role[:-1]} {m!r} is not a declared module")
        for group in manifest["parameter_groups"]:
            group["name"], group["frozen"]
        manifest["optimizers"]
        manifest["key_provenance"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: missing {exc}") from None
    return modules


def _bandwidth(manifest: dict) -> Dict[str, int]:
    out: Dict[str, int] = defaultdict(int)
    for sig in manifest["signals"]:
        for c in sig["consumers"]:
            out[f"{sig['producer']}->{c}"] += int(sig.get("dim", 0))
    return dict(sorted(out.items()))


# ---------------------------------------------------------------- R1


def audit_r1(manifest: dict, violations: Sequence[str] = ()) -> CheckResult:
    """No content-general broadcast and a single memory-external reader."""
    validate_manifest(manifest)
    res = CheckResult("R1", True)
    fan_out = {s["name"]: len(set(s["consumers"])) for s in manifest["signals"]}
    for sig in manifest["signals"]:
        n = fan_out[sig["name"]]
        if sig["schema"] == "content-general" and n >= 2:
            res.passed = False
            res.evidence.append(f"content-general signal {sig['name']!r} has {n} consumers")
    readers = sorted(set(manifest["memory"]["readers"]))
    if len(readers) > 1:
        res.passed = False
        res.evidence.append(f"memory declares {len(readers)} readers: {', '.join(readers)}")
    sic1 = [v for v in violations if v == "SIC-1"]
    if sic1:
        res.passed = False
        res.evidence.append(f"run aborted with {len(sic1)} SIC-1 event(s): second reader requested")
    if res.passed:
        res.evidence.append("no content-general fan-out; one memory reader")
    res.measured = {
        "max_fan_out": max(fan_out.values(), default=0),
        "memory_readers": readers,
        "bandwidth": _bandwidth(manifest),
    }
    return res


# ---------------------------------------------------------------- R2

_OUTPUT_FIELDS = ("z_need", "h_need", "z", "h", "q", "s", "z_post")


def _affect_vec(d: dict) -> List[float]:
    return list(d["v"]) + list(d["m"]) + [d["a"]] + list(d["d"])


def _output_vectors(rec: dict) -> List[Tuple[str, List[float]]]:
    out = []
    for name in _OUTPUT_FIELDS:
        val = rec[name]
        out.append((name, _affect_vec(val) if isinstance(val, dict) else list(val)))
    r = rec["retrieval"]
    out.append(("z_mem", _affect_vec(r["z_mem"])))
    out.append(("h_mem", list(r["h_mem"])))
    return out


def _nontrivial(vec: Sequence[float]) -> bool:
    # constant-like vectors (zeros, ones, halves) would match sensor padding by chance
    return len(vec) >= 2 and sum(1 for v in vec if abs(v) not in (0.0, 0.5, 1.0)) >= 2


def _window_digest(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def trace_feedback_sweep(records: Sequence[dict]) -> List[str]:
    """Find logged controller outputs that reappear verbatim in a later observation.

    Each output vector is matched byte-for-byte against every contiguous
    window of the same length in later observation vectors.
    """
    lengths = set()
    for rec in records:
        for _, vec in _output_vectors(rec):
            if _nontrivial(vec):
                lengths.add(len(vec))
    # digest -> latest position seen; x(t) sits at 2t, x_post(t) at 2t+1
    latest: Dict[str, int] = {}
    for rec in records:
        t = rec["tick"]
        for pos, obs in ((2 * t, rec["x"]), (2 * t + 1, rec["x_post"])):
            raw = np.asarray(obs, dtype=np.float64).tobytes()
            n = len(obs)
            for length in lengths:
                for start in range(0, n - length + 1):
                    d = _window_digest(raw[8 * start : 8 * (start + length)])
                    if latest.get(d, -1) < pos:
                        latest[d] = pos
    hits = []
    for rec in records:
        t = rec["tick"]
        for name, vec in _output_vectors(rec):
            if not _nontrivial(vec):
                continue
            d = _window_digest(np.asarray(vec, dtype=np.float64).tobytes())
            if latest.get(d, -1) >= 2 * t + 1:
                hits.append(f"tick {t}: output {name!r} reappears in a later observation")
    return hits


def audit_r2(manifest: dict, records: Optional[Sequence[dict]]) -> CheckResult:
    """Telemetry flows one way and no input carries self-ascription."""
    if records is None:
        raise MissingTraces("R2 needs run traces")
    modules = validate_manifest(manifest)
    res = CheckResult("R2", True)
    telemetry = {n for n, m in modules.items() if m.get("kind") == "telemetry"}
    edges = defaultdict(set)
    for sig in manifest["signals"]:
        for c in sig["consumers"]:
            edges[sig["producer"]].add((c, sig["name"]))
    seen, queue = set(telemetry), deque(telemetry)
    while queue:
        m = queue.popleft()
        for c, name in sorted(edges[m]):
            if c not in telemetry:
                res.passed = False
                res.evidence.append(f"telemetry output reaches {c!r} via signal {name!r}")
            if c not in seen:
                seen.add(c)
                queue.append(c)
    for sig in manifest["signals"]:
        if sig.get("self_ascription"):
            res.passed = False
            res.evidence.append(f"signal {sig['name']!r} carries a self-ascription tag")
    hits = trace_feedback_sweep(records)
    if hits:
        res.passed = False
        res.evidence.extend(hits[:10])
        if len(hits) > 10:
            res.evidence.append(f"... {len(hits) - 10} more matches")
    if res.passed:
        res.evidence.append(
            "no path from telemetry to other modules; no trace output re-enters observations"
            if records
            else "no path from telemetry to other modules; no traces logged"
        )
    res.measured = {"ticks_swept": len(records), "feedback_matches": len(hits)}
    return res


# ---------------------------------------------------------------- R3


def audit_r3_key_hygiene(records: Sequence[dict], perception: Perception, manifest: dict) -> CheckResult:
    """Keys must be a function of the current observation content alone."""
    validate_manifest(manifest)
    res = CheckResult("R3a", True)
    signals = {s["name"]: s for s in manifest["signals"]}
    for name in manifest["key_provenance"]:
        sig = signals.get(name)
        if name in FORBIDDEN_KEY_INPUTS:
            res.passed = False
            res.evidence.append(f"key provenance lists time/identity/affect input {name!r}")
        elif sig is None or sig.get("origin") != "exogenous":
            res.passed = False
            res.evidence.append(f"key provenance lists non-exogenous input {name!r}")
    n_slots = perception.config.n_slots
    mismatches = 0
    for rec in records:
        for obs_field, key_field in (("x", "c"), ("x_post", "c_post")):
            c, _ = perception.categorize(Observation.from_vector(rec[obs_field], n_slots))
            logged = np.asarray(rec[key_field], dtype=np.float64)
            if c.shape != logged.shape or c.tobytes() != logged.tobytes():
                mismatches += 1
                if mismatches <= 5:
                    res.evidence.append(
                        f"tick {rec['tick']}: logged {key_field!r} differs from key recomputed from {obs_field!r}"
                    )
    if mismatches:
        res.passed = False
    if res.passed:
        res.evidence.append(f"{2 * len(records)} keys recomputed bit-exactly from observations")
    res.measured = {"keys_checked": 2 * len(records), "mismatches": mismatches}
    return res


def shuffle_fixture(
    n_channels: int, n_needs: int, n_policies: int, *, n_episodes: int = 5, n_queries: int = 3, seed: int = 7
) -> Tuple[List[Episode], List[np.ndarray]]:
    """Deterministic episodes and queries whose similarities are pairwise distinct."""
    rng = np.random.default_rng(seed)
    dim = 6

    def unit():
        v = rng.random(dim) + 0.05
        return v / math.sqrt(math.fsum((v * v).tolist()))

    def affect():
        return AffectState(
            rng.uniform(-1, 1, n_channels),
            rng.uniform(0, 1, n_channels),
            float(rng.uniform(0, 1)),
            rng.uniform(-1, 1, n_needs),
        )

    episodes = [
        Episode(unit(), affect(), rng.uniform(-1, 1, n_policies), affect(), float(rng.uniform(-1, 1)))
        for _ in range(n_episodes)
    ]
    queries = [unit() for _ in range(n_queries)]
    for q in queries:
        sims = [similarity(q, e.key) for e in episodes]
        if len(set(sims)) != len(sims):
            raise ValueError("fixture similarities are not distinct")
    return episodes, queries


def _retrieve_all(memory: EpisodicMemory, episodes: Sequence[Episode], queries, k: int) -> List[RetrievalResult]:
    guard = memory.guard
    reader, writer = memory.reader_token(), memory.writer_token()
    with guard.enter(Phase.A8):
        for ep in episodes:
            memory.store(writer, ep)
    out = []
    with guard.enter(Phase.A3):
        for q in queries:
            out.append(memory.retrieve(reader, q, k))
    return out


def _result_vectors(r: RetrievalResult) -> Dict[str, np.ndarray]:
    return {"z_mem": r.z_mem.flat(), "h_mem": np.asarray(r.h_mem), "reliability": np.array([r.reliability])}


def _max_gap(a: RetrievalResult, b: RetrievalResult) -> float:
    va, vb = _result_vectors(a), _result_vectors(b)
    return max(float(np.max(np.abs(va[f] - vb[f]), initial=0.0)) for f in va)


def audit_r3_shuffle(
    memory_factory: Callable[[MemoryConfig, PhaseGuard], EpisodicMemory],
    episodes: Sequence[Episode],
    queries: Sequence[np.ndarray],
    *,
    config: MemoryConfig = MemoryConfig(),
    k: int = 3,
    n_permutations: int = 20,
    seed: int = 0,
    tol: float = 1e-12,
) -> CheckResult:
    """Retrieval must not depend on insertion order or on non-top-K episodes."""
    res = CheckResult("R3b", True)
    cfg = replace(config, capacity=max(config.capacity, len(episodes)))

    def fresh():
        return memory_factory(cfg, PhaseGuard())

    base = _retrieve_all(fresh(), episodes, queries, k)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in range(n_permutations):
        order = rng.permutation(len(episodes))
        out = _retrieve_all(fresh(), [episodes[i] for i in order], queries, k)
        for qi, (a, b) in enumerate(zip(base, out)):
            gap = _max_gap(a, b)
            worst = max(worst, gap)
            if gap > tol:
                res.passed = False
                if len(res.evidence) < 5:
                    res.evidence.append(f"permutation {p}, query {qi}: outputs differ by {gap:.3e}")
    trim_worst = 0.0
    for qi, q in enumerate(queries):
        sims = sorted((similarity(q, e.key) for e in episodes), reverse=True)
        floor = sims[min(k, len(sims)) - 1]
        kept = [e for e in episodes if similarity(q, e.key) >= floor]
        trimmed = _retrieve_all(fresh(), kept, [q], k)[0]
        gap = _max_gap(base[qi], trimmed)
        trim_worst = max(trim_worst, gap)
        if gap > tol:
            res.passed = False
            res.evidence.append(f"trim, query {qi}: dropping non-top-{k} episodes changes output by {gap:.3e}")
    # retrieval must not write anything back into the stored episodes
    mem = fresh()
    reader, writer = mem.reader_token(), mem.writer_token()
    with mem.guard.enter(Phase.A8):
        for ep in episodes:
            mem.store(writer, ep)
    write_back = False
    try:
        before = [e.to_dict() for e in mem.snapshot(reader)]
        with mem.guard.enter(Phase.A3):
            for q in queries:
                mem.retrieve(reader, q, k)
        write_back = before != [e.to_dict() for e in mem.snapshot(reader)]
    except PermissionError:
        res.passed = False
        res.evidence.append("memory snapshot unavailable; write-back probe could not run")
    if write_back:
        res.passed = False
        res.evidence.append("retrieval modified stored episodes")
    if res.passed:
        res.evidence.append(
            f"{n_permutations} insertion orders and top-{k} trim give identical outputs for "
            f"{len(queries)} queries; retrieval leaves episodes unchanged"
        )
    res.measured = {
        "episodes": len(episodes),
        "queries": len(queries),
        "permutations": n_permutations,
        "max_abs_gap": worst,
        "trim_max_abs_gap": trim_worst,
        "tolerance": tol,
    }
    return res


def mood_impulse_response(decay: Optional[float], n_max: int = 100) -> List[float]:
    """Influence on the mood buffer of a unit arousal impulse, for lags 0..n_max."""
    if decay is None:
        return [0.0] * (n_max + 1)
    zero = AffectState.zeros(1, 1)
    impulse = AffectState.from_flat([0.0, 0.0, 1.0, 0.0], 1, 1)
    buf = update_mood(MoodBuffer(zero, decay), impulse)
    out = [float(buf.value.arousal)]
    for _ in range(n_max):
        buf = update_mood(buf, zero)
        out.append(float(buf.value.arousal))
    return out


def lag_bound(decay: float, eps: float = 1e-3) -> int:
    return math.ceil(math.log(eps) / math.log(decay))


def audit_r3_mood_window(params: ControllerParams, *, eps: float = 1e-3, n_max: int = 100) -> CheckResult:
    """Mood must have a bounded, geometrically decaying receptive field."""
    res = CheckResult("R3c", True)
    g = params.mood_decay
    if g is None:
        resp = mood_impulse_response(None, n_max)
        res.evidence.append("mood disabled: no temporal receptive field")
        res.measured = {"decay": None, "max_influence": max(resp)}
        return res
    n_eps = lag_bound(g, eps)
    resp = mood_impulse_response(g, max(n_max, n_eps))
    excess = 0.0
    for n, v in enumerate(resp):
        over = v - ((1.0 - g) * g**n + 1e-9)
        if over > 0:
            excess = max(excess, over)
            res.passed = False
    if excess:
        res.evidence.append(f"impulse influence exceeds the geometric bound by up to {excess:.3e}")
    crossed = next((n for n, v in enumerate(resp) if v < eps), None)
    if crossed is None or crossed > n_eps:
        res.passed = False
        res.evidence.append(f"influence stays above {eps} past lag {n_eps}")
    if res.passed:
        res.evidence.append(f"decay {g}: influence below {eps} from lag {crossed} (bound {n_eps})")
    res.measured = {"decay": g, "lag0": resp[0], "crossing_lag": crossed, "bound_lag": n_eps, "eps": eps}
    return res


# ---------------------------------------------------------------- R4


def audit_r4(hashes_pre: dict, hashes_post: dict, manifest: dict) -> CheckResult:
    """Frozen deployment: unchanged parameter hashes and no optimizer."""
    validate_manifest(manifest)
    res = CheckResult("R4", True)
    changed = sorted(k for k in set(hashes_pre) | set(hashes_post) if hashes_pre.get(k) != hashes_post.get(k))
    if changed:
        res.passed = False
        res.evidence.append(f"parameter groups changed during the run: {', '.join(changed)}")
    if manifest["optimizers"]:
        res.passed = False
        res.evidence.append(f"manifest declares {len(manifest['optimizers'])} optimizer(s)")
    thawed = sorted(g["name"] for g in manifest["parameter_groups"] if not g["frozen"])
    if thawed:
        res.passed = False
        res.evidence.append(f"parameter groups not frozen: {', '.join(thawed)}")
    res.evidence.append(
        "hardwired build: cross-boundary gradient checks reduce to hash equality of parameter groups"
    )
    res.measured = {"groups": len(hashes_pre), "changed": changed}
    return res


# ---------------------------------------------------------------- injectors


class InjectorId(str, Enum):
    IDENTITY_KEY = "IDENTITY_KEY"
    TIMESTAMP_KEY = "TIMESTAMP_KEY"
    SECOND_READER = "SECOND_READER"
    CROSS_EPISODE_SUMMARY = "CROSS_EPISODE_SUMMARY"
    TELEMETRY_FEEDBACK = "TELEMETRY_FEEDBACK"
    UNFROZEN_PARAM = "UNFROZEN_PARAM"


# checks each injector is designed to trip
DESIGNED_FAILURES = {
    InjectorId.IDENTITY_KEY: ("R3a",),
    InjectorId.TIMESTAMP_KEY: ("R3a",),
    InjectorId.SECOND_READER: ("R1",),
    InjectorId.CROSS_EPISODE_SUMMARY: ("R3b",),
    InjectorId.TELEMETRY_FEEDBACK: ("R2",),
    InjectorId.UNFROZEN_PARAM: ("R4",),
}


class _LeakyKeyPerception(Perception):
    """Categorizer that appends a non-observational component to the key."""

    def __init__(self, base: Perception, extra: Callable[[], float]):
        super().__init__(base.config)
        self._extra = extra

    def categorize(self, x):
        c, y = super().categorize(x)
        raw = np.append(c, self._extra())
        out = raw / math.sqrt(math.fsum((raw * raw).tolist()))
        out.setflags(write=False)
        return out, y


class SummaryMemory(EpisodicMemory):
    """Store whose retrieval blends in a running mean over all stored episodes."""

    blend = 0.2
    rate = 0.2

    def _aggregate(self, key, k):
        res = super()._aggregate(key, k)
        if not self._records:
            return res
        first = self._records[0].episode
        ema = first.z_post.flat()
        for rec in self._records[1:]:
            ema = (1.0 - self.rate) * ema + self.rate * rec.episode.z_post.flat()
        mixed = (1.0 - self.blend) * res.z_mem.flat() + self.blend * ema
        z = AffectState.from_flat(mixed, first.z_post.n_channels, first.z_post.n_needs, clip=True)
        return RetrievalResult(z, res.h_mem, res.reliability)


def _summary_memory(config: MemoryConfig, guard: PhaseGuard) -> EpisodicMemory:
    return SummaryMemory(config, guard, audit_mode=True)


def inject(injector, system):
    """Return a copy of ``system`` with exactly one pathway perturbed."""
    try:
        iid = InjectorId(injector)
    except ValueError:
        raise ValueError(f"unknown injector {injector!r}") from None
    manifest = json.loads(json.dumps(system.manifest))
    hooks = tuple(system.setup_hooks)

    if iid in (InjectorId.IDENTITY_KEY, InjectorId.TIMESTAMP_KEY):
        source = "agent_id" if iid is InjectorId.IDENTITY_KEY else "tick"

        def leak_key(rt):
            ctrl = rt.controller
            if source == "agent_id":
                extra = lambda: 0.1 * (ctrl.agent_id + 1)  # noqa: E731
            else:
                extra = lambda: 0.01 * (ctrl.tick_count + 1)  # noqa: E731
            ctrl.perception = _LeakyKeyPerception(ctrl.perception, extra)

        manifest["key_provenance"] = list(manifest["key_provenance"]) + [source]
        return system.copy(manifest=manifest, setup_hooks=hooks + (leak_key,), injectors=system.injectors + (iid.value,))

    if iid is InjectorId.SECOND_READER:
        manifest["modules"].append({"name": "planner", "kind": "planner"})
        manifest["memory"]["readers"] = list(manifest["memory"]["readers"]) + ["planner"]

        def second_reader(rt):
            rt.memory.reader_token()

        return system.copy(manifest=manifest, setup_hooks=hooks + (second_reader,), injectors=system.injectors + (iid.value,))

    if iid is InjectorId.CROSS_EPISODE_SUMMARY:
        return system.copy(manifest=manifest, memory_factory=_summary_memory, injectors=system.injectors + (iid.value,))

    if iid is InjectorId.TELEMETRY_FEEDBACK:
        dim = system.params.affect.affect_dim

        def feedback(rt):
            world, ctrl = rt.world, rt.controller
            observe = world.observe

            def observe_with_trace(state):
                obs = observe(state)
                last = ctrl.last_trace
                tail = last.z.flat() if last is not None else np.zeros(dim)
                return replace(obs, extra=tuple(tail.tolist()))

            world.observe = observe_with_trace

        # the leak is deliberately left undeclared; only the traces reveal it
        return system.copy(manifest=manifest, setup_hooks=hooks + (feedback,), injectors=system.injectors + (iid.value,))

    # UNFROZEN_PARAM
    mid = system.config.steps // 2
    for g in manifest["parameter_groups"]:
        if g["name"] == "hint_maps":
            g["frozen"] = False

    def thaw(rt):
        done = []

        def mutate(ctrl: EmotionController):
            if done or ctrl.tick_count < mid:
                return
            p = ctrl.params
            need_map = p.hints.need_map.copy()
            need_map[0, 0] += 0.5
            ctrl.params = replace(p, hints=replace(p.hints, need_map=need_map))
            done.append(True)

        rt.controller.pre_tick_hooks.append(mutate)

    return system.copy(manifest=manifest, setup_hooks=hooks + (thaw,), injectors=system.injectors + (iid.value,))


# ---------------------------------------------------------------- driver


def audit_artifacts(
    system,
    records: Optional[Sequence[dict]],
    manifest: dict,
    hashes_pre: dict,
    hashes_post: dict,
    violations: Sequence[str] = (),
) -> AuditReport:
    """Run every check against logged artifacts of one run of ``system``."""
    if records is None:
        raise MissingTraces("audit needs run traces")
    params = system.params
    episodes, queries = shuffle_fixture(params.affect.n_channels, params.affect.n_needs, len(Policy))
    from .config import memory_config

    checks = {
        "R1": audit_r1(manifest, violations),
        "R2": audit_r2(manifest, records),
        "R3a": audit_r3_key_hygiene(records, Perception(system.scenario.perception), manifest),
        "R3b": audit_r3_shuffle(system.memory_factory, episodes, queries, config=memory_config(system.config)),
        "R3c": audit_r3_mood_window(params),
        "R4": audit_r4(hashes_pre, hashes_post, manifest),
    }
    return AuditReport(checks, tuple(system.injectors))


def run_audit(system, *, steps: Optional[int] = None, seed: Optional[int] = None):
    """Run ``system`` and audit the result. Returns (report, run result)."""
    from .system import run_system

    result = run_system(system, steps, seed=seed)
    violations = [result.violation.clause] if result.violation is not None else []
    report = audit_artifacts(
        system, result.records, result.manifest, result.hashes_pre, result.hashes_post, violations
    )
    return report, result


def injector_matrix(system, injectors: Iterable = tuple(InjectorId), **run_kwargs) -> Dict[str, Dict[str, str]]:
    """Check statuses for the unperturbed system and each injector."""
    out = {"none": run_audit(system, **run_kwargs)[0].statuses()}
    for iid in injectors:
        iid = InjectorId(iid)
        out[iid.value] = run_audit(inject(iid, system), **run_kwargs)[0].statuses()
    return out
