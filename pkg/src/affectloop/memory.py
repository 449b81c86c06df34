"""Episodic memory: storage at A8, bounded top-K retrieval at A3, offline reconciliation.

Access is capability-based. A store hands out exactly one reader token and one
writer token; reads are legal only while the shared :class:`PhaseGuard` is in
phase A3 and writes only in phase A8.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

import numpy as np

from .affect import AffectState, DimensionError, frozen_array


class SICViolation(RuntimeError):
    """Fatal breach of the memory interface contract.

    ``clause`` names the violated clause (``"SIC-1"`` ... ``"SIC-5"``).
    """

    def __init__(self, clause: str, message: str):
        super().__init__(f"{clause} violation: {message}")
        self.clause = clause


class Phase(str, Enum):
    IDLE = "idle"
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"
    A4 = "A4"
    A5 = "A5"
    A6 = "A6"
    A7 = "A7"
    A8 = "A8"


class PhaseGuard:
    """Tracks the controller's current phase and counts memory accesses per tick."""

    def __init__(self):
        self.phase = Phase.IDLE
        self.in_tick = False
        self.reads = 0
        self.writes = 0

    @contextmanager
    def tick(self) -> Iterator["PhaseGuard"]:
        if self.in_tick:
            raise SICViolation("SIC-5", "nested controller tick")
        self.in_tick = True
        self.reads = self.writes = 0
        try:
            yield self
        finally:
            self.in_tick = False
            self.phase = Phase.IDLE

    @contextmanager
    def enter(self, phase: Phase) -> Iterator[None]:
        prev = self.phase
        self.phase = phase
        try:
            yield
        finally:
            self.phase = prev


def check_category(c) -> np.ndarray:
    c = frozen_array(c, ndim=1)
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("category vector must be finite and nonnegative")
    norm = math.sqrt(math.fsum(float(x) * float(x) for x in c))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"category vector must have unit norm, got {norm!r}")
    return c


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    # fsum makes the value independent of where the record sits in storage
    return math.fsum(float(x) * float(y) for x, y in zip(a, b))


@dataclass(frozen=True, eq=False)
class Episode:
    key: np.ndarray
    z_pre: AffectState
    hints: np.ndarray
    z_post: AffectState
    succ: float

    def __post_init__(self):
        object.__setattr__(self, "key", check_category(self.key))
        object.__setattr__(self, "hints", frozen_array(self.hints, ndim=1))
        succ = float(self.succ)
        if not (-1.0 <= succ <= 1.0):
            raise ValueError(f"succ outside [-1, 1]: {succ}")
        object.__setattr__(self, "succ", succ)
        if self.z_pre.dim != self.z_post.dim:
            raise DimensionError("pre- and post-action affect differ in shape")

    @property
    def policy(self) -> int:
        return int(np.argmax(self.hints))

    def to_dict(self) -> dict:
        return {
            "key": self.key.tolist(),
            "z_pre": self.z_pre.to_dict(),
            "hints": self.hints.tolist(),
            "z_post": self.z_post.to_dict(),
            "succ": self.succ,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Episode":
        return cls(
            data["key"],
            AffectState.from_dict(data["z_pre"]),
            data["hints"],
            AffectState.from_dict(data["z_post"]),
            data["succ"],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def save_episodes(path, episodes: Iterable[Episode]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict()) + "\n")


def load_episodes(path) -> List[Episode]:
    lines = Path(path).read_text().splitlines()
    return [Episode.from_dict(json.loads(line)) for line in lines if line.strip()]


@dataclass
class StoredRecord:
    episode: Episode
    index: int
    retrievals: int = 0


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    z_mem: AffectState
    h_mem: np.ndarray
    reliability: float

    def to_dict(self) -> dict:
        return {
            "z_mem": self.z_mem.to_dict(),
            "h_mem": np.asarray(self.h_mem).tolist(),
            "reliability": self.reliability,
        }


@dataclass(frozen=True)
class MemoryConfig:
    k: int = 5
    capacity: int = 500
    combine_weight: float = 0.5  # weight of pre-action affect in the episode tag
    flash_threshold: float = 0.8

    def __post_init__(self):
        if self.k < 1 or self.capacity < 1:
            raise ValueError("k and capacity must be positive")
        if not 0.0 <= self.combine_weight <= 1.0:
            raise ValueError("combine_weight must lie in [0, 1]")


@dataclass(frozen=True)
class ReconcileConfig:
    dup_threshold: float = 0.98
    flash_threshold: float = 0.8
    max_age: int = 200
    min_retrievals: int = 1
    horizon: int = 5
    rare_threshold: float = 0.9
    bonus: float = 0.1
    reestimate_weight: float = 0.7


@dataclass(frozen=True)
class ReconcileReport:
    merged: int = 0
    pruned: int = 0
    edited: int = 0
    size_before: int = 0
    size_after: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _Token:
    __slots__ = ("_store_id",)

    def __init__(self, store_id: int):
        self._store_id = store_id


class ReaderToken(_Token):
    """Capability to read one memory store. Only one exists per store."""


class WriterToken(_Token):
    """Capability to write one memory store. Only one exists per store."""


def is_flash(ep: Episode, threshold: float) -> bool:
    peak = max(
        float(np.max(ep.z_pre.magnitude, initial=0.0)),
        float(np.max(ep.z_post.magnitude, initial=0.0)),
    )
    return abs(ep.succ) >= threshold or peak >= threshold


class EpisodicMemory:
    def __init__(
        self,
        config: MemoryConfig = MemoryConfig(),
        guard: Optional[PhaseGuard] = None,
        *,
        audit_mode: bool = False,
    ):
        self.config = config
        self.guard = guard if guard is not None else PhaseGuard()
        self.audit_mode = audit_mode
        self._records: List[StoredRecord] = []
        self._next_index = 0
        self._reader: Optional[ReaderToken] = None
        self._writer: Optional[WriterToken] = None

    def __len__(self) -> int:
        return len(self._records)

    def reader_token(self) -> ReaderToken:
        if self._reader is not None:
            raise SICViolation("SIC-1", "a second memory reader was requested")
        self._reader = ReaderToken(id(self))
        return self._reader

    def writer_token(self) -> WriterToken:
        if self._writer is not None:
            raise SICViolation("SIC-5", "a second memory writer was requested")
        self._writer = WriterToken(id(self))
        return self._writer

    def _check_token(self, token, kind) -> None:
        expected = self._reader if kind is ReaderToken else self._writer
        if not isinstance(token, kind) or token is not expected:
            clause = "SIC-1" if kind is ReaderToken else "SIC-5"
            raise SICViolation(clause, f"invalid or forged {kind.__name__}")

    def store(self, token: WriterToken, episode: Episode) -> int:
        self._check_token(token, WriterToken)
        if self.guard.phase is not Phase.A8:
            raise SICViolation("SIC-5", f"write attempted in phase {self.guard.phase.value}")
        if not isinstance(episode, Episode):
            raise TypeError("only Episode records can be stored")
        if len(self._records) >= self.config.capacity:
            self._evict()
        index = self._next_index
        self._next_index += 1
        self._records.append(StoredRecord(episode, index))
        self.guard.writes += 1
        return index

    def _evict(self) -> None:
        flash = self.config.flash_threshold
        # lowest utility first: not flash-bulb, fewest retrievals, oldest
        victim = min(
            self._records,
            key=lambda r: (is_flash(r.episode, flash), r.retrievals, r.index),
        )
        self._records.remove(victim)

    def _similarities(self, key: np.ndarray) -> np.ndarray:
        out = np.empty(len(self._records))
        for i, rec in enumerate(self._records):
            if rec.episode.key.shape != key.shape:
                raise DimensionError("query key and stored key differ in length")
            out[i] = similarity(key, rec.episode.key)
        return out

    def retrieve(self, token: ReaderToken, key, k: Optional[int] = None) -> RetrievalResult:
        self._check_token(token, ReaderToken)
        if self.guard.phase is not Phase.A3:
            raise SICViolation("SIC-5", f"read attempted in phase {self.guard.phase.value}")
        k = self.config.k if k is None else int(k)
        if k < 1:
            raise ValueError("k must be at least 1")
        key = check_category(key)
        self.guard.reads += 1
        return self._aggregate(key, k)

    def _aggregate(self, key: np.ndarray, k: int) -> RetrievalResult:
        if not self._records:
            return self._zero_result()
        sims = self._similarities(key)
        indices = np.array([r.index for r in self._records])
        order = np.lexsort((indices, -sims))[:k]
        top = [self._records[i] for i in order]
        s = [float(sims[i]) for i in order]
        total = math.fsum(s)
        if total <= 0.0:
            return self._zero_result()
        lam = self.config.combine_weight
        first = top[0].episode
        z_acc = np.zeros(first.z_pre.dim)
        h_acc = np.zeros(first.hints.shape[0])
        for rec, sj in zip(top, s):
            w = sj / total
            ep = rec.episode
            z_acc = z_acc + w * (lam * ep.z_pre.flat() + (1.0 - lam) * ep.z_post.flat())
            h_acc = h_acc + (w * ep.succ) * ep.hints
            rec.retrievals += 1
        z_mem = AffectState.from_flat(z_acc, first.z_pre.n_channels, first.z_pre.n_needs, clip=True)
        return RetrievalResult(z_mem, h_acc + 0.0, max(0.0, min(1.0, s[0])))

    def _zero_result(self) -> RetrievalResult:
        shape = self._shape
        if shape is None:
            raise RuntimeError("memory shape unknown; call set_shape or store an episode first")
        b, l, p = shape
        return RetrievalResult(AffectState.zeros(b, l), np.zeros(p), 0.0)

    @property
    def _shape(self):
        if self._records:
            ep = self._records[0].episode
            return ep.z_pre.n_channels, ep.z_pre.n_needs, ep.hints.shape[0]
        return getattr(self, "_declared_shape", None)

    def set_shape(self, n_channels: int, n_needs: int, n_policies: int) -> None:
        """Declare output shapes so an empty store can answer with zeros."""
        self._declared_shape = (n_channels, n_needs, n_policies)

    def snapshot(self, token: ReaderToken) -> List[Episode]:
        """Controller-visible copy of all episodes in write order (audit mode only)."""
        if not self.audit_mode:
            raise PermissionError("snapshot requires audit mode")
        self._check_token(token, ReaderToken)
        return [r.episode for r in sorted(self._records, key=lambda r: r.index)]

    def reconcile(self, config: ReconcileConfig = ReconcileConfig()) -> ReconcileReport:
        """Offline maintenance: dedup, prune, then re-estimate success tags.

        Only per-record ``succ`` scalars are rewritten; keys, affect tags and
        hints are never touched and no records are created.
        """
        if self.guard.in_tick:
            raise SICViolation("SIC-5", "reconcile refused while a controller tick is in progress")
        before = len(self._records)
        records = sorted(self._records, key=lambda r: r.index)

        kept: List[StoredRecord] = []
        flash = config.flash_threshold
        # flash-bulb records win, then larger |succ|, then older
        priority = sorted(records, key=lambda r: (not is_flash(r.episode, flash), -abs(r.episode.succ), r.index))
        for rec in priority:
            ep = rec.episode
            dup = any(
                k.episode.policy == ep.policy
                and similarity(k.episode.key, ep.key) > config.dup_threshold
                for k in kept
            )
            if not dup:
                kept.append(rec)
        merged = len(records) - len(kept)
        survivors = sorted(kept, key=lambda r: r.index)

        n = len(survivors)
        pruned_list = []
        for pos, rec in enumerate(survivors):
            age = n - 1 - pos
            stale = age >= config.max_age and rec.retrievals < config.min_retrievals
            if stale and not is_flash(rec.episode, config.flash_threshold):
                continue
            pruned_list.append(rec)
        pruned = len(survivors) - len(pruned_list)
        survivors = pruned_list

        base = [r.episode.succ for r in survivors]
        lam = config.reestimate_weight
        new = []
        for i, s in enumerate(base):
            ahead = base[i + 1 : i + 1 + config.horizon]
            if ahead:
                new.append(lam * s + (1.0 - lam) * (math.fsum(ahead) / len(ahead)))
            else:
                new.append(s)
        for i, s in enumerate(base):
            if i > 0 and s >= config.rare_threshold:
                new[i - 1] += config.bonus
        edited = 0
        for rec, old, s in zip(survivors, base, new):
            s = min(1.0, max(-1.0, s))
            if s != old:
                rec.episode = replace(rec.episode, succ=s)
                edited += 1
        self._records = survivors
        return ReconcileReport(merged, pruned, edited, before, len(survivors))
