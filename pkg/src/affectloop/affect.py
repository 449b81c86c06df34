"""Affect, need and policy-hint vectors plus the fixed maps between them.

Every map in this module is hardwired at construction: arrays are copied and
flagged read-only, so a deployed controller cannot drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when vectors or matrices disagree on a configured dimension."""


def frozen_array(values, *, ndim: Optional[int] = None) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_range(name: str, arr: np.ndarray, lo: float, hi: float) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(arr < lo) or np.any(arr > hi):
        raise ValueError(f"{name} outside [{lo}, {hi}]: {arr.tolist()}")


@dataclass(frozen=True, eq=False)
class Needs:
    """Current need satisfaction levels and their homeostatic set-points."""

    values: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        values = frozen_array(self.values, ndim=1)
        targets = frozen_array(self.targets, ndim=1)
        if values.shape != targets.shape:
            raise DimensionError("needs values and targets differ in length")
        _check_range("need values", values, 0.0, 1.0)
        _check_range("need targets", targets, 0.0, 1.0)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.values.shape[0]

    def discrepancy(self) -> np.ndarray:
        return self.targets - self.values


@dataclass(frozen=True, eq=False)
class AffectState:
    """Concatenated control vector ``[valence, magnitude, arousal, drive]``.

    ``valence`` and ``magnitude`` have one entry per affect channel, ``drive``
    one entry per need channel.
    """

    valence: np.ndarray
    magnitude: np.ndarray
    arousal: float
    drive: np.ndarray

    def __post_init__(self):
        v = frozen_array(self.valence, ndim=1)
        m = frozen_array(self.magnitude, ndim=1)
        d = frozen_array(self.drive, ndim=1)
        a = float(self.arousal)
        if v.shape != m.shape:
            raise DimensionError("valence and magnitude differ in length")
        _check_range("valence", v, -1.0, 1.0)
        _check_range("magnitude", m, 0.0, 1.0)
        _check_range("drive", d, -1.0, 1.0)
        if not (0.0 <= a <= 1.0):
            raise ValueError(f"arousal outside [0, 1]: {a}")
        object.__setattr__(self, "valence", v)
        object.__setattr__(self, "magnitude", m)
        object.__setattr__(self, "arousal", a)
        object.__setattr__(self, "drive", d)

    @property
    def n_channels(self) -> int:
        return self.valence.shape[0]

    @property
    def n_needs(self) -> int:
        return self.drive.shape[0]

    @property
    def dim(self) -> int:
        return 2 * self.n_channels + 1 + self.n_needs

    def flat(self) -> np.ndarray:
        return np.concatenate([self.valence, self.magnitude, [self.arousal], self.drive])

    @classmethod
    def zeros(cls, n_channels: int, n_needs: int) -> "AffectState":
        return cls(np.zeros(n_channels), np.zeros(n_channels), 0.0, np.zeros(n_needs))

    @classmethod
    def from_flat(cls, vec, n_channels: int, n_needs: int, *, clip: bool = False) -> "AffectState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * n_channels + 1 + n_needs,):
            raise DimensionError(
                f"flat affect of shape {vec.shape} does not match B={n_channels}, L={n_needs}"
            )
        b = n_channels
        v, m, a, d = vec[:b], vec[b : 2 * b], vec[2 * b], vec[2 * b + 1 :]
        if clip:
            v = np.clip(v, -1.0, 1.0)
            m = np.clip(m, 0.0, 1.0)
            a = min(max(float(a), 0.0), 1.0)
            d = np.clip(d, -1.0, 1.0)
        return cls(v, m, a, d)

    def to_dict(self) -> dict:
        return {
            "v": self.valence.tolist(),
            "m": self.magnitude.tolist(),
            "a": self.arousal,
            "d": self.drive.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AffectState":
        return cls(data["v"], data["m"], data["a"], data["d"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, AffectState):
            return NotImplemented
        return self.flat().tobytes() == other.flat().tobytes()

    def __hash__(self):
        return hash(self.flat().tobytes())

    def __repr__(self) -> str:
        return (
            f"AffectState(v={self.valence.tolist()}, m={self.magnitude.tolist()}, "
            f"a={self.arousal!r}, d={self.drive.tolist()})"
        )


@dataclass(frozen=True, eq=False)
class AffectMap:
    """Linear need->affect transform.

    drive = clip(gains * (target - value), -1, 1); valence and magnitude are
    fixed linear maps of the drive, clipped to their ranges; arousal is the
    largest absolute drive.
    """

    drive_gains: np.ndarray
    valence_map: np.ndarray
    magnitude_map: np.ndarray

    def __post_init__(self):
        g = frozen_array(self.drive_gains, ndim=1)
        vm = frozen_array(self.valence_map, ndim=2)
        mm = frozen_array(self.magnitude_map, ndim=2)
        if vm.shape != mm.shape or vm.shape[1] != g.shape[0]:
            raise DimensionError("affect map shapes must be (B, L) with L gains")
        if np.any(g < 0):
            raise ValueError("drive gains must be nonnegative")
        object.__setattr__(self, "drive_gains", g)
        object.__setattr__(self, "valence_map", vm)
        object.__setattr__(self, "magnitude_map", mm)

    @property
    def n_channels(self) -> int:
        return self.valence_map.shape[0]

    @property
    def n_needs(self) -> int:
        return self.drive_gains.shape[0]

    @property
    def affect_dim(self) -> int:
        return 2 * self.n_channels + 1 + self.n_needs


@dataclass(frozen=True, eq=False)
class HintMaps:
    need_map: np.ndarray  # |policies| x L
    affect_map: np.ndarray  # |policies| x (2B + 1 + L)
    alphas: np.ndarray  # (need, memory, affect)

    def __post_init__(self):
        hn = frozen_array(self.need_map, ndim=2)
        ha = frozen_array(self.affect_map, ndim=2)
        al = frozen_array(self.alphas, ndim=1)
        if hn.shape[0] != ha.shape[0]:
            raise DimensionError("need and affect hint maps disagree on policy count")
        if al.shape != (3,) or np.any(al < 0) or al.sum() <= 0:
            raise ValueError("alphas must be three nonnegative weights with positive sum")
        for name, arr in (("need_map", hn), ("affect_map", ha)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "need_map", hn)
        object.__setattr__(self, "affect_map", ha)
        object.__setattr__(self, "alphas", al)

    @property
    def n_policies(self) -> int:
        return self.need_map.shape[0]


@dataclass(frozen=True, eq=False)
class TraitParams:
    """Constant per-actor gains applied to the drive before the need-hint map."""

    gains: np.ndarray

    def __post_init__(self):
        g = frozen_array(self.gains, ndim=1)
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("trait gains must be finite and nonnegative")
        object.__setattr__(self, "gains", g)

    @classmethod
    def neutral(cls, n: int) -> "TraitParams":
        return cls(np.ones(n))


@dataclass(frozen=True)
class Temperature:
    """Affine arousal->temperature schedule, hot at rest and cold when aroused."""

    t_max: float = 2.0
    t_min: float = 0.25

    def __post_init__(self):
        if not (self.t_max > self.t_min > 0.0):
            raise ValueError("temperature bounds need t_max > t_min > 0")

    def __call__(self, arousal: float) -> float:
        if not (0.0 <= arousal <= 1.0):
            raise ValueError(f"arousal outside [0, 1]: {arousal}")
        return self.t_max - arousal * (self.t_max - self.t_min)


def affect_from_needs(needs: Needs, amap: AffectMap) -> AffectState:
    if len(needs) != amap.n_needs:
        raise DimensionError(f"got {len(needs)} needs, affect map expects {amap.n_needs}")
    d = np.clip(amap.drive_gains * needs.discrepancy(), -1.0, 1.0)
    v = np.clip(amap.valence_map @ d, -1.0, 1.0)
    m = np.clip(amap.magnitude_map @ d, 0.0, 1.0)
    a = float(np.clip(np.max(np.abs(d)), 0.0, 1.0)) if d.size else 0.0
    # +0.0 folds negative zeros so that identical situations serialize identically
    return AffectState(v + 0.0, m + 0.0, a + 0.0, d + 0.0)


def need_hints(z_need: AffectState, maps: HintMaps, traits: Optional[TraitParams] = None) -> np.ndarray:
    d = z_need.drive
    if maps.need_map.shape[1] != d.shape[0]:
        raise DimensionError("need map columns do not match drive length")
    if traits is not None:
        if traits.gains.shape != d.shape:
            raise DimensionError("trait gains do not match drive length")
        d = traits.gains * d
    return maps.need_map @ d


def affect_hints(z: AffectState, maps: HintMaps) -> np.ndarray:
    flat = z.flat()
    if maps.affect_map.shape[1] != flat.shape[0]:
        raise DimensionError("affect map columns do not match affect dimension")
    return maps.affect_map @ flat


def fuse_affect(
    z_need: AffectState,
    z_mem: AffectState,
    reliability: float,
    *,
    memory_weight: float,
    mood: Optional[AffectState] = None,
    mood_weight: float = 0.15,
) -> AffectState:
    """Reliability-gated convex blend of need- and memory-based affect.

    With ``memory_weight * reliability == 0`` the need affect passes through
    untouched (before any mood blend).
    """
    if z_need.dim != z_mem.dim or z_need.n_channels != z_mem.n_channels:
        raise DimensionError("need and memory affect differ in shape")
    if not (0.0 <= reliability <= 1.0):
        raise ValueError(f"reliability outside [0, 1]: {reliability}")
    w = memory_weight * reliability
    z = z_need
    if w != 0.0:
        flat = (1.0 - w) * z_need.flat() + w * z_mem.flat()
        z = AffectState.from_flat(flat, z_need.n_channels, z_need.n_needs, clip=True)
    if mood is not None and mood_weight != 0.0:
        flat = (1.0 - mood_weight) * z.flat() + mood_weight * mood.flat()
        z = AffectState.from_flat(flat, z_need.n_channels, z_need.n_needs, clip=True)
    return z


def fuse_hints(h_need, h_mem, h_aff, maps: HintMaps) -> np.ndarray:
    a_n, a_m, a_a = (float(x) for x in maps.alphas)
    out = a_n * np.asarray(h_need, dtype=float)
    # zero-weight sources are skipped entirely so an ablated source cannot
    # leak through 0 * inf or signed zeros
    if a_m != 0.0:
        out = out + a_m * np.asarray(h_mem, dtype=float)
    if a_a != 0.0:
        out = out + a_a * np.asarray(h_aff, dtype=float)
    return out + 0.0


def softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input has non-finite entries")
    e = np.exp((x - np.max(x)) / temperature)
    return e / e.sum()


def policy_distribution(h, arousal: float, temperature: Temperature) -> np.ndarray:
    return softmax(h, temperature(arousal))


def entropy(p: Sequence[float]) -> float:
    return -math.fsum(float(pi) * math.log(pi) for pi in p if pi > 0.0)
