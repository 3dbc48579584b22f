"""Magnification-prior pair sampling (fixed, ordered and random strategies)."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import permutations

import numpy as np

from .dataset import MAGNIFICATIONS, MagnificationFactor, MagnifiedSample
from .errors import ConfigError, IncompleteSample

ORDERED_PAIRS = tuple(permutations(MAGNIFICATIONS, 2))


class PairKind(str, Enum):
    FIXED = "fixed"
    ORDERED = "ordered"
    RANDOM = "random"


def default_ordered_lookup() -> dict[MagnificationFactor, MagnificationFactor]:
    """Next-higher magnification, wrapping down to 200x from 400x."""
    m = MagnificationFactor
    return {m.X40: m.X100, m.X100: m.X200, m.X200: m.X400, m.X400: m.X200}


@dataclass(frozen=True)
class PairStrategy:
    kind: PairKind
    fixed_first: MagnificationFactor | None = None
    fixed_second: MagnificationFactor | None = None
    lookup: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", PairKind(self.kind))
        if self.kind is PairKind.FIXED:
            if self.fixed_first is None or self.fixed_second is None:
                raise ConfigError("fixed strategy needs both magnifications")
            first, second = MagnificationFactor(self.fixed_first), MagnificationFactor(self.fixed_second)
            if first == second:
                raise ConfigError("fixed strategy needs two different magnifications")
            object.__setattr__(self, "fixed_first", first)
            object.__setattr__(self, "fixed_second", second)
        elif self.kind is PairKind.ORDERED:
            table = {MagnificationFactor(k): MagnificationFactor(v)
                     for k, v in (self.lookup or default_ordered_lookup()).items()}
            if set(table) != set(MAGNIFICATIONS):
                raise ConfigError("ordered look-up table must cover all four magnifications")
            if any(k == v for k, v in table.items()):
                raise ConfigError("ordered look-up table maps a magnification onto itself")
            object.__setattr__(self, "lookup", table)

    @classmethod
    def fixed(cls, first=200, second=400) -> "PairStrategy":
        return cls(PairKind.FIXED, first, second)

    @classmethod
    def ordered(cls, lookup=None) -> "PairStrategy":
        return cls(PairKind.ORDERED, lookup=dict(lookup or default_ordered_lookup()))

    @classmethod
    def random(cls) -> "PairStrategy":
        return cls(PairKind.RANDOM)

    @classmethod
    def from_config(cls, cfg: dict) -> "PairStrategy":
        kind = PairKind(cfg.get("kind", "ordered"))
        if kind is PairKind.FIXED:
            first, second = cfg.get("fixed", [200, 400])
            return cls.fixed(first, second)
        if kind is PairKind.ORDERED:
            return cls.ordered(cfg.get("lookup"))
        return cls.random()

    def to_config(self) -> dict:
        cfg = {"kind": self.kind.value}
        if self.kind is PairKind.FIXED:
            cfg["fixed"] = [int(self.fixed_first), int(self.fixed_second)]
        elif self.kind is PairKind.ORDERED:
            cfg["lookup"] = {int(k): int(v) for k, v in sorted(self.lookup.items())}
        return cfg


@dataclass(frozen=True)
class ViewPair:
    specimen_id: str
    mf1: MagnificationFactor
    mf2: MagnificationFactor
    view1: np.ndarray
    view2: np.ndarray

    def __post_init__(self):
        if self.mf1 == self.mf2:
            raise ValueError("a positive pair needs two different magnifications")


def degrees_of_freedom(strategy: PairStrategy) -> int:
    """Number of magnification choices left to chance by ``strategy``."""
    return {PairKind.FIXED: 0, PairKind.ORDERED: 1, PairKind.RANDOM: 2}[PairKind(strategy.kind)]


def choose_magnifications(strategy: PairStrategy, rng: np.random.Generator):
    if strategy.kind is PairKind.FIXED:
        return strategy.fixed_first, strategy.fixed_second
    if strategy.kind is PairKind.ORDERED:
        first = MAGNIFICATIONS[int(rng.integers(len(MAGNIFICATIONS)))]
        return first, strategy.lookup[first]
    return ORDERED_PAIRS[int(rng.integers(len(ORDERED_PAIRS)))]


def sample_pair(strategy: PairStrategy, sample: MagnifiedSample, rng: np.random.Generator) -> ViewPair:
    """Draw the two magnifications for ``sample`` and return the stored views.

    The fixed strategy consumes no randomness; the others draw one integer.
    """
    if any(mf not in sample.images for mf in MAGNIFICATIONS):
        raise IncompleteSample(f"{sample.specimen_id} lacks a magnification")
    mf1, mf2 = choose_magnifications(strategy, rng)
    return ViewPair(sample.specimen_id, mf1, mf2, sample.images[mf1], sample.images[mf2])


def derive_rng(seed: int, epoch: int = 0, worker: int = 0) -> np.random.Generator:
    """Independent stream for one (seed, epoch, worker) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(worker)]))
