"""Row-level crossover between temporally adjacent TCIs.

Offspring inherit each pixel row from a base TCI, except that with
probability ``p_m`` a row is replaced by the same row of another candidate
picked uniformly at random. Candidates are TCIs from ``[T - t, T]``, which are
assumed to share one event label.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .encode import N_CLASSES, EventLabel, LabeledSample
from .geodata import TrafficStore, speeds_at, to_minute, from_minute
from .raster import DEFAULT_WIDTH, Fallback, GridMap, Tci, project


@dataclass(frozen=True)
class CrossoverConfig:
    n: int = 4
    t: timedelta = field(default=timedelta(minutes=3))
    p_m: float = 0.3
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError("p_m must lie in [0, 1]")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.t < timedelta(0):
            raise ValueError("t must be non-negative")


def candidate_times(T: datetime, cfg: CrossoverConfig) -> list:
    """``n`` evenly spaced minute-aligned instants in ``[T - t, T]`` ending at ``T``."""
    if cfg.n == 1:
        return [T]
    end = to_minute(T)
    step = cfg.t.total_seconds() / 60.0 / (cfg.n - 1)
    return [from_minute(end - int(round((cfg.n - 1 - i) * step))) for i in range(cfg.n)]


def candidates(
    store: TrafficStore,
    grid: GridMap,
    T: datetime,
    cfg: CrossoverConfig,
    width: int = DEFAULT_WIDTH,
    fallback: Fallback = Fallback.ZERO,
) -> list:
    if not store.in_range(T - cfg.t, T):
        raise ValueError(f"no traffic readings in [{T - cfg.t}, {T}]")
    return [project(grid, speeds_at(store, ts, grid.keys), width, fallback, ts)
            for ts in candidate_times(T, cfg)]


def _rng(cfg: CrossoverConfig, offspring_index) -> np.random.Generator:
    idx = list(offspring_index) if isinstance(offspring_index, (tuple, list)) else [offspring_index]
    return np.random.default_rng([cfg.seed, *idx])


def crossover(cands: Sequence[Tci], base_index: int, cfg: CrossoverConfig, offspring_index=0) -> Tci:
    """One offspring of ``cands[base_index]``. Deterministic in
    ``(cands, cfg.seed, offspring_index)``."""
    if not cands:
        raise ValueError("empty candidate list")
    if not 0 <= base_index < len(cands):
        raise IndexError(f"base_index {base_index} out of range")
    base = cands[base_index]
    if any(c.width != base.width for c in cands):
        raise ValueError("candidate TCIs differ in width")
    k, w = len(cands), base.width
    pixels = base.pixels.copy()
    if k > 1:
        rng = _rng(cfg, offspring_index)
        mutate = rng.random(w) < cfg.p_m
        donor = rng.integers(0, k - 1, size=w)
        donor += donor >= base_index  # skip the base itself
        stack = np.stack([c.pixels for c in cands])
        rows = np.nonzero(mutate)[0]
        pixels[rows] = stack[donor[rows], rows]
    return Tci(pixels, base.timestamp, base.grid_id)


def generate_offspring(cands: Sequence[Tci], cfg: CrossoverConfig) -> list:
    """``cfg.count`` offspring, each based on the last (time ``T``) candidate."""
    return [crossover(cands, len(cands) - 1, cfg, j) for j in range(cfg.count)]


def crossover_samples(samples: Sequence[LabeledSample], base_index: int, cfg: CrossoverConfig,
                      offspring_index=0) -> LabeledSample:
    label = samples[base_index].label
    if any(s.label != label for s in samples):
        raise ValueError("crossover candidates must share one label")
    tci = crossover([s.tci for s in samples], base_index, cfg, offspring_index)
    return LabeledSample(tci, samples[base_index].features, label)


def _neighbours(members: list, times: list, i: int, cfg: CrossoverConfig) -> tuple:
    """Same-class samples within ``[T - t, T]`` of member ``i`` (at most ``n``,
    nearest first). Returns the group and the index of the base in it."""
    T = times[i]
    if T is None:
        return [members[i]], 0
    lo = bisect.bisect_left(times, T - cfg.t)
    idx = [j for j in range(lo, i)][-(cfg.n - 1):] if cfg.n > 1 else []
    group = [members[j] for j in idx] + [members[i]]
    return group, len(group) - 1


def balance(dataset: Sequence[LabeledSample], target_per_class: int, cfg: CrossoverConfig,
            classes: Sequence[int] = tuple(range(N_CLASSES))) -> list:
    """Resample every class to exactly ``target_per_class`` samples.

    Surplus classes are down-sampled without replacement; deficit classes are
    topped up with crossover offspring of temporally adjacent members.
    """
    if target_per_class < 0:
        raise ValueError("target_per_class must be >= 0")
    by_class = {k: [] for k in classes}
    for s in dataset:
        if s.class_index not in by_class:
            raise ValueError(f"sample of unexpected class {s.class_index}")
        by_class[s.class_index].append(s)
    for k, members in by_class.items():
        if not members:
            raise ValueError(f"class {k} ({EventLabel.from_class(k)}) has no samples")

    out = []
    for k in classes:
        members = by_class[k]
        rng = np.random.default_rng([cfg.seed, 0xBA1A, k])
        if len(members) >= target_per_class:
            keep = np.sort(rng.choice(len(members), size=target_per_class, replace=False))
            out.extend(members[i] for i in keep)
            continue
        out.extend(members)
        order = sorted(range(len(members)), key=lambda i: (members[i].timestamp is None, members[i].timestamp or 0))
        members = [members[i] for i in order]
        times = [m.timestamp for m in members]
        if any(t is None for t in times):
            times = [None] * len(members)
        for j in range(target_per_class - len(members)):
            i = int(rng.integers(len(members)))
            group, base = _neighbours(members, times, i, cfg)
            out.append(crossover_samples(group, base, cfg, (k, j)))
    return out
