"""Glue between stages: snapshot rasterization, day splits, scoring."""
from __future__ import annotations

from datetime import date
from typing import Iterable, Optional, Sequence

from .encode import DEFAULT_TZ, LabeledSample, _zone, make_sample
from .geodata import TrafficStore, from_minute, speeds_at
from .raster import DEFAULT_WIDTH, Fallback, GridMap, project


def rasterize_store(
    store: TrafficStore,
    grid: GridMap,
    events: Sequence,
    width: int = DEFAULT_WIDTH,
    fallback: Fallback = Fallback.ZERO,
    tz: str = DEFAULT_TZ,
    minutes: Optional[Iterable[int]] = None,
) -> list:
    """One labeled TCI per stored minute (or per entry of ``minutes``)."""
    out = []
    for m in store.times if minutes is None else minutes:
        t = from_minute(m)
        out.append(make_sample(project(grid, speeds_at(store, t, grid.keys), width, fallback, t), events, tz))
    return out


def local_date(sample: LabeledSample, tz: str = DEFAULT_TZ) -> date:
    return sample.timestamp.astimezone(_zone(tz)).date()


def split_by_days(samples: Sequence[LabeledSample], test_days: Sequence[date], tz: str = DEFAULT_TZ):
    test_days = set(test_days)
    train, test = [], []
    for s in samples:
        (test if local_date(s, tz) in test_days else train).append(s)
    return train, test
