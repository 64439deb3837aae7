"""Synthetic road networks and traffic with injected event congestion.

Speeds follow a daily profile (free flow minus two Gaussian rush-hour dips),
are 10% higher on weekends, and carry Gaussian noise. Around each event the
speed of nearby segments is scaled by ``1 - severity * influence * falloff``
where ``influence`` ramps linearly from 0 (4 h before the start) to 1 at the
start, stays at 1 until the end and decays linearly afterwards, and
``falloff = max(0, 1 - d / radius)`` with ``d`` the distance from the
epicentre to the segment centroid.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

from .encode import _zone
from .geodata import (EVENT_TYPES, Event, RoadSegment, SegmentSet, TrafficStore, from_minute, to_minute,
                      write_events, write_segments, write_traffic)
from .raster import meters_per_degree


@dataclass(frozen=True)
class EventSpec:
    type: str = "football"
    day: int = 0  # index into the simulated days
    start: str = "12:00"  # local time
    epicenter: Optional[tuple] = None  # (lat, lon); None = extent centre
    radius_m: float = 450.0
    severity: float = 0.8
    duration_h: float = 3.0
    attendance: Optional[int] = None

    def __post_init__(self):
        if self.type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {self.type!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        if not self.radius_m > 0:
            raise ValueError("impact radius must be positive")
        if self.duration_h < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    extent: tuple = (36.1470, 36.1586, -86.8126, -86.8009)
    n_segments: int = 40
    start_date: str = "2016-10-10"
    days: int = 14
    timezone: str = "America/Chicago"
    free_flow_mph: float = 45.0
    rush_depth: float = 0.35
    rush_hours: tuple = (7.5, 17.5)
    rush_width_h: float = 1.0
    weekend_boost: float = 0.10
    noise_sigma: float = 0.5
    lead_h: float = 4.0
    decay_h: float = 1.5
    events: tuple = ()

    def __post_init__(self):
        lat_min, lat_max, lon_min, lon_max = self.extent
        if not (lat_max > lat_min and lon_max > lon_min):
            raise ValueError(f"degenerate extent {self.extent}")
        if self.n_segments <= 0:
            raise ValueError("scenario needs at least one segment")
        if self.days <= 0:
            raise ValueError("days must be positive")
        if not 0 < self.free_flow_mph <= 80:
            raise ValueError("free-flow speed must lie in (0, 80] mph")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        evs = tuple(e if isinstance(e, EventSpec) else EventSpec(**e) for e in self.events)
        for e in evs:
            if not 0 <= e.day < self.days:
                raise ValueError(f"event day {e.day} outside the simulated range")
        object.__setattr__(self, "events", evs)
        object.__setattr__(self, "extent", tuple(float(x) for x in self.extent))
        object.__setattr__(self, "rush_hours", tuple(float(x) for x in self.rush_hours))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d["events"] = tuple(
            EventSpec(**{**e, "epicenter": tuple(e["epicenter"]) if e.get("epicenter") else None})
            for e in d.get("events", ())
        )
        for k in ("extent", "rush_hours"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def center(self) -> tuple:
        lat_min, lat_max, lon_min, lon_max = self.extent
        return 0.5 * (lat_min + lat_max), 0.5 * (lon_min + lon_max)

    def day_date(self, day: int) -> date:
        return date.fromisoformat(self.start_date) + timedelta(days=day)

    def event_days(self) -> list:
        return sorted({e.day for e in self.events})


def acceptance_spec(seed: int = 7) -> ScenarioSpec:
    """14 days starting on a Monday; a venue with a weekly schedule hosts a
    severity-0.8 event at 12:00 on both Wednesdays (days 2, 9) and both
    Sundays (days 6, 13)."""
    events = (
        EventSpec("football", 2, "12:00", attendance=65205),
        EventSpec("football", 6, "12:00", attendance=68780),
        EventSpec("football", 9, "12:00", attendance=69116),
        EventSpec("football", 13, "12:00", attendance=61619),
    )
    return ScenarioSpec(seed=seed, events=events)


# ---------------------------------------------------------------- network

def build_network(spec: ScenarioSpec) -> SegmentSet:
    """Segments on a jittered lattice of intersections inside the extent."""
    rng = np.random.default_rng([spec.seed, 0x0E7])
    k = 2
    while 2 * k * (k - 1) < spec.n_segments:
        k += 1
    lat_min, lat_max, lon_min, lon_max = spec.extent
    inset = 0.06
    lats = np.linspace(lat_min + inset * (lat_max - lat_min), lat_max - inset * (lat_max - lat_min), k)
    lons = np.linspace(lon_min + inset * (lon_max - lon_min), lon_max - inset * (lon_max - lon_min), k)
    dlat, dlon = lats[1] - lats[0], lons[1] - lons[0]
    nodes = np.empty((k, k, 2))
    nodes[..., 0] = lats[:, None] + rng.uniform(-0.2, 0.2, (k, k)) * dlat
    nodes[..., 1] = lons[None, :] + rng.uniform(-0.2, 0.2, (k, k)) * dlon
    edges = [((i, j), (i, j + 1)) for i in range(k) for j in range(k - 1)]
    edges += [((i, j), (i + 1, j)) for i in range(k - 1) for j in range(k)]
    pick = np.sort(rng.permutation(len(edges))[:spec.n_segments])
    ff = free_flow_speeds(spec, spec.n_segments)
    segs = []
    for n, e in enumerate(pick):
        a, b = nodes[edges[e][0]], nodes[edges[e][1]]
        mid = 0.5 * (a + b) + rng.uniform(-0.08, 0.08, 2) * np.array([dlat, dlon])
        limit = max(5.0, 5.0 * math.ceil(ff[n] / 5.0))
        pts = tuple((round(float(np.clip(p[0], lat_min, lat_max)), 7), round(float(np.clip(p[1], lon_min, lon_max)), 7))
                    for p in (a, mid, b))
        segs.append(RoadSegment(f"129+{n + 1:05d}", limit, pts))
    return SegmentSet(tuple(segs))


def free_flow_speeds(spec: ScenarioSpec, n_segments: int) -> np.ndarray:
    """Per-segment free-flow speed, reproducible from the seed alone."""
    rng = np.random.default_rng([spec.seed, 0xFF])
    return spec.free_flow_mph * rng.uniform(0.75, 1.0, n_segments)


def centroid_distances(segments: SegmentSet, point: tuple) -> np.ndarray:
    """Metres from ``point`` to each segment's vertex centroid."""
    m_lat, m_lon = meters_per_degree(point[0])
    out = []
    for s in segments:
        pts = np.asarray(s.points)
        lat, lon = pts[:, 0].mean(), pts[:, 1].mean()
        out.append(math.hypot((lat - point[0]) * m_lat, (lon - point[1]) * m_lon))
    return np.asarray(out)


# ---------------------------------------------------------------- traffic

def _event_instants(spec: ScenarioSpec, e: EventSpec) -> tuple:
    zone = _zone(spec.timezone)
    start_local = datetime.combine(spec.day_date(e.day), time.fromisoformat(e.start), tzinfo=zone)
    start = to_minute(start_local)
    return start, start + int(round(e.duration_h * 60))


def influence(minutes: np.ndarray, start: int, end: int, lead_h: float, decay_h: float) -> np.ndarray:
    """Event influence in [0, 1] at the given epoch minutes."""
    t = np.asarray(minutes, dtype=np.float64)
    lead, decay = lead_h * 60.0, decay_h * 60.0
    ramp = np.clip((t - (start - lead)) / lead, 0.0, 1.0) if lead > 0 else (t >= start).astype(float)
    if decay > 0:
        tail = np.clip(1.0 - (t - end) / decay, 0.0, 1.0)
    else:
        tail = (t <= end).astype(float)
    return np.where(t < start, ramp, np.where(t <= end, 1.0, tail))


def _day_minutes(spec: ScenarioSpec, day: int) -> np.ndarray:
    zone = _zone(spec.timezone)
    d = spec.day_date(day)
    lo = to_minute(datetime.combine(d, time(0), tzinfo=zone))
    hi = to_minute(datetime.combine(d + timedelta(days=1), time(0), tzinfo=zone))
    return np.arange(lo, hi, dtype=np.int64)


def generate(spec: ScenarioSpec):
    """Build ``(SegmentSet, TrafficStore, events)`` for a scenario. Deterministic
    in ``spec``; each day uses its own derived noise stream."""
    segments = build_network(spec)
    ff = free_flow_speeds(spec, len(segments))
    zone = _zone(spec.timezone)
    impacts = []
    events = []
    for n, e in enumerate(spec.events):
        start, end = _event_instants(spec, e)
        centre = e.epicenter or spec.center
        falloff = np.maximum(0.0, 1.0 - centroid_distances(segments, centre) / e.radius_m)
        impacts.append((start, end, e.severity, falloff))
        events.append(Event(
            event_id=f"E{n + 1:03d}",
            event_type=e.type,
            start=from_minute(start),
            end=from_minute(end),
            location=tuple(centre),
            attendance=e.attendance,
        ))

    times, speed, jam = [], [], []
    for day in range(spec.days):
        minutes = _day_minutes(spec, day)
        hours = _local_hours(minutes, zone)
        weekend = spec.day_date(day).weekday() >= 5
        factor = 1.0 if weekend else 1.0 / (1.0 + spec.weekend_boost)
        dip = sum(np.exp(-0.5 * ((hours - h) / spec.rush_width_h) ** 2) for h in spec.rush_hours)
        base = ff[None, :] * (1.0 - spec.rush_depth * np.clip(dip, 0.0, 1.0))[:, None] * factor
        mult = np.ones_like(base)
        for start, end, sev, falloff in impacts:
            infl = influence(minutes, start, end, spec.lead_h, spec.decay_h)
            if sev and infl.any():
                mult *= 1.0 - sev * infl[:, None] * falloff[None, :]
        rng = np.random.default_rng([spec.seed, 0xDA7, day])
        noise = rng.normal(0.0, 1.0, base.shape) * spec.noise_sigma
        v = np.round(np.clip(base * mult + noise, 0.0, spec.free_flow_mph), 2)
        jf = np.round(np.clip(10.0 * (1.0 - v / ff[None, :]), 0.0, 10.0), 2)
        times.append(minutes)
        speed.append(v)
        jam.append(jf)
    store = TrafficStore(np.concatenate(times), [s.key for s in segments], np.vstack(speed), np.vstack(jam))
    return segments, store, events


def _local_hours(minutes: np.ndarray, zone) -> np.ndarray:
    """Fractional local hour of day for epoch minutes."""
    off = np.array([from_minute(m).astimezone(zone).utcoffset().total_seconds() // 60 for m in minutes],
                   dtype=np.int64)
    return ((minutes + off) % 1440) / 60.0


def write_scenario(spec: ScenarioSpec, out_dir) -> dict:
    """Generate a scenario and write it in the ingestion formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    segments, store, events = generate(spec)
    paths = {
        "segments": out / "segments.jsonl",
        "traffic": out / "traffic.csv",
        "events": out / "events.jsonl",
        "scenario": out / "scenario.json",
    }
    write_segments(segments, paths["segments"])
    write_traffic(store, paths["traffic"])
    write_events(events, paths["events"])
    paths["scenario"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths
