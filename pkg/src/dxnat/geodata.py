"""Road segments, traffic readings and events: parsing, validation, persistence.

Three on-disk formats are supported:

* segments: JSON lines, ``{"tmc_key": ..., "speed_limit_mph": ..., "points": [[lat, lon], ...]}``
* traffic: CSV with header ``timestamp_utc,tmc_key,speed_mph,jam_factor``
* events: JSON lines with ``event_id, type, start_utc, end_utc, lat, lon, attendance``

All timestamps are normalized to UTC on ingest. Traffic readings are kept at
minute resolution in a dense ``(time, segment)`` matrix with NaN for gaps.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
EVENT_TYPES = ("football", "hockey", "accident", "other")
TRAFFIC_HEADER = ["timestamp_utc", "tmc_key", "speed_mph", "jam_factor"]

BBox = tuple  # (lat_min, lat_max, lon_min, lon_max)


class DataError(ValueError):
    """Malformed or invalid input data."""


# ---------------------------------------------------------------- time helpers

def parse_utc(text: str) -> datetime:
    """Parse an ISO-8601 instant. A trailing ``Z`` or an offset is honoured;
    naive values are taken as UTC."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def to_minute(dt: datetime) -> int:
    """Whole minutes since the Unix epoch. Sub-minute parts are rejected."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - EPOCH
    secs = delta.days * 86400 + delta.seconds
    if secs % 60 or delta.microseconds:
        raise DataError(f"timestamp {dt.isoformat()} is not minute-aligned")
    return secs // 60


def from_minute(m: int) -> datetime:
    return EPOCH + timedelta(minutes=int(m))


# ---------------------------------------------------------------- segments

@dataclass(frozen=True)
class RoadSegment:
    key: str
    speed_limit: float
    points: tuple  # ((lat, lon), ...)

    def __post_init__(self):
        if not isinstance(self.key, str) or not self.key:
            raise DataError("segment key must be a non-empty string")
        if not (self.speed_limit > 0):
            raise DataError(f"segment {self.key}: speed limit must be positive")
        pts = tuple((float(a), float(b)) for a, b in self.points)
        if len(pts) < 2:
            raise DataError(f"segment {self.key}: polyline needs at least 2 points")
        for lat, lon in pts:
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise DataError(f"segment {self.key}: coordinate ({lat}, {lon}) out of range")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "speed_limit", float(self.speed_limit))


@dataclass(frozen=True)
class SegmentSet:
    segments: tuple  # RoadSegment, in file order
    bbox: BBox = field(init=False)

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise DataError("no segments")
        seen = set()
        for s in segs:
            if s.key in seen:
                raise DataError(f"duplicate segment key {s.key!r}")
            seen.add(s.key)
        object.__setattr__(self, "segments", segs)
        lats = [p[0] for s in segs for p in s.points]
        lons = [p[1] for s in segs for p in s.points]
        object.__setattr__(self, "bbox", (min(lats), max(lats), min(lons), max(lons)))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, key: str) -> RoadSegment:
        for s in self.segments:
            if s.key == key:
                return s
        raise KeyError(key)

    @property
    def keys(self) -> list:
        return [s.key for s in self.segments]


def load_segments(path) -> SegmentSet:
    segs = []
    first_line = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seg = RoadSegment(
                    key=str(rec["tmc_key"]),
                    speed_limit=float(rec["speed_limit_mph"]),
                    points=tuple(tuple(p) for p in rec["points"]),
                )
                if any(len(p) != 2 for p in rec["points"]):
                    raise DataError("points must be [lat, lon] pairs")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed segment record: {exc}") from exc
            if seg.key in first_line:
                raise DataError(
                    f"{path}: duplicate key {seg.key!r} on lines {first_line[seg.key]} and {lineno}"
                )
            first_line[seg.key] = lineno
            segs.append(seg)
    if not segs:
        raise DataError(f"{path}: no segments")
    return SegmentSet(tuple(segs))


def write_segments(segments: SegmentSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in segments:
            rec = {
                "tmc_key": s.key,
                "speed_limit_mph": s.speed_limit,
                "points": [[lat, lon] for lat, lon in s.points],
            }
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- traffic

@dataclass(frozen=True)
class TrafficReading:
    timestamp: datetime
    key: str
    speed: float
    jam_factor: Optional[float] = None

    def __post_init__(self):
        if not self.key:
            raise DataError("reading without segment key")
        if not (self.speed >= 0):
            raise DataError(f"negative or invalid speed {self.speed!r}")
        if self.jam_factor is not None and not (0.0 <= self.jam_factor <= 10.0):
            raise DataError(f"jam factor {self.jam_factor!r} outside [0, 10]")


class TrafficStore:
    """Minute-resolution readings indexed by ``(timestamp, key)``.

    ``speed`` and ``jam`` are ``(len(times), len(keys))`` arrays with NaN where
    no reading exists. ``times`` holds sorted minutes since the Unix epoch.
    Treat instances as read-only.
    """

    def __init__(self, times, keys, speed, jam=None):
        self.times = np.asarray(times, dtype=np.int64)
        self.keys = tuple(keys)
        self.speed = np.asarray(speed, dtype=np.float64)
        self.jam = np.full_like(self.speed, np.nan) if jam is None else np.asarray(jam, dtype=np.float64)
        if self.speed.shape != (len(self.times), len(self.keys)) or self.jam.shape != self.speed.shape:
            raise DataError("traffic matrix shape does not match times x keys")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError("traffic times must be strictly increasing")
        self._tindex = {int(m): i for i, m in enumerate(self.times)}
        self._kindex = {k: j for j, k in enumerate(self.keys)}
        for arr in (self.speed, self.jam):
            arr.setflags(write=False)
        self.times.setflags(write=False)

    @classmethod
    def from_readings(cls, readings: Iterable[TrafficReading]) -> "TrafficStore":
        table = {}
        for r in readings:
            table[(to_minute(r.timestamp), r.key)] = (r.speed, r.jam_factor)
        return cls._from_table(table)

    @classmethod
    def _from_table(cls, table: Mapping) -> "TrafficStore":
        times = sorted({t for t, _ in table})
        keys = sorted({k for _, k in table})
        ti = {t: i for i, t in enumerate(times)}
        ki = {k: j for j, k in enumerate(keys)}
        speed = np.full((len(times), len(keys)), np.nan)
        jam = np.full_like(speed, np.nan)
        for (t, k), (v, jf) in table.items():
            speed[ti[t], ki[k]] = v
            if jf is not None:
                jam[ti[t], ki[k]] = jf
        return cls(times, keys, speed, jam)

    def __len__(self):
        return int(np.count_nonzero(~np.isnan(self.speed)))

    def __eq__(self, other):
        if not isinstance(other, TrafficStore):
            return NotImplemented
        return (
            self.keys == other.keys
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.speed, other.speed, equal_nan=True)
            and np.array_equal(self.jam, other.jam, equal_nan=True)
        )

    @property
    def time_range(self):
        if not len(self.times):
            return None
        return from_minute(self.times[0]), from_minute(self.times[-1])

    def time_index(self, t: datetime) -> Optional[int]:
        return self._tindex.get(to_minute(t))

    def key_index(self, key: str) -> Optional[int]:
        return self._kindex.get(key)

    def reading(self, t: datetime, key: str) -> Optional[TrafficReading]:
        i, j = self.time_index(t), self._kindex.get(key)
        if i is None or j is None or math.isnan(self.speed[i, j]):
            return None
        jf = self.jam[i, j]
        return TrafficReading(t, key, float(self.speed[i, j]), None if math.isnan(jf) else float(jf))

    def readings(self):
        for i, m in enumerate(self.times):
            t = from_minute(m)
            for j, k in enumerate(self.keys):
                v = self.speed[i, j]
                if not math.isnan(v):
                    jf = self.jam[i, j]
                    yield TrafficReading(t, k, float(v), None if math.isnan(jf) else float(jf))

    def in_range(self, start: datetime, end: datetime) -> bool:
        """True if any reading exists in ``[start, end]``."""
        lo = np.searchsorted(self.times, to_minute(start), side="left")
        hi = np.searchsorted(self.times, to_minute(end), side="right")
        return bool(hi > lo and np.any(~np.isnan(self.speed[lo:hi])))


def speeds_at(store: TrafficStore, t: datetime, keys) -> dict:
    """Speeds of ``keys`` at ``t``; keys without a reading are absent."""
    i = store.time_index(t)
    if i is None:
        return {}
    keys = keys.keys if isinstance(keys, SegmentSet) else keys
    row = store.speed[i]
    out = {}
    for k in keys:
        j = store.key_index(k)
        if j is not None and not math.isnan(row[j]):
            out[k] = float(row[j])
    return out


def load_traffic(path) -> TrafficStore:
    table = {}
    parsed = {}
    duplicates = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty traffic file")
        if [h.strip() for h in header] != TRAFFIC_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRAFFIC_HEADER)}")
        for rowno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{rowno}: expected 4 fields, got {len(row)}")
            ts, key, sp, jf = row
            try:
                m = parsed.get(ts)
                if m is None:
                    m = parsed[ts] = to_minute(parse_utc(ts))
            except ValueError as exc:
                raise DataError(f"{path}:{rowno}: unparseable timestamp {ts!r}") from exc
            try:
                speed = float(sp)
                jam = float(jf) if jf.strip() else None
            except ValueError as exc:
                raise DataError(f"{path}:{rowno}: bad number: {exc}") from exc
            if not key:
                raise DataError(f"{path}:{rowno}: empty tmc_key")
            if not speed >= 0:
                raise DataError(f"{path}:{rowno}: negative speed {sp!r}")
            if jam is not None and not 0.0 <= jam <= 10.0:
                raise DataError(f"{path}:{rowno}: jam factor {jf!r} outside [0, 10]")
            if (m, key) in table:
                duplicates += 1
            table[(m, key)] = (speed, jam)
    if duplicates:
        log.warning("%s: %d duplicate (timestamp, key) rows overwritten", path, duplicates)
    store = TrafficStore._from_table(table)
    store.duplicates = duplicates
    return store


def write_traffic(store: TrafficStore, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAFFIC_HEADER)
        for i, m in enumerate(store.times):
            ts = format_utc(from_minute(m))
            sp, jm = store.speed[i], store.jam[i]
            for j, k in enumerate(store.keys):
                if math.isnan(sp[j]):
                    continue
                w.writerow([ts, k, repr(float(sp[j])), "" if math.isnan(jm[j]) else repr(float(jm[j]))])


# ---------------------------------------------------------------- events

@dataclass(frozen=True)
class Event:
    event_id: str
    event_type: str
    start: datetime
    end: datetime
    location: tuple  # (lat, lon)
    attendance: Optional[int] = None

    def __post_init__(self):
        if self.event_type not in EVENT_TYPES:
            raise DataError(f"event {self.event_id}: unknown type {self.event_type!r}")
        if self.start > self.end:
            raise DataError(f"event {self.event_id}: start after end")
        lat, lon = self.location
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise DataError(f"event {self.event_id}: location out of range")
        if self.attendance is not None and self.attendance < 0:
            raise DataError(f"event {self.event_id}: negative attendance")


def load_events(path) -> list:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                att = rec.get("attendance")
                ev = Event(
                    event_id=str(rec["event_id"]),
                    event_type=rec["type"],
                    start=parse_utc(rec["start_utc"]),
                    end=parse_utc(rec["end_utc"]),
                    location=(float(rec["lat"]), float(rec["lon"])),
                    attendance=None if att is None else int(att),
                )
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing required field {exc}") from exc
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            events.append(ev)
    return sorted(events, key=lambda e: (e.start, e.event_id))


def write_events(events: Sequence[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            rec = {
                "event_id": e.event_id,
                "type": e.event_type,
                "start_utc": format_utc(e.start),
                "end_utc": format_utc(e.end),
                "lat": e.location[0],
                "lon": e.location[1],
            }
            if e.attendance is not None:
                rec["attendance"] = e.attendance
            fh.write(json.dumps(rec) + "\n")


def read_inputs(segments_path, traffic_path, events_path=None):
    segs = load_segments(segments_path)
    store = load_traffic(traffic_path)
    events = load_events(events_path) if events_path and Path(events_path).exists() else []
    return segs, store, events
