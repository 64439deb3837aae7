"""One-hot input features, event-window labels and the labeled-sample manifest."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .raster import Tci

DEFAULT_TZ = "America/Chicago"
N_FEATURES = 31  # 24 hours + 7 weekdays
N_WINDOWS = 8
N_CLASSES = 1 + N_WINDOWS
MANIFEST_HEADER = ["tci_path", "hour", "weekday", "is_nrc", "window"]


@lru_cache(maxsize=None)
def _zone(tz: str) -> ZoneInfo:
    return ZoneInfo(tz)


@dataclass(frozen=True)
class TimeFeatures:
    hour: int
    weekday: int  # 0 = Sunday

    def __post_init__(self):
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour {self.hour} outside [0, 23]")
        if not 0 <= self.weekday <= 6:
            raise ValueError(f"weekday {self.weekday} outside [0, 6]")

    @classmethod
    def at(cls, t: datetime, tz: str = DEFAULT_TZ) -> "TimeFeatures":
        local = t.astimezone(_zone(tz))
        return cls(local.hour, (local.weekday() + 1) % 7)

    def vector(self) -> np.ndarray:
        v = np.zeros(N_FEATURES)
        v[self.hour] = 1.0
        v[24 + self.weekday] = 1.0
        return v


@dataclass(frozen=True)
class EventLabel:
    is_nrc: bool
    window: Optional[int] = None

    def __post_init__(self):
        if self.is_nrc:
            if self.window is None or not 0 <= self.window < N_WINDOWS:
                raise ValueError(f"NRC label needs a window in [0, {N_WINDOWS - 1}]")
        elif self.window is not None:
            raise ValueError("recurring label cannot carry a window")

    @property
    def class_index(self) -> int:
        return 0 if not self.is_nrc else self.window + 1

    @classmethod
    def from_class(cls, k: int) -> "EventLabel":
        if not 0 <= k < N_CLASSES:
            raise ValueError(f"class index {k} outside [0, {N_CLASSES - 1}]")
        return cls(False) if k == 0 else cls(True, k - 1)


RECURRING = EventLabel(False)


def encode_time(t: datetime, tz: str = DEFAULT_TZ) -> np.ndarray:
    """31-entry one-hot: local hour at ``[0, 24)``, weekday (Sunday = 0) at ``[24, 31)``."""
    return TimeFeatures.at(t, tz).vector()


def label_for(
    t: datetime,
    events: Sequence,
    window_len: timedelta = timedelta(hours=1),
    windows_before: int = 4,
    windows_after: int = 4,
) -> EventLabel:
    """Event window containing ``t``.

    Windows are left-closed, anchored to each event's start and tile
    ``[start - windows_before * window_len, start + windows_after * window_len)``.
    When several events qualify the nearest start wins, then the smaller event id.
    """
    lead = windows_before * window_len
    span = (windows_before + windows_after) * window_len
    best = None
    for ev in events:
        offset = t - (ev.start - lead)
        if timedelta(0) <= offset < span:
            rank = (abs(t - ev.start), ev.event_id)
            if best is None or rank < best[0]:
                best = (rank, offset // window_len)
    if best is None:
        return RECURRING
    return EventLabel(True, int(best[1]))


def encode_label(label: EventLabel) -> np.ndarray:
    v = np.zeros(N_CLASSES)
    v[label.class_index] = 1.0
    return v


def decode_label(vec) -> EventLabel:
    vec = np.asarray(vec)
    if vec.shape != (N_CLASSES,) or np.count_nonzero(vec) != 1 or vec.max() != 1:
        raise ValueError("not a one-hot label vector")
    return EventLabel.from_class(int(np.argmax(vec)))


@dataclass(frozen=True)
class LabeledSample:
    tci: Tci
    features: TimeFeatures
    label: EventLabel

    @property
    def class_index(self) -> int:
        return self.label.class_index

    @property
    def timestamp(self):
        return self.tci.timestamp


def make_sample(tci: Tci, events: Sequence, tz: str = DEFAULT_TZ) -> LabeledSample:
    return LabeledSample(tci, TimeFeatures.at(tci.timestamp, tz), label_for(tci.timestamp, events))


def stack(samples: Sequence[LabeledSample]):
    """Arrays for the network: images ``(N, 1, W, W)`` scaled to [0, 1],
    features ``(N, 31)`` and class indices ``(N,)``."""
    x = np.stack([s.tci.pixels for s in samples]).astype(np.float64)[:, None] / 255.0
    f = np.stack([s.features.vector() for s in samples])
    y = np.array([s.class_index for s in samples], dtype=np.int64)
    return x, f, y


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRow:
    tci_path: str
    hour: int
    weekday: int
    is_nrc: bool
    window: Optional[int]

    @property
    def features(self) -> TimeFeatures:
        return TimeFeatures(self.hour, self.weekday)

    @property
    def label(self) -> EventLabel:
        return EventLabel(self.is_nrc, self.window)


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([r.tci_path, r.hour, r.weekday, int(r.is_nrc), "" if r.window is None else r.window])


def read_manifest(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            try:
                p, h, wd, nrc, win = rec
                row = ManifestRow(p, int(h), int(wd), bool(int(nrc)), int(win) if win else None)
                row.features, row.label  # validate ranges
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            rows.append(row)
    return rows


def load_samples(manifest_path) -> list:
    """Read a manifest and the TCIs it references (paths relative to the manifest)."""
    from .raster import read_tci

    base = Path(manifest_path).parent
    out = []
    for r in read_manifest(manifest_path):
        out.append(LabeledSample(read_tci(base / r.tci_path), r.features, r.label))
    return out


def manifest_row(sample: LabeledSample, tci_path: str) -> ManifestRow:
    return ManifestRow(tci_path, sample.features.hour, sample.features.weekday,
                       sample.label.is_nrc, sample.label.window)
