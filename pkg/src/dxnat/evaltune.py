"""Decision rule, ROC threshold sweep, confusion metrics and per-segment differences.

Positive means non-recurring congestion (NRC). A sample is called recurring
only when its class-0 probability is strictly above the threshold, so a score
equal to the threshold counts as NRC.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from datetime import date, time
from typing import Optional, Sequence

import numpy as np

from .encode import DEFAULT_TZ, EventLabel, _zone, stack
from .geodata import SegmentSet, TrafficStore, from_minute

THRESHOLDS = np.arange(1, 101) / 100.0


@dataclass(frozen=True)
class ScoredSample:
    score_recurring: float
    truth: EventLabel

    def __post_init__(self):
        if not 0.0 <= self.score_recurring <= 1.0:
            raise ValueError(f"score {self.score_recurring} outside [0, 1]")


def decide(sample: ScoredSample, th: float) -> bool:
    """True (NRC) unless the recurring score is strictly above ``th``."""
    return not sample.score_recurring > th


@dataclass(frozen=True)
class RocResult:
    points: tuple  # (threshold, fpr, tpr)
    chosen: float

    @property
    def chosen_point(self):
        return next(p for p in self.points if p[0] == self.chosen)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for th, fpr, tpr in self.points:
                w.writerow([f"{th:.2f}", repr(fpr), repr(tpr)])


def distance_to_corner(fpr: float, tpr: float) -> float:
    return math.hypot(fpr, 1.0 - tpr)


def roc_sweep(samples: Sequence[ScoredSample]) -> RocResult:
    """FPR/TPR at thresholds 0.01..1.00; picks the point closest to (0, 1),
    the smallest threshold on ties."""
    scores = np.array([s.score_recurring for s in samples], dtype=np.float64)
    pos = np.array([s.truth.is_nrc for s in samples], dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC sweep needs at least one positive and one negative sample")
    points, best = [], None
    for th in THRESHOLDS:
        called = ~(scores > th)
        tp = int(np.count_nonzero(called & pos))
        fp = int(np.count_nonzero(called & ~pos))
        points.append((float(th), fp / n_neg, tp / n_pos))
        # squared distance scaled by (n_pos * n_neg)^2, exact in integers so ties are real ties
        d = (fp * n_pos) ** 2 + ((n_pos - tp) * n_neg) ** 2
        if best is None or d < best[0]:
            best = (d, float(th))
    return RocResult(tuple(points), best[1])


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def fpr(self) -> Optional[float]:
        return None if self.fp + self.tn == 0 else self.fp / (self.fp + self.tn)

    @property
    def fnr(self) -> Optional[float]:
        return None if self.fn + self.tp == 0 else self.fn / (self.fn + self.tp)

    @classmethod
    def from_decisions(cls, predicted, truth) -> "Metrics":
        p = np.asarray(predicted, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(accuracy=self.accuracy, fpr=self.fpr, fnr=self.fnr)
        return d


def score_samples(net, dataset) -> tuple:
    """Network probabilities for a list of LabeledSample: ``(probs, ScoredSamples)``."""
    x, f, _ = stack(dataset)
    probs = net.predict(x, f)
    scored = [ScoredSample(float(np.clip(p[0], 0.0, 1.0)), s.label) for p, s in zip(probs, dataset)]
    return probs, scored


def evaluate(net, dataset, th: float) -> Metrics:
    if not dataset:
        raise ValueError("empty dataset")
    _, scored = score_samples(net, dataset)
    return metrics_for(scored, th)


def metrics_for(scored: Sequence[ScoredSample], th: float) -> Metrics:
    if not scored:
        raise ValueError("empty dataset")
    return Metrics.from_decisions([decide(s, th) for s in scored], [s.truth.is_nrc for s in scored])


def window_hits(probs, dataset, tolerance: int = 1) -> tuple:
    """Among true-NRC samples, how many have ``argmax`` over the window classes
    within ``tolerance`` of the true window. Returns ``(hits, total)``."""
    hits = total = 0
    for p, s in zip(probs, dataset):
        if s.label.is_nrc:
            total += 1
            hits += abs(int(np.argmax(p[1:])) - s.label.window) <= tolerance
    return hits, total


def write_report(path, metrics: Metrics, threshold: float, extra: Optional[dict] = None) -> None:
    report = {"threshold": threshold, **metrics.as_dict()}
    if extra:
        report.update(extra)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- segment differences

def _local_calendar(times, tz: str):
    zone = _zone(tz)
    local = [from_minute(m).astimezone(zone) for m in times]
    days = np.array([d.date() for d in local])
    minute_of_day = np.array([d.hour * 60 + d.minute for d in local])
    return days, minute_of_day


def segment_diff(
    store: TrafficStore,
    keys,
    days_a: Sequence[date],
    days_b: Sequence[date],
    window: tuple,
    field: str = "jam_factor",
    tz: str = DEFAULT_TZ,
) -> dict:
    """Per segment: mean of ``field`` over ``days_a`` minus mean over ``days_b``,
    both restricted to the local time-of-day interval ``window = (start, end)``
    (left-closed). ``keys`` may be a SegmentSet or any iterable of keys.
    Segments lacking data on either side are omitted."""
    if not days_a or not days_b:
        raise ValueError("both day lists must be non-empty")
    if field not in ("jam_factor", "speed"):
        raise ValueError(f"unknown field {field!r}")
    data = store.jam if field == "jam_factor" else store.speed
    start, end = window
    lo = start.hour * 60 + start.minute if isinstance(start, time) else int(start)
    hi = end.hour * 60 + end.minute if isinstance(end, time) else int(end)
    days, mod = _local_calendar(store.times, tz)
    in_win = (mod >= lo) & (mod < hi)
    sel_a = in_win & np.isin(days, list(days_a))
    sel_b = in_win & np.isin(days, list(days_b))
    out = {}
    for k in keys.keys if isinstance(keys, SegmentSet) else keys:
        j = store.key_index(k)
        if j is None:
            continue
        a, b = data[sel_a, j], data[sel_b, j]
        a, b = a[~np.isnan(a)], b[~np.isnan(b)]
        if a.size and b.size:
            out[k] = float(a.mean() - b.mean())
    return out
