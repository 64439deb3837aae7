"""Acceptance criteria. Each test prints one ``[PASS]``/``[FAIL]`` line; the
lines are repeated in the terminal summary under "acceptance criteria"."""
import csv
import json
import math
import subprocess
import sys
import time
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dxnat.augment import CrossoverConfig, crossover, crossover_samples
from dxnat.encode import EventLabel, LabeledSample, TimeFeatures
from dxnat.evaltune import THRESHOLDS, ScoredSample, decide, distance_to_corner, roc_sweep
from dxnat.geodata import RoadSegment, SegmentSet, load_segments
from dxnat.neuralnet import (ConcatFeatures, Conv2D, Dense, Dropout, Flatten, MaxPool2x2, ReLU, Softmax,
                             build_default, check_layer, check_network)
from dxnat.raster import Tci, build_grid, speed_to_pixel
from dxnat.synthgen import acceptance_spec, centroid_distances

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.json"
BBOX = (36.1470, 36.1586, -86.8126, -86.8009)
T0 = datetime(2016, 10, 9, 18, 0, tzinfo=timezone.utc)


# ---------------------------------------------------------------- speed to pixel

def test_speed_to_pixel_exact(criterion):
    t = time.perf_counter()
    got, want = {}, {}
    for v in (0, 1, 10, 40, 79, 80, 81, 200):
        want[v] = math.floor((80 - Fraction(v)) * 255 / 80 + Fraction(1, 2)) if 0 <= v <= 80 else 0
        got[v] = int(speed_to_pixel(v))
    dt = time.perf_counter() - t
    ok = got == want and want == {0: 255, 1: 252, 10: 223, 40: 128, 79: 3, 80: 0, 81: 0, 200: 0} and dt < 1
    assert criterion("speed-to-pixel exactness", ok, f"{got} in {dt:.4f}s")


# ---------------------------------------------------------------- connectivity

def _connected(cells):
    cells = set(cells)
    start = next(iter(cells))
    seen, stack = {start}, [start]
    while stack:
        r, c = stack.pop()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nb = (r + dr, c + dc)
                if nb in cells and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
    return seen == cells


def test_rasterization_connectivity(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(2016)
    bad = 0
    for i in range(1000):
        n = int(rng.integers(2, 9))
        pts = tuple((float(rng.uniform(BBOX[0], BBOX[1])), float(rng.uniform(BBOX[2], BBOX[3]))) for _ in range(n))
        segs = SegmentSet((RoadSegment(f"k{i}", 45, pts),))
        grid = build_grid(segs, BBOX)
        cells = grid.cells_for(f"k{i}")
        vertices = {grid.cell_of(*p) for p in pts}
        bad += not (cells and _connected(cells) and vertices <= set(cells))
    dt = time.perf_counter() - t
    assert criterion("rasterization connectivity", bad == 0 and dt < 30,
                     f"{1000 - bad}/1000 polylines 8-connected in {dt:.1f}s")


# ---------------------------------------------------------------- crossover provenance

def test_crossover_provenance(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(99)
    rows_ok = labels_ok = identity_ok = 0
    trials = 10_000
    for j in range(trials):
        k, w = int(rng.integers(1, 7)), int(rng.integers(4, 33))
        label = EventLabel.from_class(int(rng.integers(0, 9)))
        feats = TimeFeatures(int(rng.integers(24)), int(rng.integers(7)))
        group = [LabeledSample(Tci(rng.integers(0, 256, (w, w)).astype(np.uint8), T0 - timedelta(minutes=k - 1 - i), "g"),
                               feats, label) for i in range(k)]
        base = int(rng.integers(k))
        cfg = CrossoverConfig(p_m=float(rng.uniform()), seed=int(rng.integers(2**63)))
        child = crossover_samples(group, base, cfg, j)
        rows_ok += all(any(np.array_equal(child.tci.pixels[r], g.tci.pixels[r]) for g in group) for r in range(w))
        labels_ok += child.label == label
        identity_ok += crossover([g.tci for g in group], base, CrossoverConfig(p_m=0.0, seed=j), j) == group[base].tci
    dt = time.perf_counter() - t
    ok = rows_ok == labels_ok == identity_ok == trials and dt < 30
    assert criterion("crossover provenance", ok,
                     f"rows {rows_ok}/{trials}, labels {labels_ok}/{trials}, p_m=0 identity {identity_ok}/{trials}, "
                     f"{dt:.1f}s")


# ---------------------------------------------------------------- gradients

def test_gradient_verification(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    setups = [
        (Conv2D(4, 3), (2, 8, 8), None),
        (ReLU(), (3, 6, 6), None),
        (MaxPool2x2(), (2, 8, 8), None),
        (Dropout(0.25), (2, 5, 5), None),
        (Flatten(), (2, 4, 4), None),
        (ConcatFeatures(), (20,), "feats"),
        (Dense(9), (40,), None),
        (Softmax(), (9,), None),
    ]
    worst = {}
    for layer, shape, f in setups:
        layer.build(shape, rng)
        x = rng.standard_normal((3, *shape))
        feats = np.eye(31)[rng.integers(0, 31, 3)] if f else None
        worst[layer.kind] = max(check_layer(layer, x, feats, h=1e-5).values())
    net = build_default(16, seed=3)
    x = rng.random((2, 1, 16, 16))
    feats = np.zeros((2, 31))
    feats[[0, 1], [8, 17]] = 1
    feats[[0, 1], [24 + 3, 24 + 0]] = 1
    worst["network(I_w=16)"] = max(check_network(net, x, feats, [0, 6], h=1e-5).values())
    dt = time.perf_counter() - t
    ok = max(worst.values()) < 1e-4 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion("gradient verification", ok, f"max relative error {detail}; {dt:.1f}s")


# ---------------------------------------------------------------- ROC

def _random_score_sets(n_sets=50, seed=11):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n = int(rng.integers(20, 400))
        truth = rng.random(n) < rng.uniform(0.1, 0.9)
        truth[:2] = [True, False]
        # NRC samples lean towards low recurring scores; some scores land exactly on grid points
        scores = np.clip(rng.beta(2, 5, n) * truth + rng.beta(5, 2, n) * ~truth, 0, 1)
        scores[rng.random(n) < 0.2] = rng.integers(0, 101, 1)[0] / 100
        yield [ScoredSample(float(s), EventLabel(True, 0) if t else EventLabel(False)) for s, t in zip(scores, truth)]


def _exhaustive(samples):
    pos = sum(s.truth.is_nrc for s in samples)
    neg = len(samples) - pos
    best = None
    for th in THRESHOLDS:
        tp = sum(decide(s, th) and s.truth.is_nrc for s in samples)
        fp = sum(decide(s, th) and not s.truth.is_nrc for s in samples)
        d = Fraction(fp, neg) ** 2 + Fraction(pos - tp, pos) ** 2
        best = d if best is None else min(best, d)
    return math.sqrt(best)


def test_roc_correctness(criterion):
    t = time.perf_counter()
    optimal = monotone = 0
    for samples in _random_score_sets():
        res = roc_sweep(samples)
        optimal += math.isclose(distance_to_corner(*res.chosen_point[1:]), _exhaustive(samples), rel_tol=0, abs_tol=1e-12)
        fpr = [p[1] for p in res.points]
        tpr = [p[2] for p in res.points]
        monotone += all(np.diff(fpr) >= 0) and all(np.diff(tpr) >= 0)
    dt = time.perf_counter() - t
    ok = optimal == 50 and monotone == 50 and dt < 10
    assert criterion("ROC correctness", ok,
                     f"chosen TH optimal in {optimal}/50 sets; FPR/TPR monotone (non-decreasing in TH, "
                     f"see next line) in {monotone}/50; {dt:.2f}s")


@pytest.mark.xfail(strict=True, reason="with NRC called when score <= TH, raising TH can only add positive calls, "
                                       "so FPR/TPR rise with TH; the literal 'non-increasing' wording cannot hold")
def test_roc_literal_non_increasing(criterion):
    samples = next(_random_score_sets(1))
    res = roc_sweep(samples)
    fpr = [p[1] for p in res.points]
    tpr = [p[2] for p in res.points]
    ok = all(np.diff(fpr) <= 0) and all(np.diff(tpr) <= 0)
    criterion("ROC rates non-increasing in TH (literal wording)", ok,
              f"FPR goes {fpr[0]:.3f} -> {fpr[-1]:.3f}, TPR {tpr[0]:.3f} -> {tpr[-1]:.3f}; expected failure, "
              f"documented conflict", expected_failure=True)
    assert ok


# ---------------------------------------------------------------- end to end

STAGES = ("synth", "rasterize", "augment", "train", "roc", "eval", "diffmap")


def _run_pipeline(out: Path) -> dict:
    times = {}
    for stage in STAGES:
        t = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "dxnat.cli", stage, "--config", str(CONFIG), "--out", str(out)],
                              capture_output=True, text=True)
        times[stage] = time.perf_counter() - t
        assert proc.returncode == 0, f"{stage} failed:\n{proc.stderr}"
    return times


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    return (a, _run_pipeline(a)), (b, _run_pipeline(b))


def test_end_to_end_synthetic(runs, criterion):
    (out, times), _ = runs
    m = json.loads((out / "metrics.json").read_text())
    total = sum(times.values()) - times["diffmap"]
    ok = (m["accuracy"] >= 0.95 and m["fpr"] <= 0.05 and m["fnr"] <= 0.10 and m["window_within_1"] >= 0.80
          and total < 600)
    assert criterion("end-to-end synthetic oracle", ok,
                     f"TH {m['threshold']}, accuracy {m['accuracy']:.4f}, FPR {m['fpr']:.4f}, FNR {m['fnr']:.4f}, "
                     f"window +-1 {m['window_within_1']:.4f} ({m['window_hits']}/{m['window_total']}), "
                     f"{total:.0f}s on 1 core")


def test_scenario_shape(runs):
    (out, _), _ = runs
    spec = acceptance_spec()
    assert spec.days == 14 and len(spec.events) == 4 and len({e.day for e in spec.events}) == 4
    assert all(e.severity == 0.8 for e in spec.events)
    test_days = json.loads(CONFIG.read_text())["test_days"]
    event_dates = {str(spec.day_date(e.day)) for e in spec.events}
    assert len(test_days) == 3 and len(set(test_days) & event_dates) == 2
    with open(out / "manifest_test.csv") as fh:
        assert sum(1 for _ in fh) - 1 == 3 * 1440


def test_determinism(runs, criterion):
    (a, _), (b, _) = runs
    names = ("model.dxnat", "metrics.json", "roc.csv", "threshold.json", "train_log.jsonl", "manifest_augmented.csv")
    same = {n: (a / n).read_bytes() == (b / n).read_bytes() for n in names}
    assert criterion("determinism", all(same.values()),
                     ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in same.items()))


def test_diff_heatmap_sanity(runs, criterion):
    (out, _), _ = runs
    segs = load_segments(out / "data" / "segments.jsonl")
    spec = acceptance_spec()
    with open(out / "diff.csv") as fh:
        diffs = {r["key"]: float(r["diff"]) for r in csv.DictReader(fh)}
    radius = spec.events[0].radius_m
    dist = dict(zip(segs.keys, centroid_distances(segs, spec.center)))
    inside = [diffs[k] for k in segs.keys if dist[k] < radius]
    outside = [diffs[k] for k in segs.keys if dist[k] >= radius]
    ok = bool(inside) and bool(outside) and max(inside) < min(outside)
    share = sum(d < min(outside) for d in inside) / len(inside)
    assert criterion("diff-heatmap sanity", ok,
                     f"{share:.0%} of {len(inside)} in-radius segments below every one of {len(outside)} outside "
                     f"(max inside {max(inside):.3f} mph, min outside {min(outside):.3f} mph)")
