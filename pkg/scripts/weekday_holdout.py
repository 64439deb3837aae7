"""Train and evaluate with a configurable event calendar, in-process.

The acceptance scenario puts events on weekdays that also appear with events in
training. This script lets you move them, e.g. to test on a weekday the
network never saw an event on:

    python3 scripts/weekday_holdout.py --event-days 2 6 10 12 --test-days 10 11 12

It prints the metrics, the per-(day, window) count of missed NRC minutes and
writes ``summary.json`` to ``--out``.
"""
import argparse
import json
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

from dxnat import evaltune, neuralnet, synthgen
from dxnat.augment import CrossoverConfig, balance
from dxnat.pipeline import local_date, rasterize_store, split_by_days
from dxnat.raster import build_grid


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--event-days", type=int, nargs="+", default=[2, 6, 9, 13])
    p.add_argument("--test-days", type=int, nargs="+", default=[9, 12, 13])
    p.add_argument("--start", default="12:00", help="local start time of every event")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--target", type=int, default=800)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="runs/weekday_holdout")
    args = p.parse_args()

    t0 = time.perf_counter()
    base = synthgen.acceptance_spec(args.seed)
    events = tuple(replace(base.events[0], day=d, start=args.start) for d in args.event_days)
    spec = replace(base, events=events)
    segs, store, evs = synthgen.generate(spec)
    grid = build_grid(segs, spec.extent)
    samples = rasterize_store(store, grid, evs, args.width)
    train, test = split_by_days(samples, [spec.day_date(d) for d in args.test_days])

    balanced = balance(train, args.target, CrossoverConfig(seed=args.seed))
    net = neuralnet.build_default(args.width, seed=args.seed)
    cfg = neuralnet.TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    net, log = neuralnet.train(net, balanced, cfg, progress=lambda e: print(json.dumps(e), flush=True))

    _, scored_train = evaltune.score_samples(net, train)
    roc = evaltune.roc_sweep(scored_train)
    probs, scored = evaltune.score_samples(net, test)
    m = evaltune.metrics_for(scored, roc.chosen)
    hits, total = evaltune.window_hits(probs, test)
    missed = Counter()
    for s, sc in zip(test, scored):
        if s.label.is_nrc and not evaltune.decide(sc, roc.chosen):
            missed[f"{local_date(s)} w{s.label.window}"] += 1

    summary = {
        "event_days": {str(spec.day_date(d)): spec.day_date(d).strftime("%A") for d in args.event_days},
        "test_days": {str(spec.day_date(d)): spec.day_date(d).strftime("%A") for d in args.test_days},
        "threshold": roc.chosen,
        **m.as_dict(),
        "window_within_1": None if total == 0 else hits / total,
        "missed_nrc_minutes": dict(sorted(missed.items())),
        "seconds": round(time.perf_counter() - t0, 1),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
