"""``dxnat`` command line: one subcommand per pipeline stage, one JSON config.

Every subcommand takes ``--config <path> --seed <u64> --out <dir>``; flags
override config values. Relative paths in the config resolve against the
config file's directory, except ``--out`` which resolves against the working
directory. Progress and errors go to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time as _time
from dataclasses import dataclass, field, fields, replace
from datetime import date, time, timedelta
from pathlib import Path
from typing import Optional

from . import __version__
from .augment import CrossoverConfig, balance
from .encode import DEFAULT_TZ, load_samples, manifest_row, write_manifest
from .evaltune import score_samples, metrics_for, roc_sweep, segment_diff, window_hits, write_report
from .geodata import DataError, load_events, load_segments, load_traffic, parse_utc, to_minute
from .neuralnet import DEFAULT_LAYERS, ModelFileError, Network, TrainConfig, load, load_architecture, save, train
from .pipeline import local_date, rasterize_store
from .raster import DEFAULT_CELL_SIZE, Fallback, build_grid, render_diff, write_tci
from .synthgen import ScenarioSpec, acceptance_spec, write_scenario

log = logging.getLogger("dxnat")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class DiffConfig:
    days_a: tuple = ()
    days_b: tuple = ()
    window: tuple = ("11:00", "12:00")
    field: str = "speed"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. Paths are absolute once loaded."""

    out: Path = Path("run")
    data_dir: Optional[Path] = None
    segments: Optional[Path] = None
    traffic: Optional[Path] = None
    events: Optional[Path] = None
    scenario: object = None  # inline dict, path, "acceptance" or None
    bbox: Optional[tuple] = None
    cell_size: float = DEFAULT_CELL_SIZE
    width: int = 32
    timezone: str = DEFAULT_TZ
    fallback: Fallback = Fallback.ZERO
    start: Optional[str] = None
    end: Optional[str] = None
    test_days: tuple = ()
    target_per_class: int = 800
    crossover: CrossoverConfig = field(default_factory=CrossoverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: object = None  # layer list, path or None for the default
    seed: Optional[int] = None
    deterministic: bool = True
    diff: DiffConfig = field(default_factory=DiffConfig)

    def __post_init__(self):
        if self.deterministic and self.seed is None:
            raise CliError("deterministic run requested but no seed given (set \"seed\" or pass --seed)")
        if self.seed is not None and not 0 <= self.seed < 2 ** 64:
            raise CliError("seed must be an unsigned 64-bit integer")
        if self.width < 8:
            raise CliError("width must be at least 8")
        data = self.data_dir or self.out / "data"
        for name, default in (("segments", "segments.jsonl"), ("traffic", "traffic.csv"), ("events", "events.jsonl")):
            if getattr(self, name) is None:
                object.__setattr__(self, name, data / default)
        object.__setattr__(self, "data_dir", data)

    # derived locations
    def path(self, name: str) -> Path:
        return self.out / name

    def layers(self) -> list:
        if self.architecture is None:
            return DEFAULT_LAYERS
        if isinstance(self.architecture, (str, Path)):
            return load_architecture(self.architecture)
        return list(self.architecture)


def _resolve(base: Path, p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw = {}
    base = Path.cwd()
    if path is not None:
        cp = Path(path)
        if not cp.is_file():
            raise CliError(f"config not found: {cp}")
        try:
            raw = json.loads(cp.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{cp}: invalid JSON ({exc})") from exc
        base = cp.resolve().parent
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    seed = raw.get("seed")
    seed = None if seed is None else int(seed)

    kw = dict(raw)
    kw["seed"] = seed
    for name in ("data_dir", "segments", "traffic", "events"):
        kw[name] = _resolve(base, raw.get(name))
    kw["out"] = _resolve(Path.cwd(), overrides["out"]) if overrides.get("out") else _resolve(base, raw.get("out", "run"))
    if isinstance(raw.get("scenario"), str) and raw["scenario"] != "acceptance":
        kw["scenario"] = _resolve(base, raw["scenario"])
    if isinstance(raw.get("architecture"), str):
        kw["architecture"] = _resolve(base, raw["architecture"])
    if raw.get("bbox") is not None:
        kw["bbox"] = tuple(float(x) for x in raw["bbox"])
    try:
        if "fallback" in raw:
            kw["fallback"] = Fallback(raw["fallback"])
        kw["test_days"] = tuple(date.fromisoformat(d) for d in raw.get("test_days", ()))
        cx = dict(raw.get("crossover", {}))
        if "t_minutes" in cx:
            cx["t"] = timedelta(minutes=cx.pop("t_minutes"))
        tr = dict(raw.get("train", {}))
        if seed is not None:
            cx["seed"] = tr["seed"] = seed
        kw["crossover"] = CrossoverConfig(**cx)
        kw["train"] = TrainConfig(**tr)
        d = dict(raw.get("diff", {}))
        for k in ("days_a", "days_b"):
            d[k] = tuple(date.fromisoformat(x) for x in d.get(k, ()))
        if "window" in d:
            d["window"] = tuple(d["window"])
        kw["diff"] = DiffConfig(**d)
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


# ---------------------------------------------------------------- helpers

def _require(*paths: Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise CliError(f"input not found: {p}")


def _inputs(cfg: RunConfig):
    _require(cfg.segments, cfg.traffic)
    segs = load_segments(cfg.segments)
    store = load_traffic(cfg.traffic)
    events = load_events(cfg.events) if cfg.events.exists() else []
    return segs, store, events


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(cfg: RunConfig, path: Optional[str]) -> Network:
    p = Path(path) if path else cfg.path("model.dxnat")
    if not p.exists():
        raise CliError(f"model not found: {p} (run `dxnat train` first)")
    return load(p)


def _manifest(cfg: RunConfig, override: Optional[str], default: str) -> Path:
    p = Path(override) if override else cfg.path(default)
    if not p.exists():
        raise CliError(f"manifest not found: {p}")
    return p


def _minute_range(cfg: RunConfig, store, start: Optional[str], end: Optional[str]):
    start, end = start or cfg.start, end or cfg.end
    if start is None and end is None:
        return None
    lo = to_minute(parse_utc(start)) if start else int(store.times[0])
    hi = to_minute(parse_utc(end)) if end else int(store.times[-1]) + 1
    return [int(m) for m in store.times if lo <= m < hi]


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: RunConfig, args) -> None:
    spec_src = args.spec or cfg.scenario
    if spec_src is None or spec_src == "acceptance":
        spec = acceptance_spec()
    elif isinstance(spec_src, dict):
        spec = ScenarioSpec.from_dict(spec_src)
    else:
        _require(spec_src)
        spec = ScenarioSpec.from_json(spec_src)
    if cfg.seed is not None:
        spec = replace(spec, seed=cfg.seed)
    paths = write_scenario(spec, cfg.data_dir)
    log.info("synth done", extra={"fields": {"dir": str(cfg.data_dir), "days": spec.days,
                                            "segments": spec.n_segments, "events": len(spec.events)}})
    return paths


def cmd_rasterize(cfg: RunConfig, args) -> None:
    segs, store, events = _inputs(cfg)
    grid = build_grid(segs, cfg.bbox, cfg.cell_size)
    minutes = _minute_range(cfg, store, args.start, args.end)
    samples = rasterize_store(store, grid, events, cfg.width, cfg.fallback, cfg.timezone, minutes)
    tci_dir = cfg.path("tci")
    tci_dir.mkdir(parents=True, exist_ok=True)
    rows, train_rows, test_rows = [], [], []
    test_days = set(cfg.test_days)
    for s in samples:
        name = f"tci/{s.timestamp.strftime('%Y%m%dT%H%M')}.pgm"
        write_tci(s.tci, cfg.out / name)
        row = manifest_row(s, name)
        rows.append(row)
        (test_rows if local_date(s, cfg.timezone) in test_days else train_rows).append(row)
    write_manifest(rows, cfg.path("manifest.csv"))
    write_manifest(train_rows, cfg.path("manifest_train.csv"))
    write_manifest(test_rows, cfg.path("manifest_test.csv"))
    _write_json(cfg.path("grid.json"), {"grid_id": grid.grid_id, "rows": grid.rows, "cols": grid.cols,
                                       "bbox": list(grid.bbox), "cell_size": grid.cell_size,
                                       "skipped_vertices": grid.skipped, "width": cfg.width})
    log.info("rasterize done", extra={"fields": {"tcis": len(rows), "train": len(train_rows),
                                                "test": len(test_rows), "grid": grid.grid_id}})


def cmd_augment(cfg: RunConfig, args) -> None:
    src = _manifest(cfg, args.manifest, "manifest_train.csv")
    samples = load_samples(src)
    target = args.target if args.target is not None else cfg.target_per_class
    balanced = balance(samples, target, cfg.crossover)
    aug_dir = cfg.path("augmented")
    aug_dir.mkdir(parents=True, exist_ok=True)
    for old in aug_dir.glob("*.pgm"):
        old.unlink()
    base = src.parent.resolve()
    original = {id(s): p for s, p in zip(samples, _manifest_paths(src))}
    rows, n_new = [], 0
    for s in balanced:
        if id(s) in original:
            rel = _relative((base / original[id(s)]).resolve(), cfg.out.resolve())
        else:
            rel = f"augmented/{n_new:06d}.pgm"
            write_tci(s.tci, cfg.out / rel)
            n_new += 1
        rows.append(manifest_row(s, rel))
    write_manifest(rows, cfg.path("manifest_augmented.csv"))
    log.info("augment done", extra={"fields": {"samples": len(rows), "offspring": n_new, "per_class": target}})


def _manifest_paths(path: Path) -> list:
    with open(path, newline="") as fh:
        return [r["tci_path"] for r in csv.DictReader(fh)]


def _relative(p: Path, base: Path) -> str:
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)


def cmd_train(cfg: RunConfig, args) -> None:
    src = _manifest(cfg, args.manifest, "manifest_augmented.csv")
    samples = load_samples(src)
    net = Network(cfg.width, cfg.layers(), seed=cfg.train.seed)
    log_path = cfg.path("train_log.jsonl")
    entries = []

    def progress(entry):
        entries.append(entry)
        log.info("epoch", extra={"fields": entry})

    trained, _ = train(net, samples, cfg.train, progress)
    save(trained, cfg.path("model.dxnat"))
    log_path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
    log.info("train done", extra={"fields": {"samples": len(samples), "parameters": trained.n_parameters()}})


def cmd_roc(cfg: RunConfig, args) -> None:
    net = _load_model(cfg, args.model)
    samples = load_samples(_manifest(cfg, args.manifest, "manifest_train.csv"))
    _, scored = score_samples(net, samples)
    res = roc_sweep(scored)
    res.write_csv(cfg.path("roc.csv"))
    th, fpr, tpr = res.chosen_point
    _write_json(cfg.path("threshold.json"), {"threshold": th, "fpr": fpr, "tpr": tpr})
    log.info("roc done", extra={"fields": {"threshold": th, "fpr": fpr, "tpr": tpr}})


def cmd_eval(cfg: RunConfig, args) -> None:
    net = _load_model(cfg, args.model)
    if args.threshold is not None:
        th = float(args.threshold)
    else:
        tp = cfg.path("threshold.json")
        if not tp.exists():
            raise CliError(f"threshold not found: {tp} (run `dxnat roc` or pass --threshold)")
        th = json.loads(tp.read_text())["threshold"]
    samples = load_samples(_manifest(cfg, args.manifest, "manifest_test.csv"))
    if not samples:
        raise CliError("evaluation manifest is empty")
    probs, scored = score_samples(net, samples)
    m = metrics_for(scored, th)
    hits, total = window_hits(probs, samples)
    extra = {"window_hits": hits, "window_total": total,
             "window_within_1": None if total == 0 else hits / total, "samples": len(samples)}
    write_report(cfg.path("metrics.json"), m, th, extra)
    log.info("eval done", extra={"fields": {**m.as_dict(), **extra, "threshold": th}})


def _parse_days(values) -> tuple:
    return tuple(date.fromisoformat(v) for v in values)


def cmd_diffmap(cfg: RunConfig, args) -> None:
    d = cfg.diff
    days_a = _parse_days(args.days_a) if args.days_a else d.days_a
    days_b = _parse_days(args.days_b) if args.days_b else d.days_b
    window = tuple(args.window) if args.window else d.window
    fld = args.field or d.field
    if not days_a or not days_b:
        raise CliError("diffmap needs --days-a and --days-b (or diff.days_a/days_b in the config)")
    lo, hi = (time.fromisoformat(w) for w in window)
    segs, store, _ = _inputs(cfg)
    diffs = segment_diff(store, segs, days_a, days_b, (lo, hi), fld, cfg.timezone)
    if not diffs:
        raise CliError("no segment has data on both day sets in the window")
    grid = build_grid(segs, cfg.bbox, cfg.cell_size)
    img = render_diff(grid, diffs, {}, cfg.width)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_tci(img, cfg.path("diff.pgm"))
    with open(cfg.path("diff.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "diff"])
        for k in sorted(diffs):
            w.writerow([k, repr(diffs[k])])
    log.info("diffmap done", extra={"fields": {"segments": len(diffs), "field": fld,
                                              "min": min(diffs.values()), "max": max(diffs.values())}})


COMMANDS = {
    "synth": cmd_synth,
    "rasterize": cmd_rasterize,
    "augment": cmd_augment,
    "train": cmd_train,
    "roc": cmd_roc,
    "eval": cmd_eval,
    "diffmap": cmd_diffmap,
}


# ---------------------------------------------------------------- entry point

class JsonLines(logging.Formatter):
    def format(self, record):
        obj = {"level": record.levelname.lower(), "msg": record.getMessage()}
        obj.update(getattr(record, "fields", {}))
        if getattr(record, "command", None):
            obj["command"] = record.command
        return json.dumps(obj, sort_keys=True, default=str)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_dxnat", False):
            root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h._dxnat = True
    h.setFormatter(JsonLines())
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed for every random stage")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--width", type=int, help="TCI width in pixels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dxnat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dxnat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scenario")
    s.add_argument("--spec", help="scenario JSON (default: the config's scenario, else the acceptance scenario)")
    s = sub.add_parser("rasterize", parents=[common], help="render one TCI per minute and write manifests")
    s.add_argument("--start", help="first UTC instant (ISO 8601)")
    s.add_argument("--end", help="end UTC instant, exclusive")
    s = sub.add_parser("augment", parents=[common], help="balance classes with crossover offspring")
    s.add_argument("--target", type=int, help="samples per class")
    s.add_argument("--manifest")
    s = sub.add_parser("train", parents=[common], help="train the classifier")
    s.add_argument("--manifest")
    s = sub.add_parser("roc", parents=[common], help="sweep thresholds and pick TH")
    s.add_argument("--model")
    s.add_argument("--manifest")
    s = sub.add_parser("eval", parents=[common], help="metrics on the held-out days")
    s.add_argument("--model")
    s.add_argument("--manifest")
    s.add_argument("--threshold", type=float)
    s = sub.add_parser("diffmap", parents=[common], help="per-segment difference heatmap")
    s.add_argument("--days-a", nargs="+")
    s.add_argument("--days-b", nargs="+")
    s.add_argument("--window", nargs=2, metavar=("START", "END"), help="local times, e.g. 11:00 12:00")
    s.add_argument("--field", choices=["speed", "jam_factor"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    t0 = _time.perf_counter()
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "width": args.width})
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (CliError, DataError, ModelFileError, ValueError, OSError) as exc:
        log.error(str(exc), extra={"command": args.command})
        return 2
    log.info("finished", extra={"command": args.command,
                                "fields": {"seconds": round(_time.perf_counter() - t0, 3)}})
    return 0


if __name__ == "__main__":
    sys.exit(main())
