"""Traffic Condition Images: grid construction, polyline resampling, speed projection.

A :class:`GridMap` divides a bounding box into square cells (default 8.97 m)
using a local equirectangular approximation. Each cell lists the segment keys
whose polylines pass through it. :func:`project` turns a snapshot of speeds
into an ``I_w x I_w`` 8-bit grayscale :class:`Tci`.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

from .geodata import DataError, SegmentSet, format_utc, parse_utc

METERS_PER_DEG_LAT = 111_320.0
DEFAULT_CELL_SIZE = 8.97
DEFAULT_WIDTH = 64
MAX_SPEED = 80.0


class Fallback(str, enum.Enum):
    """Pixel value used when a cell's keys have no reading."""

    ZERO = "zero"  # render as free flow
    SPEED_LIMIT = "speed_limit"  # assume the segment runs at its speed limit


def meters_per_degree(center_lat: float) -> tuple:
    return METERS_PER_DEG_LAT, METERS_PER_DEG_LAT * math.cos(math.radians(center_lat))


def speed_to_pixel(v):
    """Map speed (mph) to pixel intensity: ``round((80 - v) * 255 / 80)`` on
    ``[0, 80]``, else 0. Rounds half up. Accepts scalars or arrays."""
    v = np.asarray(v, dtype=np.float64)
    inside = (v >= 0.0) & (v <= MAX_SPEED)
    p = np.floor((MAX_SPEED - np.where(inside, v, MAX_SPEED)) * 255.0 / MAX_SPEED + 0.5)
    p = np.where(inside, p, 0.0)
    return p.astype(np.int64) if p.ndim else int(p)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class GridMap:
    bbox: tuple
    cell_size: float
    rows: int
    cols: int
    keys: tuple = ()  # keys of the source segment set
    limits: tuple = ()  # speed limit per key, aligned with ``keys``
    lookup: Mapping = field(default_factory=dict)  # (row, col) -> tuple of keys
    skipped: int = field(default=0, compare=False)

    @property
    def shape(self):
        return self.rows, self.cols

    def cell_of(self, lat: float, lon: float) -> Optional[tuple]:
        """Cell covering a point, or None if the point lies outside the bbox.
        Row 0 is the northern edge."""
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min <= lat <= lat_max and lon_min <= lon <= lon_max):
            return None
        m_lat, m_lon = meters_per_degree(0.5 * (lat_min + lat_max))
        r = int(math.floor((lat_max - lat) * m_lat / self.cell_size))
        c = int(math.floor((lon - lon_min) * m_lon / self.cell_size))
        return min(max(r, 0), self.rows - 1), min(max(c, 0), self.cols - 1)

    def cells_for(self, key: str) -> list:
        return sorted(cell for cell, ks in self.lookup.items() if key in ks)

    @cached_property
    def grid_id(self) -> str:
        payload = json.dumps(
            [list(self.bbox), self.cell_size, self.rows, self.cols,
             sorted([list(cell), list(ks)] for cell, ks in self.lookup.items())]
        )
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    @cached_property
    def _incidence(self):
        # flat cell index and key index for every (cell, key) pair
        kidx = {k: i for i, k in enumerate(self.keys)}
        cells, ks = [], []
        for (r, c), keys in sorted(self.lookup.items()):
            for k in keys:
                cells.append(r * self.cols + c)
                ks.append(kidx[k])
        return np.asarray(cells, dtype=np.int64), np.asarray(ks, dtype=np.int64)


def init_grid(segments: SegmentSet, bbox=None, cell_size: float = DEFAULT_CELL_SIZE) -> GridMap:
    """Empty grid over ``bbox`` (defaults to the segments' own bbox)."""
    bbox = tuple(float(x) for x in (segments.bbox if bbox is None else bbox))
    lat_min, lat_max, lon_min, lon_max = bbox
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if not (lat_max > lat_min and lon_max > lon_min):
        raise ValueError(f"degenerate bounding box {bbox}")
    m_lat, m_lon = meters_per_degree(0.5 * (lat_min + lat_max))
    rows = math.ceil((lat_max - lat_min) * m_lat / cell_size)
    cols = math.ceil((lon_max - lon_min) * m_lon / cell_size)
    return GridMap(
        bbox=bbox,
        cell_size=float(cell_size),
        rows=rows,
        cols=cols,
        keys=tuple(segments.keys),
        limits=tuple(s.speed_limit for s in segments),
    )


def trace_line(r0: int, c0: int, r1: int, c1: int) -> list:
    """Integer cells on the line from ``(r0, c0)`` to ``(r1, c1)`` inclusive
    (Bresenham). Consecutive cells are 8-neighbours."""
    cells = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 > r0 else -1
    sc = 1 if c1 > c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            return cells
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def resample(grid: GridMap, segments: SegmentSet) -> GridMap:
    """Mark every cell crossed by each segment's polyline.

    Vertices outside the bbox are skipped (counted in ``skipped``) and no line
    is traced through them. Existing lookup entries are kept, so the operation
    is idempotent.
    """
    known = set(grid.keys)
    lookup = {cell: list(ks) for cell, ks in grid.lookup.items()}
    skipped = 0
    for seg in segments:
        if seg.key not in known:
            raise DataError(f"segment {seg.key!r} is not part of this grid")
        prev = None
        for lat, lon in seg.points:
            cell = grid.cell_of(lat, lon)
            if cell is None:
                skipped += 1
                prev = None
                continue
            path = [cell] if prev is None else trace_line(*prev, *cell)
            for rc in path:
                ks = lookup.setdefault(rc, [])
                if seg.key not in ks:
                    ks.append(seg.key)
            prev = cell
    return GridMap(
        bbox=grid.bbox,
        cell_size=grid.cell_size,
        rows=grid.rows,
        cols=grid.cols,
        keys=grid.keys,
        limits=grid.limits,
        lookup={cell: tuple(ks) for cell, ks in sorted(lookup.items())},
        skipped=skipped,
    )


def build_grid(segments: SegmentSet, bbox=None, cell_size: float = DEFAULT_CELL_SIZE) -> GridMap:
    return resample(init_grid(segments, bbox, cell_size), segments)


# ---------------------------------------------------------------- resizing

def _axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix: area average when shrinking,
    nearest neighbour when growing."""
    if n_in == n_out:
        return np.eye(n_out)
    m = np.zeros((n_out, n_in))
    if n_in > n_out:
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
                m[i, j] = min(hi, j + 1) - max(lo, j)
        m /= m.sum(axis=1, keepdims=True)
    else:
        for i in range(n_out):
            m[i, min(int((i + 0.5) * n_in / n_out), n_in - 1)] = 1.0
    return m


def resize(raw: np.ndarray, width: int) -> np.ndarray:
    """Resize a real-valued 2-D array to ``width x width`` (floats, not rounded)."""
    rows, cols = raw.shape
    return _axis_matrix(rows, width) @ raw @ _axis_matrix(cols, width).T


# ---------------------------------------------------------------- images

@dataclass(frozen=True, eq=False)
class Tci:
    pixels: np.ndarray
    timestamp: Optional[datetime] = None
    grid_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"TCI must be square, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Tci):
            return NotImplemented
        return (
            np.array_equal(self.pixels, other.pixels)
            and self.timestamp == other.timestamp
            and self.grid_id == other.grid_id
        )


def raw_values(grid: GridMap, speeds: Mapping, fallback: Fallback = Fallback.ZERO) -> np.ndarray:
    """Per-cell mean pixel value at grid resolution (floats)."""
    fallback = Fallback(fallback)
    cell_idx, key_idx = grid._incidence
    v = np.array([speeds.get(k, np.nan) for k in grid.keys], dtype=np.float64)
    if fallback is Fallback.SPEED_LIMIT:
        v = np.where(np.isnan(v), np.asarray(grid.limits, dtype=np.float64), v)
    present = ~np.isnan(v)
    pix = np.where(present, speed_to_pixel(np.where(present, v, 0.0)), 0).astype(np.float64)
    n = grid.rows * grid.cols
    w = present[key_idx].astype(np.float64)
    total = np.bincount(cell_idx, weights=pix[key_idx] * w, minlength=n)
    count = np.bincount(cell_idx, weights=w, minlength=n)
    out = np.zeros(n)
    np.divide(total, count, out=out, where=count > 0)
    return out.reshape(grid.rows, grid.cols)


def project(
    grid: GridMap,
    speeds: Mapping,
    width: int = DEFAULT_WIDTH,
    fallback: Fallback = Fallback.ZERO,
    timestamp: Optional[datetime] = None,
) -> Tci:
    """Render one traffic snapshot as a ``width x width`` TCI."""
    if width <= 0:
        raise ValueError("width must be positive")
    img = round_half_up(resize(raw_values(grid, speeds, fallback), width))
    return Tci(np.clip(img, 0, 255).astype(np.uint8), timestamp, grid.grid_id)


def diff_values(grid: GridMap, values_a: Mapping, values_b: Mapping) -> np.ndarray:
    """Per-cell mean(a) - mean(b) over keys present in both maps; NaN where no data."""
    common = {k: values_a[k] - values_b[k] for k in values_a.keys() & values_b.keys()}
    out = np.full((grid.rows, grid.cols), np.nan)
    for (r, c), keys in grid.lookup.items():
        ds = [common[k] for k in keys if k in common]
        if ds:
            out[r, c] = sum(ds) / len(ds)
    return out


def render_diff(
    grid: GridMap,
    values_a: Mapping,
    values_b: Mapping,
    width: int = DEFAULT_WIDTH,
    scale: Optional[float] = None,
) -> Tci:
    """Heatmap of ``a - b``: 128 is no difference, 255 the largest positive
    difference and 1 the largest negative one (``scale`` defaults to the max
    absolute cell difference). Cells without data are 128."""
    if width <= 0:
        raise ValueError("width must be positive")
    d = diff_values(grid, values_a, values_b)
    if scale is None:
        finite = np.abs(d[~np.isnan(d)])
        scale = float(finite.max()) if finite.size else 0.0
    raw = np.full(d.shape, 128.0)
    if scale > 0:
        ok = ~np.isnan(d)
        raw[ok] = 128.0 + np.clip(d[ok] / scale, -1.0, 1.0) * 127.0
    img = round_half_up(resize(raw, width))
    return Tci(np.clip(img, 0, 255).astype(np.uint8), None, grid.grid_id)


# ---------------------------------------------------------------- PGM I/O

_COMMENT_RE = re.compile(r"dxnat t=(\S+) grid=(\S*)")


def write_tci(tci: Tci, path) -> None:
    t = "none" if tci.timestamp is None else format_utc(tci.timestamp)
    header = f"P5\n# dxnat t={t} grid={tci.grid_id}\n{tci.width} {tci.width}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + tci.pixels.tobytes())


def read_tci(path) -> Tci:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    tokens, comments = [], []
    while len(tokens) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated PGM header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DataError(f"{path}: truncated PGM header")
            comments.append(data[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(tok) for tok in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    if w != h or w <= 0:
        raise DataError(f"{path}: TCI must be square, got {w}x{h}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError(f"{path}: malformed PGM header")
    raster = data[pos + 1:]
    if len(raster) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(raster)}")
    ts, grid_id = None, ""
    for c in comments:
        m = _COMMENT_RE.search(c)
        if m:
            ts = None if m.group(1) == "none" else parse_utc(m.group(1))
            grid_id = m.group(2)
    return Tci(np.frombuffer(raster, dtype=np.uint8).reshape(h, w), ts, grid_id)
