"""Event streams: parsing, binary storage, time slicing and tensorization.

Timestamps are integer microseconds throughout.  An :class:`EventSlice` keeps
its events column-wise in numpy arrays; iterate it to get :class:`Event`
records.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

EVT_MAGIC = b"EVT0"
EVT_HEADER = struct.Struct("<4sIIQQQ")  # magic, W, H, t_start, t_end, count
EVT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

DEFAULT_BINS = 10


class EventFormatError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, eq=False)
class EventSlice:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event columns have different lengths")
        if self.t_end < self.t_start:
            raise ValueError("slice window is inverted")
        if len(t):
            if np.any(np.diff(t) < 0):
                raise ValueError("events must be sorted by timestamp")
            if t[0] < self.t_start or t[-1] > self.t_end:
                raise ValueError("event timestamps fall outside the slice window")
            if x.min() < 0 or x.max() >= self.width:
                raise ValueError("x out of bounds")
            if y.min() < 0 or y.max() >= self.height:
                raise ValueError("y out of bounds")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be +1 or -1")
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, width, height, t_start=0, t_end=0):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z.astype(np.int8), width, height, t_start, t_end)

    @classmethod
    def from_events(cls, events, width, height, t_start=None, t_end=None):
        """Build a slice from ``Event``-like tuples (x, y, t, p), sorting by time."""
        arr = np.array([(e[0], e[1], e[2], e[3]) for e in events], dtype=np.int64).reshape(-1, 4)
        order = np.argsort(arr[:, 2], kind="stable")
        arr = arr[order]
        if t_start is None:
            t_start = int(arr[0, 2]) if len(arr) else 0
        if t_end is None:
            t_end = int(arr[-1, 2]) if len(arr) else t_start
        return cls(arr[:, 2], arr[:, 0], arr[:, 1], arr[:, 3], width, height, t_start, t_end)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    @property
    def duration(self):
        return self.t_end - self.t_start

    def same_as(self, other: EventSlice) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.t_start == other.t_start
            and self.t_end == other.t_end
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class VoxelGrid:
    data: np.ndarray  # H×W×B

    @property
    def bins(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class EventMask:
    data: np.ndarray  # H×W, values in {0, 1}


# ---------------------------------------------------------------- text format


def _parse_time(token):
    if any(c in token for c in ".eE"):
        return int(round(float(token) * 1e6))
    return int(token)


def load_events_text(path, width, height) -> EventSlice:
    """Parse ``t x y p`` lines.  Timestamps with a decimal point are seconds."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise EventFormatError(f"malformed line {lineno}: expected 't x y p'")
            try:
                t = _parse_time(parts[0])
                x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError:
                raise EventFormatError(f"malformed line {lineno}: {line.strip()!r}") from None
            if t < 0:
                raise EventFormatError(f"negative timestamp at line {lineno}")
            if not 0 <= x < width:
                raise EventFormatError(f"x out of bounds at line {lineno}")
            if not 0 <= y < height:
                raise EventFormatError(f"y out of bounds at line {lineno}")
            if p not in (-1, 0, 1):
                raise EventFormatError(f"polarity must be -1, 0 or 1 at line {lineno}")
            rows.append((x, y, t, -1 if p == 0 else p))
    return EventSlice.from_events(rows, width, height)


def write_events_text(slice_: EventSlice, path):
    with open(path, "w") as fh:
        for t, x, y, p in zip(slice_.t, slice_.x, slice_.y, slice_.p):
            fh.write(f"{t} {x} {y} {p}\n")


# -------------------------------------------------------------- binary format


def write_events_binary(slice_: EventSlice, path):
    rec = np.empty(len(slice_), dtype=EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = slice_.t, slice_.x, slice_.y, slice_.p
    header = EVT_HEADER.pack(
        EVT_MAGIC, slice_.width, slice_.height, slice_.t_start, slice_.t_end, len(slice_)
    )
    Path(path).write_bytes(header + rec.tobytes())


def load_events_binary(path) -> EventSlice:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != EVT_MAGIC:
        raise EventFormatError("bad magic")
    if len(data) < EVT_HEADER.size:
        raise EventFormatError("truncated file")
    _, w, h, t0, t1, count = EVT_HEADER.unpack_from(data)
    body = data[EVT_HEADER.size :]
    if len(body) != count * EVT_RECORD.itemsize:
        raise EventFormatError(
            f"count mismatch: header says {count} events, payload holds {len(body) / EVT_RECORD.itemsize:g}"
        )
    rec = np.frombuffer(body, dtype=EVT_RECORD)
    return EventSlice(rec["t"], rec["x"], rec["y"], rec["p"], w, h, t0, t1)


def load_events(path, width=None, height=None) -> EventSlice:
    """Load either format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EVT_MAGIC:
        return load_events_binary(path)
    if width is None or height is None:
        raise EventFormatError("text event files need an explicit sensor width and height")
    return load_events_text(path, width, height)


# ------------------------------------------------------------------ slicing


def slice_by_time(slice_: EventSlice, t0, t1) -> EventSlice:
    """Events with t in the closed interval [t0, t1]."""
    if t0 > t1:
        raise ValueError("inverted time bounds")
    if t0 < slice_.t_start or t1 > slice_.t_end:
        raise ValueError("time bounds outside the slice window")
    lo = np.searchsorted(slice_.t, t0, side="left")
    hi = np.searchsorted(slice_.t, t1, side="right")
    s = slice(lo, hi)
    return EventSlice(
        slice_.t[s], slice_.x[s], slice_.y[s], slice_.p[s], slice_.width, slice_.height, int(t0), int(t1)
    )


# ------------------------------------------------------------- tensorization


def _accumulate(t, x, y, p, t_first, t_last, width, height, bins):
    size = height * width * bins
    span = t_last - t_first
    if span > 0:
        tn = (t - t_first).astype(np.float64) * ((bins - 1) / span)
    else:
        tn = np.zeros(len(t), dtype=np.float64)
    lower = np.floor(tn).astype(np.int64)
    frac = tn - lower
    pol = p.astype(np.float64)
    base = (y * width + x) * bins
    grid = np.bincount(base + lower, weights=pol * (1.0 - frac), minlength=size)
    upper = lower + 1
    ok = upper < bins
    grid += np.bincount(base[ok] + upper[ok], weights=pol[ok] * frac[ok], minlength=size)
    return grid


def voxelize(slice_: EventSlice, bins=DEFAULT_BINS, dtype=np.float32, workers=1) -> VoxelGrid:
    """Signed linear-in-time voxel grid of shape H×W×bins.

    Each event spreads its polarity over the two temporal bins adjacent to its
    normalized time (t - t_first) / (t_last - t_first) * (bins - 1), using the
    first and last *event* timestamps.  A zero time span puts everything in
    bin 0.  ``workers > 1`` splits events across threads and merges partial
    grids in chunk order.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    h, w = slice_.height, slice_.width
    if len(slice_) == 0:
        return VoxelGrid(np.zeros((h, w, bins), dtype=dtype))
    t_first, t_last = int(slice_.t[0]), int(slice_.t[-1])
    cols = (slice_.t, slice_.x, slice_.y, slice_.p)
    if workers <= 1:
        grid = _accumulate(*cols, t_first, t_last, w, h, bins)
    else:
        bounds = np.linspace(0, len(slice_), workers + 1).astype(int)
        chunks = [tuple(c[a:b] for c in cols) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ch: _accumulate(*ch, t_first, t_last, w, h, bins), chunks))
        grid = parts[0]
        for part in parts[1:]:
            grid = grid + part
    return VoxelGrid(grid.reshape(h, w, bins).astype(dtype))


def event_mask(slice_: EventSlice) -> EventMask:
    mask = np.zeros((slice_.height, slice_.width), dtype=np.uint8)
    mask[slice_.y, slice_.x] = 1
    return EventMask(mask)
