"""Event stream ingestion: file formats, temporal binning and rasterization."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BIN_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sIIQ")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
assert RECORD_DTYPE.itemsize == 13


class EventFormatError(ValueError):
    """Malformed or out-of-contract event data."""


class Representation(enum.Enum):
    EVENT_IMAGE = "event_image"
    VOXEL_GRID = "voxel_grid"  # reserved


@dataclass
class EventStream:
    """Time-sorted events of one sensor over the window ``[t_start, t_end)`` (microseconds)."""

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t_start: int = 0
    t_end: int = 0
    rejected: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise EventFormatError("event field arrays differ in length")
        if self.t_end < self.t_start:
            raise EventFormatError("window end precedes window start")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def num_events(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, width: int, height: int) -> EventStream:
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise EventFormatError("timestamps are not sorted")
        if self.t[0] < self.t_start or self.t[-1] >= self.t_end:
            raise EventFormatError("event timestamps fall outside the stream window")
        bad = _out_of_bounds(self.x, self.y, self.p, self.width, self.height)
        if bad.any():
            raise EventFormatError(f"event {int(np.argmax(bad))} is outside the sensor or has bad polarity")


@dataclass
class EventBin:
    index: int  # 1-based
    t_start: int
    duration: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class EventTensor:
    """Per-pixel polarity counts; channel 0 counts +1 events, channel 1 counts -1 events."""

    values: np.ndarray  # [C_e, H, W]
    representation: Representation = field(default=Representation.EVENT_IMAGE)


def _out_of_bounds(x, y, p, width, height) -> np.ndarray:
    return (x < 0) | (x >= width) | (y < 0) | (y >= height) | ((p != 1) & (p != -1))


def _finish(width, height, t, x, y, p, strict, sort, window, source) -> EventStream:
    bad = _out_of_bounds(x, y, p, width, height)
    if bad.any():
        if strict:
            raise EventFormatError(f"{source}: record {int(np.argmax(bad))} out of bounds "
                                   f"for {width}x{height} sensor or invalid polarity")
        keep = ~bad
        t, x, y, p = t[keep], x[keep], y[keep], p[keep]
    rejected = int(bad.sum())
    if len(t) and np.any(np.diff(t) < 0):
        if not sort:
            raise EventFormatError(f"{source}: timestamps are not monotone "
                                   f"(first decrease at record {int(np.argmax(np.diff(t) < 0)) + 1})")
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    if window is None:
        window = (int(t[0]), int(t[-1]) + 1) if len(t) else (0, 0)
    stream = EventStream(width, height, t, x, y, p, window[0], window[1], rejected)
    if len(t) and (t[0] < window[0] or t[-1] >= window[1]):
        raise EventFormatError(f"{source}: events fall outside window {window}")
    return stream


def read_csv(path, width: int, height: int, strict: bool = True, sort: bool = False,
             window: tuple[int, int] | None = None) -> EventStream:
    """Parse ``t_us,x,y,p`` lines; a leading header line is optional."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and not line[0].lstrip("-").isdigit():
                continue
            parts = line.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError(f"{path}:{lineno}: malformed event line {line!r}") from None
            if t < 0:
                raise EventFormatError(f"{path}:{lineno}: negative timestamp")
            rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return _finish(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], strict, sort, window, path)


def write_csv(stream: EventStream, path) -> None:
    with open(path, "w") as fh:
        fh.write("t_us,x,y,p\n")
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(f"{t},{x},{y},{p}\n")


def read_bin(path, strict: bool = True, sort: bool = False,
             window: tuple[int, int] | None = None) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EventFormatError(f"{path}: truncated header")
    magic, width, height, count = _HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise EventFormatError(f"{path}: expected {count} records, found {len(body) / RECORD_DTYPE.itemsize:g}")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    t = rec["t"].astype(np.int64)
    return _finish(width, height, t, rec["x"].astype(np.int64), rec["y"].astype(np.int64),
                   rec["p"].astype(np.int64), strict, sort, window, path)


def encode_bin(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    return _HEADER.pack(BIN_MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


def write_bin(stream: EventStream, path) -> None:
    Path(path).write_bytes(encode_bin(stream))


def parse_events(path, format: str | None = None, width: int | None = None, height: int | None = None,
                 strict: bool = True, sort: bool = False,
                 window: tuple[int, int] | None = None) -> EventStream:
    """Load an event file. ``format`` is ``csv`` or ``bin`` (inferred from the suffix if omitted).

    CSV files do not carry the sensor size, so ``width``/``height`` are required for them.
    In non-strict mode out-of-bounds events are dropped and counted in ``stream.rejected``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    format = format or path.suffix.lstrip(".").lower()
    if format == "csv":
        if width is None or height is None:
            raise ValueError("CSV event files need an explicit sensor width and height")
        return read_csv(path, width, height, strict, sort, window)
    if format == "bin":
        stream = read_bin(path, strict, sort, window)
        if (width is not None and width != stream.width) or (height is not None and height != stream.height):
            raise EventFormatError(f"{path}: sensor is {stream.width}x{stream.height}, expected {width}x{height}")
        return stream
    raise ValueError(f"unknown event format {format!r}")


def split_into_bins(stream: EventStream, dt: int) -> list[EventBin]:
    """Tile the stream window with left-closed, right-open bins of ``dt`` microseconds.

    A trailing partial bin is kept at full nominal duration.
    """
    if dt <= 0:
        raise ValueError("bin duration must be positive")
    span = stream.t_end - stream.t_start
    n = math.ceil(span / dt) if span > 0 else 0
    edges = stream.t_start + dt * np.arange(n + 1, dtype=np.int64)
    cuts = np.searchsorted(stream.t, edges, side="left")
    bins = []
    for i in range(n):
        sl = slice(cuts[i], cuts[i + 1])
        bins.append(EventBin(i + 1, int(edges[i]), dt, stream.t[sl], stream.x[sl], stream.y[sl], stream.p[sl]))
    return bins


def rasterize(b: EventBin, width: int, height: int, channels: int = 2,
              representation: Representation = Representation.EVENT_IMAGE) -> EventTensor:
    if representation is not Representation.EVENT_IMAGE:
        raise NotImplementedError(f"{representation.value} representation is not implemented")
    if channels != 2:
        raise ValueError("the event image representation has exactly 2 channels")
    counts = np.zeros((2, height, width), dtype=np.float32)
    ch = (b.p < 0).astype(np.int64)
    np.add.at(counts, (ch, b.y, b.x), 1.0)
    return EventTensor(counts, representation)


def normalize_embedding(e: EventTensor | np.ndarray, mode: str = "log1p") -> np.ndarray:
    v = e.values if isinstance(e, EventTensor) else np.asarray(e)
    if mode == "none":
        return v.copy()
    if mode == "max":
        return v / max(float(v.max(initial=0.0)), 1.0)
    if mode == "log1p":
        return np.log1p(v)
    raise ValueError(f"unknown normalization mode {mode!r}")
