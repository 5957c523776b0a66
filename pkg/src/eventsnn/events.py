"""Event streams: file formats, rate-frame aggregation, dataset statistics,
and a Poisson encoder for synthetic inputs.

A stream holds DVS-style binary events (timestamp in microseconds, pixel,
polarity) sorted by time. Off/on polarities map to input channels 0/1
throughout the package. Streams are immutable after construction and safe to
share across workers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "BINARY_MAGIC",
    "CSV_HEADER",
    "DvsEvent",
    "EventStream",
    "FrameSet",
    "DatasetStats",
    "load_events",
    "save_events",
    "compute_dataset_stats",
    "frame_aggregate",
    "accumulate",
    "poisson_encode",
    "stack_frames",
    "save_manifest",
    "load_manifest",
    "load_split",
    "unsorted_load_count",
]

BINARY_MAGIC = b"EVS1"
CSV_HEADER = "t_us,x,y,p"

_HEADER = struct.Struct("<4sIIQQ")  # magic, width, height, duration_us, count
_RECORD_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

_unsorted_loads = 0


def unsorted_load_count() -> int:
    """Number of event files that needed a stability-preserving sort on load."""
    return _unsorted_loads


class DvsEvent(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass
class EventStream:
    """Time-sorted binary events over a fixed sensor area.

    Field arrays share one index: event i is ``(t[i], x[i], y[i], polarity[i])``.
    Construction validates bounds (``x < width``, ``y < height``,
    ``0 <= t <= duration_us``, polarity in {0, 1}) and sorts by time if needed;
    afterwards the arrays are marked read-only.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    width: int
    height: int
    duration_us: int
    label: int | None = None
    was_unsorted: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.polarity.shape[0] == n):
            raise ValidationError("event field arrays differ in length")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("sensor dimensions must be positive")
        if self.duration_us < 0:
            raise ValidationError("duration_us must be non-negative")
        if n:
            _check_bounds(self.t, self.x, self.y, self.polarity,
                          self.width, self.height, self.duration_us)
            if np.any(np.diff(self.t) < 0):
                order = np.argsort(self.t, kind="stable")
                self.t = self.t[order]
                self.x = self.x[order]
                self.y = self.y[order]
                self.polarity = self.polarity[order]
                self.was_unsorted = True
        for arr in (self.t, self.x, self.y, self.polarity):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.t.shape[0]

    def __iter__(self) -> Iterator[DvsEvent]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> DvsEvent:
        return DvsEvent(int(self.t[i]), int(self.x[i]), int(self.y[i]),
                        int(self.polarity[i]))

    def counts(self) -> np.ndarray:
        """Total events per (polarity, y, x) as an int64 tensor of shape (2, H, W)."""
        out = np.zeros((2, self.height, self.width), dtype=np.int64)
        np.add.at(out, (self.polarity, self.y, self.x), 1)
        return out

    def with_label(self, label: int) -> "EventStream":
        return EventStream(self.t, self.x, self.y, self.polarity,
                           self.width, self.height, self.duration_us, label)


def _check_bounds(t, x, y, p, width, height, duration_us, where=None):
    def describe(i):
        return f"event {i}" if where is None else where(i)

    for arr, lo, hi, name in (
        (t, 0, duration_us, "t"),
        (x, 0, width - 1, "x"),
        (y, 0, height - 1, "y"),
        (p, 0, 1, "p"),
    ):
        bad = np.nonzero((arr < lo) | (arr > hi))[0]
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"{describe(i)}: {name}={int(arr[i])} outside [{lo}, {hi}]")


@dataclass
class FrameSet:
    """Per-frame average spike rates: F tensors of shape (2, H, W).

    Values are per-pixel spike counts divided by the training-set maximum;
    streams hotter than that maximum legitimately exceed 1 and are not clipped.
    """

    frames: np.ndarray
    frame_duration_us: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[1] != 2:
            raise ValidationError("frames must have shape (F, 2, H, W) with F >= 1")
        self.frames.setflags(write=False)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetStats:
    """Spike-count ceiling and the tick rate it implies.

    ``n_max`` is the largest per-pixel-per-frame spike count seen in the
    training split (clamped to at least 1), and ``s_r`` the implied spikes per
    second, which sets the simulation tick width.
    """

    n_max: int
    s_r: float

    def __post_init__(self):
        if self.n_max < 1:
            raise ValidationError("n_max must be >= 1")
        if not self.s_r > 0:
            raise ValidationError("s_r must be positive")

    @property
    def tick_us(self) -> float:
        return 1e6 / self.s_r


# ---------------------------------------------------------------------------
# File formats


def load_events(path, format: str = "auto", *, width: int | None = None,
                height: int | None = None, duration_us: int | None = None,
                label: int | None = None) -> EventStream:
    """Load a stream from a CSV or binary event file.

    The binary format is self-describing; for CSV the sensor geometry and
    duration must be supplied (they usually come from the dataset manifest).
    Unsorted files are sorted stably and counted by :func:`unsorted_load_count`.
    """
    global _unsorted_loads
    path = Path(path)
    if format == "auto":
        with open(path, "rb") as fh:
            format = "binary" if fh.read(4) == BINARY_MAGIC else "csv"
    if format == "binary":
        stream = _load_binary(path, width, height, duration_us, label)
    elif format == "csv":
        stream = _load_csv(path, width, height, duration_us, label)
    else:
        raise ValidationError(f"unknown event format {format!r}")
    if stream.was_unsorted:
        _unsorted_loads += 1
    return stream


def _load_csv(path, width, height, duration_us, label):
    if width is None or height is None or duration_us is None:
        raise ValidationError(
            f"{path}: CSV event files carry no geometry; pass width, height "
            "and duration_us (or load through a manifest)")
    text = path.read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ParseError(f"{path}, line 1: expected header {CSV_HEADER!r}")
    cols = [[], [], [], []]
    linenos = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path}, line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}, line {lineno}: non-integer field in {line!r}") from None
        for c, v in zip(cols, values):
            c.append(v)
        linenos.append(lineno)
    t = np.array(cols[0], dtype=np.int64)
    x = np.array(cols[1], dtype=np.int64)
    y = np.array(cols[2], dtype=np.int64)
    p = np.array(cols[3], dtype=np.int64)
    _check_bounds(t, x, y, p, width, height, duration_us,
                  where=lambda i: f"{path}, line {linenos[i]}")
    return EventStream(t, x, y, p, width, height, duration_us, label)


def _load_binary(path, width, height, duration_us, label):
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, w, h, dur, count = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + count * _RECORD_DTYPE.itemsize
    if len(raw) != expected:
        raise ParseError(
            f"{path}: expected {expected} bytes for {count} records, got {len(raw)}")
    if width is not None and width != w:
        raise ValidationError(f"{path}: header width {w} != declared {width}")
    if height is not None and height != h:
        raise ValidationError(f"{path}: header height {h} != declared {height}")
    if duration_us is not None and duration_us != dur:
        raise ValidationError(f"{path}: header duration {dur} != declared {duration_us}")
    rec = np.frombuffer(raw, dtype=_RECORD_DTYPE, offset=_HEADER.size, count=count)
    t = rec["t"].astype(np.int64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    p = rec["p"].astype(np.int64)
    _check_bounds(t, x, y, p, w, h, dur, where=lambda i: (
        f"{path}, record {i} (offset {_HEADER.size + i * _RECORD_DTYPE.itemsize})"))
    return EventStream(t, x, y, p, int(w), int(h), int(dur), label)


def save_events(stream: EventStream, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        if stream.duration_us >= 2 ** 32:
            raise ValidationError("binary format stores t as u32; duration too large")
        rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.polarity
        header = _HEADER.pack(BINARY_MAGIC, stream.width, stream.height,
                              stream.duration_us, len(stream))
        path.write_bytes(header + rec.tobytes())
    elif format == "csv":
        rows = [CSV_HEADER]
        rows.extend(f"{t},{x},{y},{p}" for t, x, y, p in
                    zip(stream.t, stream.x, stream.y, stream.polarity))
        path.write_text("\n".join(rows) + "\n")
    else:
        raise ValidationError(f"unknown event format {format!r}")


# ---------------------------------------------------------------------------
# Aggregation and statistics


def _frame_counts(stream: EventStream, n_frames: int) -> np.ndarray:
    """Per-frame spike counts, shape (F, 2, H, W), half-open frame bins.

    An event exactly on a frame boundary belongs to the later frame; events at
    t == duration fall back into the last frame so that counts are conserved.
    """
    out = np.zeros((n_frames, 2, stream.height, stream.width), dtype=np.int64)
    if len(stream) == 0:
        return out
    if stream.duration_us == 0:
        idx = np.zeros(len(stream), dtype=np.int64)
    else:
        idx = np.minimum(stream.t * n_frames // stream.duration_us, n_frames - 1)
    np.add.at(out, (idx, stream.polarity, stream.y, stream.x), 1)
    return out


def compute_dataset_stats(dataset: Sequence[EventStream], frames: int) -> DatasetStats:
    """Scan a training split for its per-pixel-per-frame spike-count ceiling.

    The ceiling is clamped to 1 so that empty datasets still normalise; the
    spike resolution uses the longest stream duration in the split.
    """
    if not dataset:
        raise ValidationError("dataset is empty")
    if frames < 1:
        raise ValidationError("frame count must be >= 1")
    n_max = 0
    t_total = 0
    for stream in dataset:
        t_total = max(t_total, stream.duration_us)
        if len(stream):
            n_max = max(n_max, int(_frame_counts(stream, frames).max()))
    if t_total == 0:
        raise ValidationError("all streams have zero duration")
    n_max = max(n_max, 1)
    s_r = n_max * frames * 1e6 / t_total
    return DatasetStats(n_max=n_max, s_r=s_r)


def frame_aggregate(stream: EventStream, frames: int, stats: DatasetStats) -> FrameSet:
    """Average spike rate per frame, normalised by the training ceiling."""
    if frames < 1:
        raise ValidationError("frame count must be >= 1")
    counts = _frame_counts(stream, frames)
    return FrameSet(frames=counts / stats.n_max,
                    frame_duration_us=stream.duration_us / frames)


def accumulate(stream: EventStream, t_hat: int) -> np.ndarray:
    """Per-pixel counts of events with t <= t_hat, shape (2, H, W)."""
    if not 0 <= t_hat <= stream.duration_us:
        raise ValidationError(
            f"t_hat={t_hat} outside [0, {stream.duration_us}]")
    k = int(np.searchsorted(stream.t, t_hat, side="right"))
    out = np.zeros((2, stream.height, stream.width), dtype=np.int64)
    np.add.at(out, (stream.polarity[:k], stream.y[:k], stream.x[:k]), 1)
    return out


def stack_frames(streams: Sequence[EventStream], frames: int,
                 stats: DatasetStats) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate a labelled split into (N, F, 2, H, W) rates plus (N,) labels."""
    if not streams:
        raise ValidationError("no streams to aggregate")
    rates = np.stack([frame_aggregate(s, frames, stats).frames for s in streams])
    labels = []
    for i, s in enumerate(streams):
        if s.label is None:
            raise ValidationError(f"stream {i} has no label")
        labels.append(s.label)
    return rates, np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic encoding


def poisson_encode(image: np.ndarray, max_rate: float, duration_us: int,
                   seed) -> EventStream:
    """Encode a grayscale image as independent per-pixel Poisson event trains.

    Pixel value v in [0, 1] fires on-polarity events at rate v * max_rate
    (events per second) over the given duration. Deterministic for a fixed
    seed; `seed` may be an int, SeedSequence, or Generator.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError("image must be 2-d (H, W)")
    if image.min() < 0 or image.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    if not max_rate > 0:
        raise ValidationError("max_rate must be positive")
    rng = np.random.default_rng(seed)
    lam = image * max_rate * (duration_us / 1e6)
    counts = rng.poisson(lam)
    total = int(counts.sum())
    height, width = image.shape
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return EventStream(empty, empty, empty, empty, width, height, duration_us)
    ys, xs = np.nonzero(counts)
    reps = counts[ys, xs]
    x = np.repeat(xs, reps)
    y = np.repeat(ys, reps)
    t = rng.integers(0, duration_us, size=total)
    order = np.argsort(t, kind="stable")
    p = np.ones(total, dtype=np.int64)
    return EventStream(t[order], x[order], y[order], p, width, height, duration_us)


# ---------------------------------------------------------------------------
# Dataset manifest


def save_manifest(path, *, width: int, height: int, duration_us: int,
                  splits: dict[str, list[tuple[str, int]]],
                  metadata: dict | None = None) -> None:
    """Write a dataset manifest: geometry plus per-split (file, label) lists.

    File paths are stored relative to the manifest location.
    """
    doc = {
        "format": "eventsnn-manifest",
        "version": 1,
        "width": width,
        "height": height,
        "duration_us": duration_us,
        "splits": {
            name: [{"path": str(p), "label": int(l)} for p, l in entries]
            for name, entries in splits.items()
        },
    }
    if metadata:
        doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "eventsnn-manifest":
        raise ValidationError(f"{path}: not a dataset manifest")
    for key in ("width", "height", "duration_us", "splits"):
        if key not in doc:
            raise ValidationError(f"{path}: manifest missing {key!r}")
    return doc


def load_split(manifest_path, split: str) -> list[EventStream]:
    """Load every stream of one manifest split with labels attached."""
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    if split not in doc["splits"]:
        raise ValidationError(f"{manifest_path}: no split {split!r}")
    streams = []
    for entry in doc["splits"][split]:
        streams.append(load_events(
            manifest_path.parent / entry["path"],
            width=doc["width"], height=doc["height"],
            duration_us=doc["duration_us"], label=entry["label"]))
    return streams
