"""DVS event decoding, synthetic event streams and event-to-spike conversion.

Every event becomes a spike on the neuron of its pixel (``i = y * width + x``)
in the time bin that contains its timestamp.  Polarity is decoded and kept on
the stream so the codec can round-trip, but it never reaches the raster.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DecodeError, OutOfRangeError

NMNIST_WIDTH = 34
NMNIST_HEIGHT = 34
NMNIST_RECORD_BYTES = 5
_NMNIST_MAX_T = (1 << 23) - 1

# (train per class, test per class)
PRESETS = {
    "nmnist-100": (10, 4),
    "nmnist-1k": (100, 20),
    "full": (None, None),
}

SPARSE_DENSITY_LIMIT = 0.05


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    polarity: int


@dataclass
class EventStream:
    """Column-oriented event stream.

    ``x``, ``y``, ``t`` (microseconds) and ``polarity`` are equal-length integer
    arrays ordered by timestamp.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    polarity: np.ndarray
    sensor_width: int
    sensor_height: int
    duration: int
    label: Optional[int] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ConfigError("event columns must have equal length")
        if n and self.duration < int(self.t.max()):
            raise ConfigError(
                f"duration {self.duration} is shorter than the last event at {int(self.t.max())}"
            )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.polarity):
            yield Event(int(x), int(y), int(t), int(p))

    def __getitem__(self, i) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.polarity[i]))

    @property
    def num_pixels(self) -> int:
        return self.sensor_width * self.sensor_height

    @classmethod
    def from_events(cls, events: Sequence[Event], width, height, duration=None, label=None):
        cols = np.array([(e.x, e.y, e.t, e.polarity) for e in events], dtype=np.int64).reshape(-1, 4)
        if duration is None:
            duration = int(cols[:, 2].max()) if len(cols) else 0
        order = np.argsort(cols[:, 2], kind="stable")
        cols = cols[order]
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height, duration, label)

    def equals(self, other: "EventStream") -> bool:
        return (
            self.sensor_width == other.sensor_width
            and self.sensor_height == other.sensor_height
            and self.duration == other.duration
            and self.label == other.label
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.polarity, other.polarity)
        )

    def with_polarity(self, polarity) -> "EventStream":
        return EventStream(self.x, self.y, self.t, np.broadcast_to(polarity, self.t.shape).copy(),
                           self.sensor_width, self.sensor_height, self.duration, self.label)


# ---------------------------------------------------------------------------
# N-MNIST codec
# ---------------------------------------------------------------------------


def decode_nmnist(blob: bytes, width: int = NMNIST_WIDTH, height: int = NMNIST_HEIGHT,
                  label: Optional[int] = None) -> EventStream:
    """Decode an N-MNIST binary blob.

    Each 40-bit record is ``x (8) | y (8) | polarity (1) | timestamp (23)``,
    timestamp big-endian in microseconds.  Records are sorted stably by
    timestamp, so a time-ordered blob keeps its record order.
    """
    n_bytes = len(blob)
    if n_bytes % NMNIST_RECORD_BYTES:
        offset = n_bytes - n_bytes % NMNIST_RECORD_BYTES
        raise DecodeError(f"truncated record at byte offset {offset}", offset=offset)
    raw = np.frombuffer(bytes(blob), dtype=np.uint8).reshape(-1, NMNIST_RECORD_BYTES).astype(np.int64)
    x = raw[:, 0]
    y = raw[:, 1]
    polarity = raw[:, 2] >> 7
    t = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]

    bad = np.flatnonzero((x >= width) | (y >= height))
    if bad.size:
        i = int(bad[0])
        raise OutOfRangeError(
            f"record {i}: pixel ({int(x[i])}, {int(y[i])}) outside {width}x{height} sensor", index=i
        )
    order = np.argsort(t, kind="stable")
    duration = int(t.max()) if len(t) else 0
    return EventStream(x[order], y[order], t[order], polarity[order], width, height, duration, label)


def encode_nmnist(stream: EventStream) -> bytes:
    """Inverse of :func:`decode_nmnist`; events are written in stream order."""
    if len(stream) == 0:
        return b""
    if stream.x.max() > 255 or stream.y.max() > 255 or stream.x.min() < 0 or stream.y.min() < 0:
        raise ConfigError("N-MNIST records hold 8-bit pixel coordinates")
    if stream.t.max() > _NMNIST_MAX_T or stream.t.min() < 0:
        raise ConfigError("N-MNIST timestamps are limited to 23 bits")
    out = np.empty((len(stream), NMNIST_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = stream.x
    out[:, 1] = stream.y
    out[:, 2] = ((stream.polarity & 1) << 7) | (stream.t >> 16)
    out[:, 3] = (stream.t >> 8) & 0xFF
    out[:, 4] = stream.t & 0xFF
    return out.tobytes()


def read_nmnist_file(path, label: Optional[int] = None) -> EventStream:
    return decode_nmnist(Path(path).read_bytes(), label=label)


def list_nmnist_split(root, split: str, per_class: Optional[int] = None) -> list[tuple[Path, int]]:
    """Files of one split in ``root/<Train|Test>/<label>/*.bin`` layout.

    Subsets keep the first ``per_class`` files of each class by sorted filename.
    """
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise ConfigError(f"dataset split directory not found: {split_dir}")
    items = []
    class_dirs = sorted((d for d in split_dir.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    for class_dir in class_dirs:
        files = sorted(class_dir.glob("*.bin"))
        if per_class is not None:
            if len(files) < per_class:
                raise ConfigError(
                    f"class {class_dir.name} in {split_dir} has {len(files)} files, preset needs {per_class}"
                )
            files = files[:per_class]
        items.extend((f, int(class_dir.name)) for f in files)
    if not items:
        raise ConfigError(f"no samples found under {split_dir}")
    return items


def load_nmnist(root, preset: str = "nmnist-100") -> tuple[list[EventStream], list[EventStream]]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown dataset preset {preset!r}; choose from {sorted(PRESETS)}")
    n_train, n_test = PRESETS[preset]
    train = [read_nmnist_file(p, label) for p, label in list_nmnist_split(root, "Train", n_train)]
    test = [read_nmnist_file(p, label) for p, label in list_nmnist_split(root, "Test", n_test)]
    return train, test


# ---------------------------------------------------------------------------
# Spike rasters
# ---------------------------------------------------------------------------


class SpikeRaster:
    """Binary (step, neuron) spike indicators.

    Held as sorted coordinate lists below 5% density and as a dense uint8
    array otherwise; both forms answer the same queries.
    """

    def __init__(self, steps: np.ndarray, neurons: np.ndarray, num_neurons: int, num_steps: int, dt: float):
        self.num_neurons = int(num_neurons)
        self.num_steps = int(num_steps)
        self.dt = dt
        steps = np.asarray(steps, dtype=np.int64)
        neurons = np.asarray(neurons, dtype=np.int64)
        if steps.size and (steps.max() >= self.num_steps or neurons.max() >= self.num_neurons):
            raise ConfigError("spike coordinates outside raster")
        cells = max(self.num_neurons * self.num_steps, 1)
        self._count = len(steps)
        if self._count / cells < SPARSE_DENSITY_LIMIT:
            self._dense = None
            self._steps, self._neurons = steps, neurons
        else:
            dense = np.zeros((self.num_steps, self.num_neurons), dtype=np.uint8)
            dense[steps, neurons] = 1
            self._dense = dense
            self._steps = self._neurons = None

    @classmethod
    def from_dense(cls, dense, dt: float = 1.0) -> "SpikeRaster":
        dense = np.asarray(dense)
        steps, neurons = np.nonzero(dense)
        return cls(steps, neurons, dense.shape[1], dense.shape[0], dt)

    @property
    def is_sparse(self) -> bool:
        return self._dense is None

    @property
    def spike_count(self) -> int:
        return self._count

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        if self._dense is not None:
            return np.nonzero(self._dense)
        return self._steps, self._neurons

    def bin(self, step: int) -> np.ndarray:
        """Indices of neurons firing in ``step``."""
        if self._dense is not None:
            return np.flatnonzero(self._dense[step])
        lo, hi = np.searchsorted(self._steps, [step, step + 1])
        return self._neurons[lo:hi]

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        out = np.zeros((self.num_steps, self.num_neurons), dtype=np.uint8)
        out[self._steps, self._neurons] = 1
        return out

    def to_tensor(self, num_steps: Optional[int] = None, dtype=torch.float32) -> torch.Tensor:
        """Dense ``(steps, neurons)`` tensor cropped or zero-padded to ``num_steps``."""
        n = self.num_steps if num_steps is None else num_steps
        out = torch.zeros((n, self.num_neurons), dtype=dtype)
        steps, neurons = self.coordinates()
        keep = steps < n
        out[torch.from_numpy(steps[keep]), torch.from_numpy(neurons[keep])] = 1
        return out

    def __eq__(self, other):
        if not isinstance(other, SpikeRaster):
            return NotImplemented
        return (self.num_neurons == other.num_neurons and self.num_steps == other.num_steps
                and np.array_equal(self.dense(), other.dense()))


def num_bins(duration: int, dt: float) -> int:
    # timestamps run over [0, duration] inclusive
    return max(1, math.ceil((duration + 1) / dt))


def events_to_spikes(stream: EventStream, dt: float = 1000.0) -> SpikeRaster:
    """Bin events into a binary raster with bin width ``dt`` microseconds."""
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    n_steps = num_bins(stream.duration, dt)
    if len(stream) == 0:
        return SpikeRaster(np.empty(0), np.empty(0), stream.num_pixels, n_steps, dt)
    bins = np.floor_divide(stream.t, dt).astype(np.int64)
    neuron = stream.y * stream.sensor_width + stream.x
    key = np.unique(bins * stream.num_pixels + neuron)
    return SpikeRaster(key // stream.num_pixels, key % stream.num_pixels, stream.num_pixels, n_steps, dt)


# ---------------------------------------------------------------------------
# Synthetic streams
# ---------------------------------------------------------------------------


def _poisson_segment(rng, rate, num_neurons, start, end):
    span = end - start
    if rate == 0 or span <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    counts = rng.poisson(rate * span * 1e-6, size=num_neurons)
    neurons = np.repeat(np.arange(num_neurons), counts)
    times = rng.integers(start, end, size=neurons.size)
    return neurons, times


def _stream_from(neurons, times, rng, num_neurons, duration, width):
    height = -(-num_neurons // width)
    order = np.lexsort((neurons, times))
    neurons, times = neurons[order], times[order]
    polarity = rng.integers(0, 2, size=neurons.size)
    return EventStream(neurons % width, neurons // width, times, polarity, width, height, duration)


def synth_poisson(rate: float, num_neurons: int, duration: int, seed: int,
                  width: Optional[int] = None) -> EventStream:
    """Homogeneous Poisson events; ``rate`` in spikes/s per neuron, ``duration`` in µs.

    Neurons are laid out row-major on a sensor ``width`` pixels wide
    (default: a single row).
    """
    if rate < 0:
        raise ConfigError("rate must be non-negative")
    if duration <= 0:
        raise ConfigError("duration must be positive")
    rng = np.random.default_rng(seed)
    neurons, times = _poisson_segment(rng, rate, num_neurons, 0, duration)
    return _stream_from(neurons, times, rng, num_neurons, duration, width or num_neurons)


def synth_burst(base_rate: float, burst_rate: float, burst_windows: Sequence[tuple[int, int]],
                num_neurons: int, duration: int, seed: int, width: Optional[int] = None) -> EventStream:
    """Piecewise Poisson stream at ``burst_rate`` inside the windows, ``base_rate`` elsewhere.

    Windows are half-open ``[start, end)`` intervals in µs.
    """
    if burst_rate < base_rate:
        raise ConfigError("burst_rate must be >= base_rate")
    if base_rate < 0 or duration <= 0:
        raise ConfigError("rates must be non-negative and duration positive")
    windows = sorted((int(a), int(b)) for a, b in burst_windows)
    prev_end = 0
    for a, b in windows:
        if a < 0 or b > duration or a >= b:
            raise ConfigError(f"burst window [{a}, {b}) outside [0, {duration})")
        if a < prev_end:
            raise ConfigError(f"burst window [{a}, {b}) overlaps its predecessor")
        prev_end = b
    segments, cursor = [], 0
    for a, b in windows:
        segments.append((base_rate, cursor, a))
        segments.append((burst_rate, a, b))
        cursor = b
    segments.append((base_rate, cursor, duration))

    rng = np.random.default_rng(seed)
    parts = [_poisson_segment(rng, r, num_neurons, a, b) for r, a, b in segments]
    neurons = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    return _stream_from(neurons, times, rng, num_neurons, duration, width or num_neurons)


def synth_ramp(start_rate: float, end_rate: float, num_neurons: int, duration: int, seed: int,
               segments: int = 20, width: Optional[int] = None) -> EventStream:
    """Poisson stream whose rate rises linearly, approximated by equal segments."""
    if start_rate < 0 or end_rate < 0 or duration <= 0 or segments < 1:
        raise ConfigError("invalid ramp parameters")
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, duration, segments + 1).astype(np.int64)
    rates = np.linspace(start_rate, end_rate, segments)
    parts = [_poisson_segment(rng, r, num_neurons, a, b) for r, a, b in zip(rates, edges[:-1], edges[1:])]
    neurons = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    return _stream_from(neurons, times, rng, num_neurons, duration, width or num_neurons)


# ---------------------------------------------------------------------------
# Columnar text dump
# ---------------------------------------------------------------------------


def write_stream_text(stream: EventStream, path) -> None:
    """``width height duration`` header, then one ``x y t polarity`` line per event."""
    lines = [f"{stream.sensor_width} {stream.sensor_height} {stream.duration}"]
    lines += [f"{x} {y} {t} {p}" for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.polarity)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_stream_text(path, label: Optional[int] = None) -> EventStream:
    lines = Path(path).read_text().split("\n")
    try:
        width, height, duration = (int(v) for v in lines[0].split())
        rows = [ln.split() for ln in lines[1:] if ln.strip()]
        cols = np.array(rows, dtype=np.int64).reshape(-1, 4)
    except ValueError as exc:
        raise DecodeError(f"malformed stream dump {path}: {exc}") from exc
    return EventStream(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height, duration, label)
