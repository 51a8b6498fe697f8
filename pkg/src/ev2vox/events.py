"""Event data model, stream validation, frame binning, and the EVT1 file format.

An event is a record (x, y, t, p): a pixel location, a timestamp in
seconds, and the polarity of the brightness change that fired it. Streams
carry the sensor geometry and a total duration so every record can be
checked against its bounds.

Binning converts a stream into a stack of binary event frames. A frame
cell is 1 when at least one event hit that pixel inside the frame's time
window; polarity is discarded. Two windowing modes exist:

- ``uniform``: frame k covers t in [k*dt, (k+1)*dt) and exactly
  ceil(T/dt) frames are emitted, empty ones included. An event with
  t exactly T is kept and lands in the last frame.
- ``anchored``: a window opens at the first event after the previous
  window closes. An event i joins the open window anchored at event j
  while t_i - t_j <= dt; the first overflow starts a new window at i.
  Quiet gaps therefore produce no frames and the frame count is
  data-dependent.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    InvalidPolarity,
    IoFailure,
    NonDivisibleDimensions,
    NonMonotoneTimestamp,
    OutOfBoundsCoordinate,
    TimestampOutOfRange,
    ZeroWindow,
)

EVT1_MAGIC = b"E2VEVT1\x00"

_HEADER_DTYPE = np.dtype([("m", "<u4"), ("n", "<u4"), ("t", "<f8"), ("i", "<u8")])
_RECORD_DTYPE = np.dtype(
    [("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "V3")]
)


@dataclass(frozen=True)
class Event:
    """One sensor event: pixel column x, pixel row y, time t, polarity p."""

    x: int
    y: int
    t: float
    p: int


@dataclass
class EventStream:
    """A validated, time-ordered event sequence with sensor geometry.

    Arrays are kept column-wise (t, x, y, p) rather than as a list of
    records; ``events`` materializes Event objects when object access
    is more convenient than array access.
    """

    sensor_width: int
    sensor_height: int
    duration: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def events(self) -> list[Event]:
        return [
            Event(int(xi), int(yi), float(ti), int(pi))
            for ti, xi, yi, pi in zip(self.t, self.x, self.y, self.p)
        ]


@dataclass(frozen=True)
class BinningConfig:
    """Frame binning settings.

    ``target_height``/``target_width`` request OR-pool downscaling of the
    binned frames; both must divide the sensor dimensions by the same
    integer factor. Leaving them None keeps the sensor resolution.
    """

    window: float
    mode: str = "uniform"
    target_height: int | None = None
    target_width: int | None = None

    def __post_init__(self):
        if not (self.window > 0.0):
            raise ZeroWindow(f"binning window must be positive, got {self.window}")
        if self.mode not in ("uniform", "anchored"):
            raise ZeroWindow(f"unknown binning mode {self.mode!r}")
        if (self.target_height is None) != (self.target_width is None):
            raise NonDivisibleDimensions(
                "target_height and target_width must be given together"
            )

    def downscale_factor(self, sensor_width: int, sensor_height: int) -> int:
        """Integer factor mapping the sensor size to the target size."""
        if self.target_width is None or self.target_height is None:
            return 1
        if self.target_width <= 0 or self.target_height <= 0:
            raise NonDivisibleDimensions("target dimensions must be positive")
        if (
            sensor_width % self.target_width
            or sensor_height % self.target_height
            or sensor_width // self.target_width != sensor_height // self.target_height
        ):
            raise NonDivisibleDimensions(
                f"cannot map {sensor_width}x{sensor_height} frames onto "
                f"{self.target_width}x{self.target_height} with one integer factor"
            )
        return sensor_width // self.target_width


@dataclass
class FrameStack:
    """Ordered binary event frames, shape (D, H, W), values in {0, 1}."""

    frames: np.ndarray
    window: float
    frame_index_origin: int = 0

    @property
    def depth(self) -> int:
        return self.frames.shape[0]


def from_arrays(
    t: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    p: np.ndarray,
    sensor_width: int,
    sensor_height: int,
    duration: float,
) -> EventStream:
    """Validate column arrays and wrap them in an EventStream.

    Checks every stream invariant: monotone timestamps, in-bounds
    coordinates, polarity in {-1, +1}, timestamps within [0, T].
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x)
    y = np.asarray(y)
    p = np.asarray(p)
    if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
        raise OutOfBoundsCoordinate("event columns must be equal-length 1-D arrays")

    if len(t):
        dt = np.diff(t)
        if np.any(dt < 0):
            i = int(np.argmax(dt < 0))
            raise NonMonotoneTimestamp(
                f"timestamp decreases at index {i + 1}: {t[i]} -> {t[i + 1]}"
            )
        xi = x.astype(np.int64)
        yi = y.astype(np.int64)
        bad = (xi < 0) | (xi >= sensor_width) | (yi < 0) | (yi >= sensor_height)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise OutOfBoundsCoordinate(
                f"event {i} at ({xi[i]}, {yi[i]}) outside "
                f"{sensor_width}x{sensor_height} sensor"
            )
        pi = p.astype(np.int64)
        if np.any((pi != 1) & (pi != -1)):
            i = int(np.argmax((pi != 1) & (pi != -1)))
            raise InvalidPolarity(f"event {i} has polarity {pi[i]}, expected +1 or -1")
        if np.any(t < 0) or np.any(t > duration):
            bad_t = (t < 0) | (t > duration)
            i = int(np.argmax(bad_t))
            raise TimestampOutOfRange(
                f"event {i} at t={t[i]} outside [0, {duration}]"
            )

    return EventStream(
        sensor_width=int(sensor_width),
        sensor_height=int(sensor_height),
        duration=float(duration),
        t=t,
        x=x.astype(np.uint16),
        y=y.astype(np.uint16),
        p=p.astype(np.int8),
    )


def validate_stream(raw_events, sensor_width: int, sensor_height: int, duration: float) -> EventStream:
    """Build a validated EventStream from Event records (or (x,y,t,p) tuples).

    Input order is preserved; any invariant violation raises the matching
    error with the index of the first offending record.
    """
    records = list(raw_events)
    n = len(records)
    t = np.empty(n, dtype=np.float64)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    p = np.empty(n, dtype=np.int64)
    for i, ev in enumerate(records):
        if isinstance(ev, Event):
            x[i], y[i], t[i], p[i] = ev.x, ev.y, ev.t, ev.p
        else:
            x[i], y[i], t[i], p[i] = ev
    return from_arrays(t, x, y, p, sensor_width, sensor_height, duration)


def _uniform_frame_count(duration: float, window: float) -> int:
    return int(math.ceil(duration / window))


def bin_to_frames(stream: EventStream, cfg: BinningConfig) -> FrameStack:
    """Accumulate a stream into binary event frames per the configured mode.

    Uniform mode always emits ceil(T/dt) frames. Anchored mode emits one
    frame per occupied window and none for quiet gaps. When the config
    carries target dimensions the result is OR-pool downscaled.
    """
    h, w = stream.sensor_height, stream.sensor_width
    n = len(stream)

    if cfg.mode == "uniform":
        depth = _uniform_frame_count(stream.duration, cfg.window)
        if depth == 0 and n > 0:
            depth = 1
        frames = np.zeros((depth, h, w), dtype=np.uint8)
        if n:
            k = np.floor_divide(stream.t, cfg.window).astype(np.int64)
            np.clip(k, 0, depth - 1, out=k)
            frames[k, stream.y.astype(np.int64), stream.x.astype(np.int64)] = 1
    else:
        planes = []
        j = 0
        while j < n:
            rel = stream.t[j:] - stream.t[j]
            end = j + int(np.searchsorted(rel, cfg.window, side="right"))
            plane = np.zeros((h, w), dtype=np.uint8)
            plane[stream.y[j:end].astype(np.int64), stream.x[j:end].astype(np.int64)] = 1
            planes.append(plane)
            j = end
        frames = (
            np.stack(planes) if planes else np.zeros((0, h, w), dtype=np.uint8)
        )

    stack = FrameStack(frames=frames, window=cfg.window)
    factor = cfg.downscale_factor(w, h)
    if factor != 1:
        stack = downscale_frames(stack, factor)
    return stack


def downscale_frames(stack: FrameStack, factor: int) -> FrameStack:
    """OR-pool each frame over factor x factor blocks (binary max-pool)."""
    if factor < 1:
        raise NonDivisibleDimensions(f"downscale factor must be >= 1, got {factor}")
    d, h, w = stack.frames.shape
    if factor == 1:
        return FrameStack(
            frames=stack.frames.copy(),
            window=stack.window,
            frame_index_origin=stack.frame_index_origin,
        )
    if h % factor or w % factor:
        raise NonDivisibleDimensions(
            f"frame size {h}x{w} not divisible by factor {factor}"
        )
    pooled = (
        stack.frames.reshape(d, h // factor, factor, w // factor, factor)
        .max(axis=(2, 4))
        .astype(np.uint8)
    )
    return FrameStack(
        frames=pooled, window=stack.window, frame_index_origin=stack.frame_index_origin
    )


def write_evt1(stream: EventStream, path: str | os.PathLike) -> None:
    """Serialize a stream to the EVT1 binary format.

    Layout: magic ``E2VEVT1\\0``; little-endian header u32 M, u32 N,
    f64 T, u64 I; then I records of (f64 t, u16 x, u16 y, i8 p, 3 zero
    pad bytes).
    """
    if stream.sensor_width > 0xFFFF or stream.sensor_height > 0xFFFF:
        raise FormatError("EVT1 stores pixel coordinates as u16")
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header["m"] = stream.sensor_width
    header["n"] = stream.sensor_height
    header["t"] = stream.duration
    header["i"] = len(stream)
    records = np.zeros(len(stream), dtype=_RECORD_DTYPE)
    records["t"] = stream.t
    records["x"] = stream.x
    records["y"] = stream.y
    records["p"] = stream.p
    try:
        with open(path, "wb") as fh:
            fh.write(EVT1_MAGIC)
            fh.write(header.tobytes())
            fh.write(records.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write event file {path}: {exc}") from exc


def read_evt1(path: str | os.PathLike) -> EventStream:
    """Read and fully validate an EVT1 file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read event file {path}: {exc}") from exc

    if len(blob) < len(EVT1_MAGIC) + _HEADER_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated EVT1 header")
    if blob[: len(EVT1_MAGIC)] != EVT1_MAGIC:
        raise FormatError(f"{path}: bad magic, not an EVT1 file")

    header = np.frombuffer(
        blob, dtype=_HEADER_DTYPE, count=1, offset=len(EVT1_MAGIC)
    )[0]
    count = int(header["i"])
    body = blob[len(EVT1_MAGIC) + _HEADER_DTYPE.itemsize :]
    expected = count * _RECORD_DTYPE.itemsize
    if len(body) != expected:
        raise FormatError(
            f"{path}: expected {expected} record bytes for {count} events, "
            f"found {len(body)}"
        )
    records = np.frombuffer(body, dtype=_RECORD_DTYPE, count=count)
    return from_arrays(
        records["t"].copy(),
        records["x"].copy(),
        records["y"].copy(),
        records["p"].copy(),
        int(header["m"]),
        int(header["n"]),
        float(header["t"]),
    )
