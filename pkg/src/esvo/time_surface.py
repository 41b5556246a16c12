"""Time surfaces: per-pixel event recency rendered with exponential decay.

A time surface holds, for every pixel, ``255 * exp(-(t - t_last)/eta)`` where
``t_last`` is the timestamp of the most recent event at that pixel.  Large
values mark the current location of moving edges; the "negative"
(255 - value) acts as an anisotropic distance field to those edges.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

EVENT_DTYPE = np.dtype([("t", "f8"), ("x", "i4"), ("y", "i4"), ("p", "i1")])

# Tolerated backwards jitter in event streams, seconds.
TIME_REGRESSION_TOL = 1e-6


@dataclass(frozen=True)
class Event:
    """One brightness-change measurement."""

    t: float
    x: int
    y: int
    polarity: int


def make_events(t, x, y, p) -> np.ndarray:
    """Pack parallel arrays into the structured event dtype."""
    out = np.empty(len(np.atleast_1d(t)), dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


def as_event_array(events) -> np.ndarray:
    """Accept a structured array, an Event, or a sequence of Events."""
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    if isinstance(events, Event):
        events = [events]
    out = np.empty(len(events), dtype=EVENT_DTYPE)
    for i, e in enumerate(events):
        out[i] = (e.t, e.x, e.y, e.polarity)
    return out


class LastEventMap:
    """Per-pixel timestamp of the most recent event; -inf means never fired."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.t_last = np.full((height, width), -np.inf)
        self.current_time = -np.inf

    def ingest(self, batch) -> "LastEventMap":
        """Fold an ordered event batch into the map.

        Within a batch the later timestamp wins at a pixel.  Batches must not
        run backwards in time by more than TIME_REGRESSION_TOL.
        """
        ev = as_event_array(batch)
        if len(ev) == 0:
            return self
        t = ev["t"]
        if np.any(np.diff(t) < -TIME_REGRESSION_TOL) or t[0] < self.current_time - TIME_REGRESSION_TOL:
            raise ValueError("non-monotonic stream: event timestamps run backwards")
        x = ev["x"]
        y = ev["y"]
        if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
            raise ValueError("pixel out of range")
        np.maximum.at(self.t_last, (y, x), t)
        self.current_time = max(self.current_time, float(t[-1]))
        return self


@dataclass(frozen=True)
class TimeSurface:
    """Snapshot of decayed recency values in [0, 255] at time t."""

    t: float
    values: np.ndarray
    eta: float
    # Pre-negation grid, kept so negating twice restores the original bits.
    _pre_negative: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values.flags.writeable = False

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def render(last_map: LastEventMap, t: float, eta: float) -> TimeSurface:
    """Render the decayed surface at time t; never-fired pixels hold 0."""
    if eta <= 0.0:
        raise ValueError("invalid decay: eta must be positive")
    if t < last_map.current_time - TIME_REGRESSION_TOL:
        raise ValueError("render time precedes latest ingested event")
    values = 255.0 * np.exp((last_map.t_last - t) / eta)
    return TimeSurface(t=float(t), values=values, eta=float(eta))


def negative(ts: TimeSurface) -> TimeSurface:
    if ts._pre_negative is not None:
        return TimeSurface(t=ts.t, values=ts._pre_negative, eta=ts.eta)
    return TimeSurface(t=ts.t, values=255.0 - ts.values, eta=ts.eta,
                       _pre_negative=ts.values)


def blur(ts: TimeSurface, kernel_size: int) -> TimeSurface:
    """Gaussian blur with sigma = kernel_size / 6 and replicated borders."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    if kernel_size == 1:
        return ts
    sigma = kernel_size / 6.0
    radius = (kernel_size - 1) // 2
    blurred = ndimage.gaussian_filter(ts.values, sigma=sigma, mode="nearest",
                                      truncate=radius / sigma)
    return TimeSurface(t=ts.t, values=blurred, eta=ts.eta)


def sample_bilinear(ts: TimeSurface, p) -> float:
    """Bilinear sample at fractional pixel p = (u, v)."""
    u, v = float(p[0]), float(p[1])
    h, w = ts.values.shape
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise ValueError("sample out of bounds")
    vals, _, _, _ = bilinear_with_gradient(ts.values, np.asarray([u]), np.asarray([v]))
    return float(vals[0])


def gradient(ts: TimeSurface, p) -> tuple[float, float]:
    """Central differences of bilinear samples, step one pixel."""
    u, v = float(p[0]), float(p[1])
    h, w = ts.values.shape
    if not (1.0 <= u <= w - 2 and 1.0 <= v <= h - 2):
        raise ValueError("gradient out of bounds")
    gx = 0.5 * (sample_bilinear(ts, (u + 1.0, v)) - sample_bilinear(ts, (u - 1.0, v)))
    gy = 0.5 * (sample_bilinear(ts, (u, v + 1.0)) - sample_bilinear(ts, (u, v - 1.0)))
    return gx, gy


def bilinear_with_gradient(values: np.ndarray, us: np.ndarray, vs: np.ndarray):
    """Vectorized bilinear interpolation with the interpolant's exact gradient.

    The per-cell gradient is the derivative of the piecewise-bilinear
    interpolant itself, which is what the solvers' chain rules need so that
    analytic Jacobians agree with finite differences of the sampled values.

    Returns (value, gx, gy, valid); out-of-bounds entries are zeroed and
    flagged invalid.
    """
    h, w = values.shape
    valid = (us >= 0.0) & (us <= w - 1) & (vs >= 0.0) & (vs <= h - 1)
    uc = np.clip(us, 0.0, w - 1.0)
    vc = np.clip(vs, 0.0, h - 1.0)
    x0 = np.minimum(uc.astype(np.int64), w - 2)
    y0 = np.minimum(vc.astype(np.int64), h - 2)
    fx = uc - x0
    fy = vc - y0
    flat = values.ravel()
    base = y0 * w + x0
    v00 = flat[base]
    v01 = flat[base + 1]
    v10 = flat[base + w]
    v11 = flat[base + w + 1]
    # Weighted form so integer coordinates reproduce grid values exactly.
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    val = (1.0 - fy) * top + fy * bot
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    val = np.where(valid, val, 0.0)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    return val, gx, gy, valid


class SurfaceHistory:
    """Ring buffer of recent stereo time-surface snapshots (single writer)."""

    def __init__(self, maxlen: int = 100):
        self._buffer: collections.deque = collections.deque(maxlen=maxlen)

    def append(self, obs) -> None:
        if self._buffer and obs.t <= self._buffer[-1].t:
            raise ValueError("snapshot timestamps must increase")
        self._buffer.append(obs)

    def __len__(self) -> int:
        return len(self._buffer)

    def latest(self):
        if not self._buffer:
            raise ValueError("no snapshots stored")
        return self._buffer[-1]

    def last_n(self, n: int) -> list:
        items = list(self._buffer)
        return items[-n:]


def iter_event_batches(path, batch_size: int = 65536):
    """Stream events from a text file ("t x y p" per line, p in {0, 1}).

    Yields structured arrays of up to batch_size events without ever holding
    the whole file in memory.
    """
    ts: list[float] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    with open(path, "r") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"malformed event line: {raw!r}")
            ts.append(float(parts[0]))
            xs.append(int(parts[1]))
            ys.append(int(parts[2]))
            p = int(parts[3])
            if p not in (0, 1):
                raise ValueError(f"event polarity must be 0 or 1, got {p}")
            ps.append(1 if p == 1 else -1)
            if len(ts) >= batch_size:
                yield make_events(ts, xs, ys, ps)
                ts, xs, ys, ps = [], [], [], []
    if ts:
        yield make_events(ts, xs, ys, ps)


def load_events(path) -> np.ndarray:
    """Read a whole event file (convenience for small files and tests)."""
    batches = list(iter_event_batches(path))
    if not batches:
        return np.empty(0, dtype=EVENT_DTYPE)
    return np.concatenate(batches)


def save_events(events: np.ndarray, path) -> None:
    """Write events as "t x y p" lines with p in {0, 1}."""
    ev = as_event_array(events)
    with open(path, "w") as fh:
        for t, x, y, p in zip(ev["t"], ev["x"], ev["y"], ev["p"]):
            fh.write(f"{float(t)!r} {int(x)} {int(y)} {1 if p > 0 else 0}\n")
