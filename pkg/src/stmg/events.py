"""Event streams: parsing, serialization, synthetic generation, windowing and
density control.

Timestamps are integer microseconds. Polarity is stored as -1/+1.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DataError, EventParseError, EventValidationError

US_PER_MS = 1000
BINARY_MAGIC = b"EVG1"
_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
CSV_HEADER = "# t_us,x,y,p"
LABEL_HEADER = "# t_us,class_id,cx,cy,w,h"


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 304
    height: int = 240

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"invalid sensor geometry {self.width}x{self.height}")

    @property
    def max_dim(self) -> int:
        return max(self.width, self.height)


GEN1 = SensorGeometry(304, 240)


class EventStream:
    """Time-ordered events stored column-wise."""

    __slots__ = ("t", "x", "y", "p", "geometry")

    def __init__(self, t, x, y, p, geometry: SensorGeometry = GEN1, *, sort=True):
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("column lengths differ")
        if sort and len(t) > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        self.t, self.x, self.y, self.p = t, x, y, p
        self.geometry = geometry

    @classmethod
    def empty(cls, geometry: SensorGeometry = GEN1) -> "EventStream":
        return cls([], [], [], [], geometry)

    @classmethod
    def from_events(cls, events: Sequence[Event], geometry: SensorGeometry = GEN1):
        if not events:
            return cls.empty(geometry)
        arr = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.int64)
        return cls(arr[:, 2], arr[:, 0], arr[:, 1], arr[:, 3], geometry)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def subset(self, mask_or_index) -> "EventStream":
        return EventStream(self.t[mask_or_index], self.x[mask_or_index],
                           self.y[mask_or_index], self.p[mask_or_index],
                           self.geometry, sort=False)

    def validate(self) -> None:
        g = self.geometry
        bad = (self.x < 0) | (self.x >= g.width) | (self.y < 0) | (self.y >= g.height)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EventValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside {g.width}x{g.height} sensor")
        if np.any(self.t < 0):
            raise EventValidationError("negative timestamp")
        if np.any((self.p != 1) & (self.p != -1)):
            raise EventValidationError("polarity must be -1 or +1")

    def equals(self, other: "EventStream") -> bool:
        return (self.geometry == other.geometry and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in
                        ((self.t, other.t), (self.x, other.x), (self.y, other.y), (self.p, other.p))))

    def __repr__(self):
        span = f"{self.t[0]}..{self.t[-1]}us" if len(self) else "empty"
        return f"EventStream(n={len(self)}, {span}, {self.geometry.width}x{self.geometry.height})"


@dataclass
class GroundTruth:
    """Labelled boxes, one row per box: (t_label, class_id, cx, cy, w, h)."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 6)

    def __len__(self):
        return len(self.boxes)

    def times(self) -> np.ndarray:
        return np.unique(self.boxes[:, 0].astype(np.int64))

    def at(self, t_label: int) -> np.ndarray:
        return self.boxes[self.boxes[:, 0].astype(np.int64) == int(t_label)]


# ---------------------------------------------------------------------------
# parsing / writing


def _read_source(source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, str):
        return source.encode("ascii")
    if isinstance(source, os.PathLike):
        with open(source, "rb") as fh:
            return fh.read()
    if hasattr(source, "read"):
        data = source.read()
        return data.encode("ascii") if isinstance(data, str) else data
    raise TypeError(f"unsupported event source {type(source)!r}")


def parse_events(source, geometry: SensorGeometry | None = None) -> EventStream:
    """Parse CSV (``t_us,x,y,p``) or EVG1 binary event data.

    ``source`` may be bytes, text, a path-like or a file object. Binary data
    carries its own geometry; a conflicting ``geometry`` argument is an error.
    """
    data = _read_source(source)
    if data[:4] == BINARY_MAGIC:
        return _parse_binary(data, geometry)
    return _parse_csv(data.decode("ascii", errors="replace"), geometry or GEN1)


def _parse_csv(text: str, geometry: SensorGeometry) -> EventStream:
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventParseError(f"line {lineno}: expected 4 fields, got {len(parts)}", lineno)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventParseError(f"line {lineno}: non-integer field in {line!r}", lineno) from None
        if p == 0:
            p = -1
        elif p not in (-1, 1):
            raise EventParseError(f"line {lineno}: polarity {p} not in {{0,1,-1}}", lineno)
        if t < 0:
            raise EventParseError(f"line {lineno}: negative timestamp", lineno)
        if not (0 <= x < geometry.width and 0 <= y < geometry.height):
            raise EventValidationError(
                f"line {lineno}: ({x}, {y}) outside {geometry.width}x{geometry.height} sensor")
        rows.append((t, x, y, p))
    if not rows:
        return EventStream.empty(geometry)
    arr = np.array(rows, dtype=np.int64)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], geometry)


def _parse_binary(data: bytes, geometry: SensorGeometry | None) -> EventStream:
    if len(data) < 20:
        raise EventParseError("truncated EVG1 header", 0)
    width, height, count = struct.unpack_from("<IIQ", data, 4)
    try:
        geom = SensorGeometry(width, height)
    except ValueError as exc:
        raise EventParseError(str(exc), 0) from None
    if geometry is not None and geometry != geom:
        raise EventValidationError(f"binary geometry {width}x{height} differs from {geometry}")
    need = 20 + count * _RECORD.itemsize
    if len(data) != need:
        raise EventParseError(f"EVG1 payload is {len(data)} bytes, expected {need}", 0)
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=20)
    p = rec["p"].astype(np.int64)
    bad = np.flatnonzero((p != 1) & (p != -1))
    if len(bad):
        raise EventParseError(f"record {bad[0]}: polarity {p[bad[0]]}", int(bad[0]) + 1)
    stream = EventStream(rec["t"].astype(np.int64), rec["x"], rec["y"], p, geom)
    stream.validate()
    return stream


def read_events(path, geometry: SensorGeometry | None = None) -> EventStream:
    with open(path, "rb") as fh:
        return parse_events(fh.read(), geometry)


def events_to_csv(stream: EventStream) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
        buf.write(f"{t},{x},{y},{p}\n")
    return buf.getvalue()


def events_to_binary(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    g = stream.geometry
    return BINARY_MAGIC + struct.pack("<IIQ", g.width, g.height, len(stream)) + rec.tobytes()


def write_events(stream: EventStream, path, binary: bool | None = None) -> None:
    if binary is None:
        binary = str(path).endswith((".bin", ".evg"))
    if binary:
        with open(path, "wb") as fh:
            fh.write(events_to_binary(stream))
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(events_to_csv(stream))


def labels_to_csv(gt: GroundTruth) -> str:
    lines = [LABEL_HEADER]
    for t, c, cx, cy, w, h in gt.boxes:
        lines.append(f"{int(t)},{int(c)},{cx:.6f},{cy:.6f},{w:.6f},{h:.6f}")
    return "\n".join(lines) + "\n"


def parse_labels(source) -> GroundTruth:
    text = _read_source(source).decode("ascii", errors="replace")
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise EventParseError(f"label line {lineno}: expected 6 fields", lineno)
        try:
            t, c = int(parts[0]), int(parts[1])
            cx, cy, w, h = (float(v) for v in parts[2:])
        except ValueError:
            raise EventParseError(f"label line {lineno}: bad field in {line!r}", lineno) from None
        if w <= 0 or h <= 0 or c < 0:
            raise EventValidationError(f"label line {lineno}: invalid box")
        rows.append((t, c, cx, cy, w, h))
    return GroundTruth(np.array(rows, dtype=np.float64).reshape(-1, 6))


def read_labels(path) -> GroundTruth:
    with open(path, "rb") as fh:
        return parse_labels(fh.read())


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class RectSpec:
    """A rectangle moving at constant velocity. Positions are the box centre
    at t=0 in pixels, velocity in px/ms. ``contrast`` is +1 for a shape
    brighter than the background and -1 for a darker one."""

    cx: float
    cy: float
    w: float
    h: float
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = 0
    contrast: int = 1

    def center(self, t_us):
        t_ms = np.asarray(t_us, dtype=np.float64) / US_PER_MS
        return self.cx + self.vx * t_ms, self.cy + self.vy * t_ms


@dataclass
class SceneSpec:
    shapes: list = field(default_factory=list)
    duration_us: int = 100_000
    noise_rate: float = 0.0        # events per ms over the whole sensor
    label_hz: float = 30.0
    emit_prob: float = 0.5         # Bernoulli thinning of edge-pixel events
    step_us: int = 1000
    geometry: SensorGeometry = GEN1

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        shapes = [s if isinstance(s, RectSpec) else RectSpec(**s) for s in d.pop("shapes", [])]
        geom = d.pop("geometry", None)
        if isinstance(geom, dict):
            geom = SensorGeometry(**geom)
        elif isinstance(geom, (list, tuple)):
            geom = SensorGeometry(*geom)
        return cls(shapes=shapes, geometry=geom or GEN1, **d)

    def to_dict(self) -> dict:
        return {
            "shapes": [vars(s).copy() for s in self.shapes],
            "duration_us": self.duration_us,
            "noise_rate": self.noise_rate,
            "label_hz": self.label_hz,
            "emit_prob": self.emit_prob,
            "step_us": self.step_us,
            "geometry": [self.geometry.width, self.geometry.height],
        }


def _coverage_bounds(c, size, limit):
    # pixel i is covered iff its centre i+0.5 lies in [c - size/2, c + size/2)
    lo = math.ceil(c - size / 2 - 0.5)
    hi = math.ceil(c + size / 2 - 0.5)  # exclusive
    return max(lo, 0), min(hi, limit)


def _coverage_mask(rect: RectSpec, t_us, geometry) -> np.ndarray:
    cx, cy = rect.center(t_us)
    x0, x1 = _coverage_bounds(float(cx), rect.w, geometry.width)
    y0, y1 = _coverage_bounds(float(cy), rect.h, geometry.height)
    mask = np.zeros((geometry.height, geometry.width), dtype=bool)
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = True
    return mask


def _clamped_box(rect: RectSpec, t_us, geometry):
    cx, cy = rect.center(t_us)
    x0 = max(float(cx) - rect.w / 2, 0.0)
    x1 = min(float(cx) + rect.w / 2, float(geometry.width))
    y0 = max(float(cy) - rect.h / 2, 0.0)
    y1 = min(float(cy) + rect.h / 2, float(geometry.height))
    if x1 <= x0 or y1 <= y0:
        return None
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def label_times(duration_us: int, label_hz: float) -> list[int]:
    period = 1e6 / label_hz
    out, k = [], 1
    while round(k * period) <= duration_us:
        out.append(int(round(k * period)))
        k += 1
    return out


def generate_synthetic(scene: SceneSpec, seed: int = 0) -> tuple[EventStream, GroundTruth]:
    """Render moving rectangles into events plus uniform noise.

    Each simulation step compares pixel coverage before and after; pixels that
    change emit one event (thinned with ``emit_prob``) timed uniformly inside
    the step. A step that changes coverage always keeps at least one event.
    """
    if scene.duration_us <= 0:
        raise ValueError("scene duration must be positive")
    g = scene.geometry
    rng = np.random.default_rng(seed)
    ts, xs, ys, ps = [], [], [], []
    step = scene.step_us
    n_steps = int(math.ceil(scene.duration_us / step))
    for rect in scene.shapes:
        prev = _coverage_mask(rect, 0, g)
        for k in range(n_steps):
            t0, t1 = k * step, min((k + 1) * step, scene.duration_us)
            cur = _coverage_mask(rect, t1, g)
            changed = prev != cur
            if changed.any():
                yy, xx = np.nonzero(changed)
                keep = rng.random(len(xx)) < scene.emit_prob
                if not keep.any():
                    keep[rng.integers(len(xx))] = True
                yy, xx = yy[keep], xx[keep]
                entering = cur[yy, xx]
                pol = np.where(entering, rect.contrast, -rect.contrast)
                ts.append(rng.integers(t0 + 1, t1 + 1, size=len(xx)))
                xs.append(xx)
                ys.append(yy)
                ps.append(pol)
            prev = cur
    if scene.noise_rate > 0:
        n_noise = rng.poisson(scene.noise_rate * scene.duration_us / US_PER_MS)
        ts.append(rng.integers(1, scene.duration_us + 1, size=n_noise))
        xs.append(rng.integers(0, g.width, size=n_noise))
        ys.append(rng.integers(0, g.height, size=n_noise))
        ps.append(rng.choice(np.array([-1, 1]), size=n_noise))
    if ts:
        t = np.concatenate(ts)
        x, y, p = np.concatenate(xs), np.concatenate(ys), np.concatenate(ps)
        order = np.lexsort((p, y, x, t))
        stream = EventStream(t[order], x[order], y[order], p[order], g, sort=False)
    else:
        stream = EventStream.empty(g)

    rows = []
    for tl in label_times(scene.duration_us, scene.label_hz):
        for rect in scene.shapes:
            box = _clamped_box(rect, tl, g)
            if box is not None:
                rows.append((tl, rect.class_id) + box)
    return stream, GroundTruth(np.array(rows, dtype=np.float64).reshape(-1, 6))


def random_scene(rng: np.random.Generator, geometry: SensorGeometry = GEN1,
                 duration_us: int = 100_000, max_shapes: int = 2, noise_rate: float = 2.0,
                 emit_prob: float = 0.35, label_hz: float = 30.0) -> SceneSpec:
    """Two-class moving-rectangle scene. Class 0 boxes are wide, class 1 tall."""
    shapes = []
    n = int(rng.integers(1, max_shapes + 1))
    placed = []
    for _ in range(n):
        cls = int(rng.integers(0, 2))
        if cls == 0:
            w, h = rng.uniform(44, 64), rng.uniform(20, 30)
        else:
            w, h = rng.uniform(16, 24), rng.uniform(40, 60)
        speed = rng.uniform(0.15, 0.4)
        ang = rng.uniform(0, 2 * math.pi)
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        dur_ms = duration_us / US_PER_MS
        for _attempt in range(20):
            cx = rng.uniform(w / 2 + 4, geometry.width - w / 2 - 4)
            cy = rng.uniform(h / 2 + 4, geometry.height - h / 2 - 4)
            ex, ey = cx + vx * dur_ms, cy + vy * dur_ms
            inside = (w / 2 <= ex <= geometry.width - w / 2) and (h / 2 <= ey <= geometry.height - h / 2)
            apart = all(abs(cx - px) > (w + pw) / 2 + 30 or abs(cy - py) > (h + ph) / 2 + 30
                        for px, py, pw, ph in placed)
            if inside and apart:
                break
        placed.append((cx, cy, w, h))
        shapes.append(RectSpec(cx, cy, w, h, vx, vy, cls, int(rng.choice([-1, 1]))))
    return SceneSpec(shapes, duration_us, noise_rate, label_hz, emit_prob, geometry=geometry)


# ---------------------------------------------------------------------------
# windowing / density


def window_slice(stream: EventStream, t_end: int, window: int) -> EventStream:
    """Events with ``t_end - window < t <= t_end``."""
    if window <= 0:
        raise ValueError("window must be positive")
    lo = np.searchsorted(stream.t, t_end - window, side="right")
    hi = np.searchsorted(stream.t, t_end, side="right")
    return stream.subset(slice(lo, hi))


def downsample_density(stream: EventStream, max_per_ms: int, seed: int = 0) -> EventStream:
    """Cap every 1 ms bucket at ``max_per_ms`` events, sampled uniformly
    without replacement; relative order is preserved."""
    if max_per_ms < 1:
        raise ValueError("max_per_ms must be >= 1")
    if len(stream) == 0:
        return stream
    rng = np.random.default_rng(seed)
    bucket = stream.t // US_PER_MS
    starts = np.flatnonzero(np.r_[True, bucket[1:] != bucket[:-1]])
    ends = np.r_[starts[1:], len(bucket)]
    keep = np.ones(len(bucket), dtype=bool)
    for s, e in zip(starts, ends):
        n = e - s
        if n > max_per_ms:
            chosen = rng.choice(n, size=max_per_ms, replace=False)
            sub = np.zeros(n, dtype=bool)
            sub[chosen] = True
            keep[s:e] = sub
    return stream.subset(keep)


def translate_stream(stream: EventStream, dx: int, dy: int) -> EventStream:
    """Shift events by whole pixels, dropping those that leave the sensor."""
    g = stream.geometry
    x, y = stream.x + dx, stream.y + dy
    ok = (x >= 0) & (x < g.width) & (y >= 0) & (y < g.height)
    return EventStream(stream.t[ok], x[ok], y[ok], stream.p[ok], g, sort=False)


__all__ = [
    "Event", "SensorGeometry", "EventStream", "GroundTruth", "RectSpec", "SceneSpec",
    "parse_events", "read_events", "write_events", "events_to_csv", "events_to_binary",
    "parse_labels", "read_labels", "labels_to_csv", "generate_synthetic", "random_scene",
    "label_times", "window_slice", "downsample_density", "translate_stream", "DataError",
]
