"""Timestamped point streams: a synthetic scanner, file I/O and packetising.

A stream is a numpy structured array with :data:`POINT_DTYPE`, sorted by time.
"""
from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .grid import StreamPoint

POINT_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])

SSCR_MAGIC = b"SSCR"
SSCR_VERSION = 1
CSV_HEADER = "t,x,y,z,intensity"


class StreamError(RuntimeError):
    pass


class ParseError(StreamError):
    pass


class OrderError(StreamError):
    pass


def empty_stream() -> np.ndarray:
    return np.zeros(0, dtype=POINT_DTYPE)


def make_stream(t, x, y, z, intensity) -> np.ndarray:
    out = np.zeros(len(t), dtype=POINT_DTYPE)
    out["t"], out["x"], out["y"], out["z"], out["intensity"] = t, x, y, z, intensity
    return out


def as_points(stream: np.ndarray) -> Iterator[StreamPoint]:
    for rec in stream:
        yield StreamPoint(float(rec["t"]), float(rec["x"]), float(rec["y"]),
                          float(rec["z"]), float(rec["intensity"]))


# ---------------------------------------------------------------------------
# Synthetic scanner


@dataclass(frozen=True)
class ScannerConfig:
    """Rosette-style non-repetitive scanner looking along +x.

    The beam direction follows ``azimuth = A_h sin(2 pi f1 t)`` and
    ``elevation = A_v sin(2 pi f2 t)`` where ``A_h``/``A_v`` are the half
    fields of view times ``amplitude``.
    """

    pulse_rate: float = 240_000.0
    fov_h: float = 70.4
    fov_v: float = 77.2
    f1: float = 1394.0
    f2: float = 1441.0
    amplitude: float = 1.0
    drop_probability: float = 0.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_range: float = 450.0

    def __post_init__(self):
        if self.pulse_rate <= 0:
            raise ValueError("pulse_rate must be positive")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must be in [0, 1)")

    def directions(self, t: np.ndarray) -> np.ndarray:
        az = np.radians(self.fov_h / 2) * self.amplitude * np.sin(2 * np.pi * self.f1 * t)
        el = np.radians(self.fov_v / 2) * self.amplitude * np.sin(2 * np.pi * self.f2 * t)
        ce = np.cos(el)
        return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; a zero extent along one axis makes it a plane.

    ``velocity`` moves the box linearly in time. ``patch`` > 0 turns on
    time-varying return density: the surface is split into ``patch``-sized
    squares whose return probability is redrawn every ``patch_period``.
    """

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    reflectivity: float = 50.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    patch: float = 0.0
    patch_period: float = 0.05


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...] = field(default_factory=tuple)

    @property
    def empty(self) -> bool:
        return not self.boxes


def _ray_box(origin, dirs, lo, hi):
    """Entry distance of rays into a box; ``inf`` on a miss."""
    n = len(dirs)
    t_near = np.full(n, -np.inf)
    t_far = np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            d = dirs[:, a]
            o = origin[:, a] if origin.ndim == 2 else origin[a]
            lo_a = lo[:, a] if lo.ndim == 2 else lo[a]
            hi_a = hi[:, a] if hi.ndim == 2 else hi[a]
            t1 = (lo_a - o) / d
            t2 = (hi_a - o) / d
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            parallel = d == 0
            inside = (o >= lo_a) & (o <= hi_a)
            near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
            far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
            t_near = np.maximum(t_near, near)
            t_far = np.minimum(t_far, far)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _patch_keep(box: Box, hits: np.ndarray, t: np.ndarray, seed: int) -> np.ndarray:
    epochs = np.floor(t / box.patch_period).astype(np.int64)
    px = np.floor((hits[:, 0] - box.lo[0]) / box.patch).astype(np.int64)
    py = np.floor((hits[:, 1] - box.lo[1]) / box.patch).astype(np.int64)
    nx = int(math.ceil((box.hi[0] - box.lo[0]) / box.patch)) + 1
    ny = int(math.ceil((box.hi[1] - box.lo[1]) / box.patch)) + 1
    px = np.clip(px, 0, nx - 1)
    py = np.clip(py, 0, ny - 1)
    density = np.empty(len(t))
    draws = np.empty(len(t))
    for e in np.unique(epochs).tolist():
        sel = epochs == e
        rng = np.random.default_rng([seed, 0x5EA, e])
        table = rng.random((nx, ny))
        density[sel] = table[px[sel], py[sel]]
        draws[sel] = rng.random(int(np.count_nonzero(sel)))
    return draws < density


def generate(scene: Scene, scanner: ScannerConfig, duration: float, seed: int = 0,
             t0: float = 0.0, chunk: int = 65536) -> np.ndarray:
    """Simulate ``duration`` seconds of the scanner against ``scene``.

    Pulses fire at ``t0 + (k + 1) / pulse_rate``; hits become points carrying
    the surface reflectivity as intensity, misses are dropped.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n_pulses = int(round(duration * scanner.pulse_rate))
    if scene.empty or n_pulses == 0:
        return empty_stream()
    rng = np.random.default_rng(seed)
    origin = np.asarray(scanner.origin, dtype=np.float64)
    out = []
    for start in range(0, n_pulses, chunk):
        k = np.arange(start, min(start + chunk, n_pulses), dtype=np.float64)
        t = t0 + (k + 1) / scanner.pulse_rate
        dirs = scanner.directions(t)
        dropped = rng.random(len(t)) < scanner.drop_probability
        best = np.full(len(t), np.inf)
        refl = np.zeros(len(t))
        for b_i, box in enumerate(scene.boxes):
            vel = np.asarray(box.velocity, dtype=np.float64)
            lo = np.asarray(box.lo, dtype=np.float64)
            hi = np.asarray(box.hi, dtype=np.float64)
            if np.any(vel):
                shift = (t - t0)[:, None] * vel
                lo, hi = lo + shift, hi + shift
            dist = _ray_box(origin, dirs, lo, hi)
            if box.patch > 0:
                cand = np.isfinite(dist)
                pts = origin + dist[cand, None] * dirs[cand]
                keep = np.zeros(len(t), dtype=bool)
                keep[cand] = _patch_keep(box, pts, t[cand], seed + 7919 * b_i)
                dist = np.where(keep, dist, np.inf)
            closer = dist < best
            best = np.where(closer, dist, best)
            refl = np.where(closer, box.reflectivity, refl)
        hit = np.isfinite(best) & (best <= scanner.max_range) & ~dropped
        if not np.any(hit):
            continue
        pts = origin + best[hit, None] * dirs[hit]
        out.append(make_stream(t[hit], pts[:, 0], pts[:, 1], pts[:, 2], refl[hit]))
    if not out:
        return empty_stream()
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Scene presets. ``extent`` is the grid length along x; geometry scales with it.


def preset_wall(extent: float = 80.64) -> Scene:
    d = 0.5 * extent
    return Scene((Box((d, -1.5 * d, -1.2 * d), (d, 1.5 * d, 1.2 * d), 80.0),))


def _ground(extent: float, z: float, refl: float = 20.0) -> Box:
    return Box((0.0, -extent / 2, z), (extent, extent / 2, z), refl)


def preset_bridge(extent: float = 80.64) -> Scene:
    s = extent / 80.64
    boxes = [_ground(extent, -6.0 * s)]
    deck_x = 30.0 * s
    boxes.append(Box((deck_x, -30 * s, 4.0 * s), (deck_x + 4 * s, 30 * s, 5.0 * s), 60.0))
    for k in range(-3, 4):
        y = 8.0 * k * s
        boxes.append(Box((deck_x + 1 * s, y - 0.5 * s, -6.0 * s), (deck_x + 3 * s, y + 0.5 * s, 4.0 * s), 60.0))
    return Scene(tuple(boxes))


def preset_drone(extent: float = 80.64, speed: float = 4.0) -> Scene:
    s = extent / 80.64
    drone = Box((25.0 * s, -6.0 * s, -1.0 * s), (25.0 * s + 0.72, -6.0 * s + 0.65, -1.0 * s + 0.3),
                reflectivity=150.0, velocity=(0.0, speed, 0.2))
    return Scene((_ground(extent, -6.0 * s), drone))


def preset_windy_water(extent: float = 80.64) -> Scene:
    s = extent / 80.64
    water = Box((0.0, -extent / 2, -4.0 * s), (extent, extent / 2, -4.0 * s), 10.0, patch=max(2.0 * s, 0.32))
    shore = Box((50.0 * s, -extent / 2, -4.0 * s), (52.0 * s, extent / 2, 2.0 * s), 40.0)
    return Scene((water, shore))


PRESETS = {
    "wall": preset_wall,
    "bridge": preset_bridge,
    "drone": preset_drone,
    "windy-water": preset_windy_water,
}


# ---------------------------------------------------------------------------
# File formats


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _format_of(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    suffixes = [s for s in path.suffixes if s != ".gz"]
    return "csv" if suffixes and suffixes[-1] == ".csv" else "sscr"


def write_stream(stream: np.ndarray, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _format_of(path, fmt)
    stream = np.asarray(stream, dtype=POINT_DTYPE)
    with _open(path, "wb") as fh:
        if fmt == "csv":
            buf = io.StringIO()
            buf.write(CSV_HEADER + "\n")
            for rec in stream.tolist():
                buf.write("%r,%r,%r,%r,%r\n" % (rec[0], float(np.float32(rec[1])), float(np.float32(rec[2])),
                                                 float(np.float32(rec[3])), float(np.float32(rec[4]))))
            fh.write(buf.getvalue().encode())
        elif fmt == "sscr":
            fh.write(SSCR_MAGIC + struct.pack("<H", SSCR_VERSION))
            fh.write(stream.tobytes())
        else:
            raise ValueError(f"unknown stream format {fmt!r}")


def _check_order(stream: np.ndarray, path) -> np.ndarray:
    t = stream["t"]
    if not np.all(np.isfinite(t)):
        raise ParseError(f"{path}: non-finite timestamp")
    bad = np.flatnonzero(np.diff(t) < 0)
    if len(bad):
        i = int(bad[0]) + 1
        raise OrderError(f"{path}: record {i} has t={t[i]} < previous t={t[i - 1]}")
    return stream


def read_stream(path, fmt: str | None = None) -> np.ndarray:
    """Load a stream file (CSV or SSCR, optionally gzipped)."""
    path = Path(path)
    fmt = _format_of(path, fmt)
    with _open(path, "rb") as fh:
        data = fh.read()
    if fmt == "sscr":
        if data[:4] != SSCR_MAGIC:
            raise ParseError(f"{path}: bad magic {data[:4]!r}")
        (version,) = struct.unpack("<H", data[4:6])
        if version != SSCR_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        body = data[6:]
        if len(body) % POINT_DTYPE.itemsize:
            raise ParseError(f"{path}: truncated record")
        return _check_order(np.frombuffer(body, dtype=POINT_DTYPE).copy(), path)
    if fmt != "csv":
        raise ValueError(f"unknown stream format {fmt!r}")
    rows = []
    for lineno, line in enumerate(data.decode().splitlines(), start=1):
        line = line.strip()
        if not line or (lineno == 1 and line.replace(" ", "") == CSV_HEADER):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            vals = tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    return _check_order(np.array(rows, dtype=POINT_DTYPE) if rows else empty_stream(), path)


# ---------------------------------------------------------------------------
# Packets


@dataclass
class Packet:
    index: int
    t_start: float
    t_end: float
    points: np.ndarray

    def __len__(self):
        return len(self.points)


def packet_bounds(t0: float, stride: float, n: int) -> np.ndarray:
    return t0 + (np.arange(n) + 1) * stride


def packetize(stream: np.ndarray, stride: float, t0: float = 0.0,
              t_end: float | None = None) -> Iterator[Packet]:
    """Slice a time-sorted stream into packets ``(t0 + k*stride, t0 + (k+1)*stride]``.

    Empty packets are emitted for gaps. With ``t_end`` the sequence runs to
    ``t_end`` (points after it are ignored); otherwise it stops at the packet
    holding the last point.
    """
    t = stream["t"]
    if len(t) and t[0] <= t0:
        raise ValueError(f"stream starts at t={t[0]} <= t0={t0}")
    if t_end is not None:
        n = int(round((t_end - t0) / stride))
    elif len(t):
        n = int(math.ceil((t[-1] - t0) / stride)) + 1
    else:
        n = 0
    bounds = packet_bounds(t0, stride, n)
    k = np.searchsorted(bounds, t, side="left")
    if t_end is None and len(t):
        n = int(k[-1]) + 1
    splits = np.searchsorted(k, np.arange(n + 1), side="left")
    for i in range(n):
        start = t0 + i * stride
        yield Packet(i, start, float(bounds[i]), stream[splits[i]:splits[i + 1]])
