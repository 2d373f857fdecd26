"""Sliding-window pillar grid with per-pillar circular queues and change maps.

Points arrive in time-ordered packets. Each in-bounds point is enqueued into
the pillar (full-height column) it falls in, and points older than the window
are dequeued again. Every pillar touched by an insertion or a removal gets its
bit set in a :class:`ChangeMap`, and only those pillars have their
mean-offset decorations recomputed.

Sites are addressed as ``(iy, ix)`` in row-major ``(H, W)`` arrays, with
``ix`` running along x and ``iy`` along y. The flat index ``iy * W + ix`` is
used as the pillar key.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Feature layout of a decorated point (D = 9).
FEATURES = ("x", "y", "z", "intensity", "x_p", "y_p", "x_c", "y_c", "z_c")
D = len(FEATURES)

# Operation costs of the pillar stage.
OPS_INSERT = 6
OPS_REMOVE = 13
OPS_OFFSET_PER_POINT = 3


class GridError(RuntimeError):
    pass


class PillarOverflow(GridError):
    """A pillar would hold more than ``max_points`` points."""


class ActivePillarOverflow(GridError):
    """More than ``max_pillars`` pillars would be active at once."""


class StreamPoint(NamedTuple):
    t: float
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class GridConfig:
    pillar_size: float = 0.16
    x_range: tuple[float, float] = (0.0, 80.64)
    y_range: tuple[float, float] = (-40.32, 40.32)
    z_range: tuple[float, float] = (-10.0, 10.0)
    max_points: int = 100
    max_pillars: int = 12000
    window: float = 0.100
    stride: float = 0.010
    on_overflow: str = "error"

    def __post_init__(self):
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            cells = (hi - lo) / self.pillar_size
            if hi <= lo or abs(cells - round(cells)) > 1e-6 or round(cells) < 1:
                raise ValueError(f"{name} {lo, hi} is not a positive multiple of pillar_size {self.pillar_size}")
        if self.z_range[1] <= self.z_range[0]:
            raise ValueError(f"empty z_range {self.z_range}")
        if not 0 < self.stride <= self.window:
            raise ValueError("need 0 < stride <= window")
        if self.max_points < 1 or self.max_pillars < 1:
            raise ValueError("max_points and max_pillars must be >= 1")
        if self.on_overflow not in ("error", "drop-newest"):
            raise ValueError(f"unknown overflow policy {self.on_overflow!r}")

    @property
    def W(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size))

    @property
    def H(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size))

    @property
    def shape(self) -> tuple[int, int]:
        return self.H, self.W

    @classmethod
    def square(cls, cells: int, pillar_size: float = 0.16, **kw) -> "GridConfig":
        """Grid of ``cells x cells`` pillars starting at x=0 and centred on y=0."""
        extent = cells * pillar_size
        return cls(pillar_size=pillar_size, x_range=(0.0, extent),
                   y_range=(-extent / 2, extent / 2), **kw)


def locate(point: StreamPoint, cfg: GridConfig) -> tuple[int, int] | None:
    """Pillar index ``(ix, iy)`` of a point, or ``None`` when out of bounds.

    Bins are half-open: a point on the upper grid boundary is out of bounds.
    """
    ix, iy, ok = locate_many(np.array([point.x]), np.array([point.y]), np.array([point.z]), cfg)
    if not ok[0]:
        return None
    return int(ix[0]), int(iy[0])


def locate_many(x, y, z, cfg: GridConfig):
    """Vectorised :func:`locate`. Returns ``(ix, iy, in_bounds)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    fx = np.floor((x - cfg.x_range[0]) / cfg.pillar_size)
    fy = np.floor((y - cfg.y_range[0]) / cfg.pillar_size)
    ok = (
        (fx >= 0) & (fx < cfg.W) & (fy >= 0) & (fy < cfg.H)
        & (z >= cfg.z_range[0]) & (z < cfg.z_range[1])
    )
    ix = np.where(ok, fx, -1).astype(np.int64)
    iy = np.where(ok, fy, -1).astype(np.int64)
    return ix, iy, ok


def pillar_centre(ix, iy, cfg: GridConfig):
    cx = cfg.x_range[0] + (np.asarray(ix) + 0.5) * cfg.pillar_size
    cy = cfg.y_range[0] + (np.asarray(iy) + 0.5) * cfg.pillar_size
    return cx, cy


class ChangeMap:
    """Boolean ``(H, W)`` bitmap of sites that may differ from the previous stride."""

    def __init__(self, shape: tuple[int, int], bits: np.ndarray | None = None):
        self.bits = np.zeros(shape, dtype=bool) if bits is None else bits

    @property
    def shape(self):
        return self.bits.shape

    @property
    def changed_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def set_flat(self, flat_idx) -> None:
        self.bits.reshape(-1)[np.asarray(flat_idx, dtype=np.int64)] = True

    def clear_all(self) -> None:
        self.bits[...] = False

    def flat_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def copy(self) -> "ChangeMap":
        return ChangeMap(self.shape, self.bits.copy())

    def __or__(self, other: "ChangeMap") -> "ChangeMap":
        return ChangeMap(self.shape, self.bits | other.bits)

    def __eq__(self, other):
        return isinstance(other, ChangeMap) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"ChangeMap(shape={self.shape}, changed={self.changed_count})"


class PillarBuffer:
    """Fixed-capacity circular queue of decorated points for one pillar.

    Slots hold ``(t, features[9])``. Removed slots are zero-padded so the raw
    storage always matches the padded tensor the encoder would see.
    """

    __slots__ = ("ix", "iy", "capacity", "t", "feats", "head", "count")

    def __init__(self, ix: int, iy: int, capacity: int):
        self.ix = ix
        self.iy = iy
        self.capacity = capacity
        self.t = np.zeros(capacity, dtype=np.float64)
        self.feats = np.zeros((capacity, D), dtype=np.float64)
        self.head = 0
        self.count = 0

    def _slots(self, start: int, n: int) -> np.ndarray:
        return (self.head + start + np.arange(n)) % self.capacity

    def push(self, t: np.ndarray, feats: np.ndarray) -> None:
        n = len(t)
        if self.count + n > self.capacity:
            raise PillarOverflow(
                f"pillar ({self.ix}, {self.iy}) would hold {self.count + n} > {self.capacity} points")
        slots = self._slots(self.count, n)
        self.t[slots] = t
        self.feats[slots] = feats
        self.count += n

    def pop_oldest(self, n: int) -> None:
        if n > self.count:
            raise GridError(f"cannot dequeue {n} of {self.count} points")
        slots = self._slots(0, n)
        self.t[slots] = 0.0
        self.feats[slots] = 0.0
        self.head = (self.head + n) % self.capacity
        self.count -= n

    def ordered(self) -> tuple[np.ndarray, np.ndarray]:
        """Timestamps and features, oldest first (copies)."""
        slots = self._slots(0, self.count)
        return self.t[slots], self.feats[slots]

    def redecorate(self) -> None:
        """Recompute the offsets to the pillar's arithmetic mean for every point."""
        if self.count == 0:
            return
        slots = self._slots(0, self.count)
        pts = self.feats[slots]
        for axis in range(3):
            col = np.ascontiguousarray(pts[:, axis])
            mean = col.sum() / self.count
            pts[:, 6 + axis] = col - mean
        self.feats[slots] = pts


@dataclass
class StrideReport:
    inserted: int = 0
    removed: int = 0
    dropped_oob: int = 0
    overflowed: int = 0
    emptied: int = 0
    redecorated: int = 0
    # per changed pillar: number of points it holds after the stride
    changed_points: list[int] = field(default_factory=list)


def count_ops(report: StrideReport) -> int:
    """Pillar-stage operation count of one stride.

    6 per insertion, 13 per removal, ``n`` to take the mean of each changed
    pillar and 3 per point of each changed pillar for the mean offsets.
    """
    n_changed = sum(report.changed_points)
    return (OPS_INSERT * report.inserted + OPS_REMOVE * report.removed
            + n_changed + OPS_OFFSET_PER_POINT * n_changed)


def count_ops_full(window_points: int, pillar_points: list[int] | np.ndarray) -> int:
    """Operation count of conventional one-shot pillarisation of the whole window."""
    n = int(np.sum(pillar_points))
    return OPS_INSERT * window_points + n + OPS_OFFSET_PER_POINT * n


class PillarGrid:
    """The sliding-window grid: lazily materialised pillars plus a global FIFO.

    The FIFO stores insertion records ``(t, flat index)`` in stream order, so
    expiring points is proportional to the number of evictions rather than
    the number of pillars.
    """

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        self.pillars: dict[int, PillarBuffer] = {}
        self._fifo: deque[tuple[np.ndarray, np.ndarray]] = deque()
        self._fifo_head = 0
        self._last_t = -math.inf

    @property
    def shape(self):
        return self.cfg.shape

    @property
    def active_count(self) -> int:
        return len(self.pillars)

    @property
    def point_count(self) -> int:
        return sum(p.count for p in self.pillars.values())

    def fifo_head_time(self) -> float | None:
        if not self._fifo:
            return None
        return float(self._fifo[0][0][self._fifo_head])

    def active_mask(self) -> np.ndarray:
        mask = np.zeros(self.cfg.H * self.cfg.W, dtype=bool)
        if self.pillars:
            mask[np.fromiter(self.pillars.keys(), dtype=np.int64)] = True
        return mask.reshape(self.cfg.shape)

    # -- Algorithm steps -------------------------------------------------

    def evict_expired(self, t_now: float, change_map: ChangeMap) -> tuple[int, int]:
        """Dequeue every point with ``t < t_now - window``.

        Returns ``(removed, emptied)``.
        """
        cutoff = t_now - self.cfg.window
        expired = []
        while self._fifo:
            ts, lins = self._fifo[0]
            stop = int(np.searchsorted(ts, cutoff, side="left"))
            if stop <= self._fifo_head:
                break
            expired.append(lins[self._fifo_head:stop])
            if stop == len(ts):
                self._fifo.popleft()
                self._fifo_head = 0
            else:
                self._fifo_head = stop
                break
        if not expired:
            return 0, 0
        lins = np.concatenate(expired)
        keys, counts = np.unique(lins, return_counts=True)
        emptied = 0
        for key, n in zip(keys.tolist(), counts.tolist()):
            pillar = self.pillars[key]
            pillar.pop_oldest(n)
            if pillar.count == 0:
                del self.pillars[key]
                emptied += 1
        change_map.set_flat(keys)
        return len(lins), emptied

    def ingest_packet(self, points: np.ndarray, t_now: float, change_map: ChangeMap) -> tuple[int, int, int]:
        """Enqueue a time-sorted packet of points.

        ``points`` is a structured array with fields ``t, x, y, z, intensity``
        (see :data:`deltapillars.stream.POINT_DTYPE`). Returns
        ``(inserted, dropped_oob, overflowed)``. Capacity violations raise
        unless the grid was configured with ``on_overflow="drop-newest"``;
        points are never randomly sampled.
        """
        if len(points) == 0:
            return 0, 0, 0
        t = np.asarray(points["t"], dtype=np.float64)
        if t[0] < self._last_t or np.any(np.diff(t) < 0):
            raise GridError("packet timestamps go backwards")
        if t[-1] > t_now:
            raise GridError(f"packet holds a point at t={t[-1]} after t_now={t_now}")
        cfg = self.cfg
        ix, iy, ok = locate_many(points["x"], points["y"], points["z"], cfg)
        dropped_oob = int(np.count_nonzero(~ok))
        sel = np.flatnonzero(ok)
        lin = iy[sel] * cfg.W + ix[sel]

        keep = np.ones(len(sel), dtype=bool)
        overflowed = 0
        order = np.argsort(lin, kind="stable")
        keys, starts, counts = np.unique(lin[order], return_index=True, return_counts=True)

        # capacity checks happen before any mutation
        existing = np.array([self.pillars[k].count if k in self.pillars else 0 for k in keys.tolist()],
                            dtype=np.int64)
        excess = existing + counts - cfg.max_points
        if np.any(excess > 0):
            if cfg.on_overflow == "error":
                k = int(keys[np.argmax(excess)])
                raise PillarOverflow(
                    f"pillar ({k % cfg.W}, {k // cfg.W}) would hold "
                    f"{int(existing.max() + counts.max())} > {cfg.max_points} points; refusing to sample")
            for j in np.flatnonzero(excess > 0):
                drop = order[starts[j] + counts[j] - excess[j]: starts[j] + counts[j]]
                keep[drop] = False
                overflowed += int(excess[j])

        is_new = existing == 0
        n_new = int(np.count_nonzero(is_new & (counts - np.maximum(excess, 0) > 0)))
        room = cfg.max_pillars - len(self.pillars)
        if n_new > room:
            if cfg.on_overflow == "error":
                raise ActivePillarOverflow(
                    f"{len(self.pillars) + n_new} active pillars would exceed {cfg.max_pillars}")
            # keep the earliest-touched new pillars
            new_idx = np.flatnonzero(is_new)
            first_seen = order[starts[new_idx]]
            for j in new_idx[np.argsort(first_seen, kind="stable")][max(room, 0):]:
                members = order[starts[j]: starts[j] + counts[j]]
                overflowed += int(np.count_nonzero(keep[members]))
                keep[members] = False

        sel = sel[keep]
        lin = lin[keep]
        if len(sel) == 0:
            return 0, dropped_oob, overflowed

        kept_ix = ix[sel]
        kept_iy = iy[sel]
        feats = np.zeros((len(sel), D), dtype=np.float64)
        feats[:, 0] = points["x"][sel]
        feats[:, 1] = points["y"][sel]
        feats[:, 2] = points["z"][sel]
        feats[:, 3] = points["intensity"][sel]
        cx, cy = pillar_centre(kept_ix, kept_iy, cfg)
        feats[:, 4] = feats[:, 0] - cx
        feats[:, 5] = feats[:, 1] - cy
        ts = t[sel]

        order = np.argsort(lin, kind="stable")
        keys, starts, counts = np.unique(lin[order], return_index=True, return_counts=True)
        for k, s, n in zip(keys.tolist(), starts.tolist(), counts.tolist()):
            rows = order[s:s + n]
            pillar = self.pillars.get(k)
            if pillar is None:
                pillar = self.pillars[k] = PillarBuffer(k % cfg.W, k // cfg.W, cfg.max_points)
            pillar.push(ts[rows], feats[rows])
        change_map.set_flat(keys)
        self._fifo.append((ts, lin))
        self._last_t = float(t[-1])
        return len(sel), dropped_oob, overflowed

    def refresh_decorations(self, change_map: ChangeMap) -> tuple[int, list[int]]:
        """Recompute mean offsets in every changed pillar.

        Returns the number of re-decorated pillars and the point count of each
        changed site (zero for emptied pillars), which feeds :func:`count_ops`.
        """
        n = 0
        sizes = []
        for key in change_map.flat_indices().tolist():
            pillar = self.pillars.get(key)
            if pillar is None:
                sizes.append(0)
                continue
            pillar.redecorate()
            sizes.append(pillar.count)
            n += 1
        return n, sizes

    def step(self, points: np.ndarray, t_now: float, change_map: ChangeMap) -> StrideReport:
        """One stride: expire old points, insert the packet, refresh decorations."""
        report = StrideReport()
        report.removed, report.emptied = self.evict_expired(t_now, change_map)
        report.inserted, report.dropped_oob, report.overflowed = self.ingest_packet(points, t_now, change_map)
        report.redecorated, report.changed_points = self.refresh_decorations(change_map)
        return report

    def snapshot(self):
        """Grid contents as flat arrays sorted by pillar then time.

        Returns ``(flat_index, t, features)`` with one row per stored point.
        """
        keys = sorted(self.pillars)
        if not keys:
            return np.zeros(0, np.int64), np.zeros(0), np.zeros((0, D))
        lins, ts, fs = [], [], []
        for k in keys:
            t, f = self.pillars[k].ordered()
            lins.append(np.full(len(t), k, dtype=np.int64))
            ts.append(t)
            fs.append(f)
        return np.concatenate(lins), np.concatenate(ts), np.concatenate(fs)
