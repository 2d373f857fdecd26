"""Pillar feature net: per-point linear map, max over the pillar, scatter to canvas."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .canvas import FeatureCanvas
from .grid import D, ChangeMap, PillarBuffer, PillarGrid

SSCW_MAGIC = b"SSCW"
SSCW_VERSION = 1


@dataclass
class EncoderWeights:
    linear: np.ndarray  # (C, D)
    bias: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray

    def __post_init__(self):
        c = self.linear.shape[0]
        if self.linear.ndim != 2:
            raise ValueError("linear must be a C x D matrix")
        for name in ("bias", "bn_scale", "bn_shift"):
            if getattr(self, name).shape != (c,):
                raise ValueError(f"{name} must have shape ({c},)")
        for arr in (self.linear, self.bias, self.bn_scale, self.bn_shift):
            if not np.all(np.isfinite(arr)):
                raise ValueError("encoder weights must be finite")

    @property
    def channels(self) -> int:
        return self.linear.shape[0]

    @property
    def dims(self) -> int:
        return self.linear.shape[1]

    @classmethod
    def random(cls, seed: int = 0, channels: int = 64, dims: int = D) -> "EncoderWeights":
        """Untrained weights: U(-0.1, 0.1) for the linear map and bias, BN near identity."""
        rng = np.random.default_rng(seed)
        u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape).astype(np.float32).astype(np.float64)
        scale = (1.0 + u(channels)).astype(np.float32).astype(np.float64)
        return cls(u(channels, dims), u(channels), scale, u(channels))

    @classmethod
    def identity(cls, dims: int = D) -> "EncoderWeights":
        return cls(np.eye(dims), np.zeros(dims), np.ones(dims), np.zeros(dims))

    def save(self, path) -> None:
        c, d = self.linear.shape
        with open(path, "wb") as fh:
            fh.write(SSCW_MAGIC + struct.pack("<HII", SSCW_VERSION, c, d))
            for arr in (self.linear, self.bias, self.bn_scale, self.bn_shift):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        data = Path(path).read_bytes()
        if data[:4] != SSCW_MAGIC:
            raise ValueError(f"{path}: not an SSCW weights file")
        version, c, d = struct.unpack("<HII", data[4:14])
        if version != SSCW_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        flat = np.frombuffer(data[14:], dtype="<f4").astype(np.float64)
        if len(flat) != c * d + 3 * c:
            raise ValueError(f"{path}: expected {c * d + 3 * c} values, found {len(flat)}")
        return cls(flat[:c * d].reshape(c, d).copy(), flat[c * d:c * d + c].copy(),
                   flat[c * d + c:c * d + 2 * c].copy(), flat[c * d + 2 * c:].copy())


def point_features(points: np.ndarray, weights: EncoderWeights) -> np.ndarray:
    """``bn(linear @ p + bias)`` for each row of ``points`` (n, D) -> (n, C).

    The dot product is accumulated feature by feature in a fixed order so the
    result does not depend on how points are batched.
    """
    lin = weights.linear
    acc = points[:, 0, None] * lin[:, 0]
    for d in range(1, lin.shape[1]):
        acc += points[:, d, None] * lin[:, d]
    acc += weights.bias
    return acc * weights.bn_scale + weights.bn_shift


def encode_pillar(pillar: PillarBuffer, weights: EncoderWeights) -> np.ndarray:
    """Channel-wise max of the point features over the pillar's real points."""
    if pillar.count == 0:
        raise ValueError("cannot encode an empty pillar")
    _, pts = pillar.ordered()
    return point_features(pts, weights).max(axis=0)


def scatter_changed(grid: PillarGrid, change_map: ChangeMap, weights: EncoderWeights,
                    canvas: FeatureCanvas) -> FeatureCanvas:
    """Re-encode the changed pillars and write them into ``canvas`` in place.

    Emptied pillars are zeroed and deactivated. ``canvas.change`` becomes a
    copy of ``change_map``; every other site is left untouched.
    """
    keys = change_map.flat_indices()
    width = grid.cfg.W
    flat_vals = canvas.values.reshape(canvas.channels, -1)
    flat_active = canvas.active.reshape(-1)
    live = [k for k in keys.tolist() if k in grid.pillars]
    dead = np.setdiff1d(keys, np.asarray(live, dtype=np.int64), assume_unique=True)
    flat_vals[:, dead] = 0
    flat_active[dead] = False
    if live:
        chunks, sizes = [], []
        for k in live:
            _, pts = grid.pillars[k].ordered()
            chunks.append(pts)
            sizes.append(len(pts))
        feats = point_features(np.concatenate(chunks), weights)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        pooled = np.maximum.reduceat(feats, starts, axis=0)
        live = np.asarray(live, dtype=np.int64)
        flat_vals[:, live] = pooled.T.astype(canvas.values.dtype)
        flat_active[live] = True
    canvas.change = change_map.bits.copy()
    assert canvas.values.shape[1:] == (grid.cfg.H, width)
    return canvas
