"""Seeded feature-canvas sequences for single-layer experiments."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .canvas import FeatureCanvas


def mutating_stream(shape, channels: int, n_strides: int, change_fraction: float = 0.05,
                    density: float = 0.3, seed: int = 0, dtype=np.float32) -> Iterator[FeatureCanvas]:
    """Random sparse canvases where about ``change_fraction`` of all sites are redrawn per stride.

    A redrawn site becomes active with probability ``density`` and gets
    fresh normal values, so sites switch on and off as well as change value.
    The first canvas is flagged as entirely changed.
    """
    rng = np.random.default_rng(seed)
    active = rng.random(shape) < density
    values = np.where(active, rng.standard_normal((channels, *shape)), 0).astype(dtype)
    yield FeatureCanvas(values.copy(), active.copy(), np.ones(shape, dtype=bool))
    for _ in range(n_strides - 1):
        hit = rng.random(shape) < change_fraction
        active = np.where(hit, rng.random(shape) < density, active)
        fresh = rng.standard_normal((channels, *shape))
        values = np.where(active, np.where(hit, fresh, values), 0).astype(dtype)
        yield FeatureCanvas(values.copy(), active.copy(), hit)


def controlled_stream(shape, channels: int, n_strides: int, change_fraction: float,
                      density: float = 0.3, seed: int = 0, dtype=np.float32) -> Iterator[FeatureCanvas]:
    """Fixed active set; each stride exactly ``round(p * active)`` active sites get new values.

    No site switches on or off, so the changed set is always a subset of the
    active set of the requested size.
    """
    rng = np.random.default_rng(seed)
    active = rng.random(shape) < density
    idx = np.flatnonzero(active)
    values = np.where(active, rng.standard_normal((channels, *shape)), 0).astype(dtype)
    yield FeatureCanvas(values.copy(), active.copy(), np.ones(shape, dtype=bool))
    n_change = int(round(change_fraction * len(idx)))
    flat = values.reshape(channels, -1)
    for _ in range(n_strides - 1):
        pick = rng.choice(idx, size=n_change, replace=False)
        flat[:, pick] = rng.standard_normal((channels, n_change)).astype(dtype)
        change = np.zeros(active.size, dtype=bool)
        change[pick] = True
        yield FeatureCanvas(values.copy(), active.copy(), change.reshape(shape))
