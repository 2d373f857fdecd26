from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureCanvas:
    """A ``C x H x W`` feature map with its active-site and change bitmaps.

    Inactive sites hold exact zeros. ``change`` marks sites whose values may
    differ from the previous stride (a superset of the real differences).
    """

    values: np.ndarray
    active: np.ndarray
    change: np.ndarray

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    @classmethod
    def zeros(cls, channels: int, shape: tuple[int, int], dtype=np.float32) -> "FeatureCanvas":
        return cls(np.zeros((channels, *shape), dtype=dtype),
                   np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))

    def copy(self) -> "FeatureCanvas":
        return FeatureCanvas(self.values.copy(), self.active.copy(), self.change.copy())
