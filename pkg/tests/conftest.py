import numpy as np
import pytest

from deltapillars import stream as st
from deltapillars.canvas import FeatureCanvas
from deltapillars.grid import GridConfig

TOY_CELLS = 64
TOY_PULSE_RATE = 24000.0


def toy_config(**kw) -> GridConfig:
    return GridConfig.square(TOY_CELLS, **kw)


def toy_stream(duration: float, seed: int = 0, preset: str = "drone") -> np.ndarray:
    cfg = toy_config()
    scene = st.PRESETS[preset](cfg.x_range[1] - cfg.x_range[0])
    return st.generate(scene, st.ScannerConfig(pulse_rate=TOY_PULSE_RATE), duration, seed=seed)


def random_canvas(rng, channels, shape, density=0.3, dtype=np.float32, change=None) -> FeatureCanvas:
    active = rng.random(shape) < density
    values = np.where(active, rng.standard_normal((channels, *shape)), 0).astype(dtype)
    if change is None:
        change = np.ones(shape, dtype=bool)
    return FeatureCanvas(values, active, change)


@pytest.fixture(scope="session")
def drone_stream():
    return toy_stream(0.5, seed=3)
