import numpy as np
import pytest

from dsvid import codec as cd
from dsvid import frames as fr


@pytest.fixture(scope="session")
def small_clip():
    return fr.synthetic_clip(64, 64, 6, seed=1)


@pytest.fixture(scope="session")
def levels():
    return cd.default_levels()


@pytest.fixture(scope="session")
def checkerboard():
    y = np.zeros((64, 64), dtype=np.uint8)
    y[::2, ::2] = 255
    y[1::2, 1::2] = 255
    u = np.full((32, 32), 128, dtype=np.uint8)
    return fr.RawFrame(64, 64, y, u, u.copy())
