import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, scale=1.0):
    S = rng.standard_normal((n, n))
    return scale * (S @ S.T + n * np.eye(n)) / n
