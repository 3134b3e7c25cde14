import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from estimators import MonteCarloConfig  # noqa: E402


@pytest.fixture
def small_mc():
    return MonteCarloConfig(n_paths=20000, dt=5e-3, seed=7, batch_size=5000, workers=1)
