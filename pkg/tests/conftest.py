from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from fdi_workbench.lti import ttc_model
from fdi_workbench.region import Box

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
TTC_CONFIG = ROOT / "configs" / "ttc.toml"


@pytest.fixture
def ttc():
    return ttc_model()


@pytest.fixture
def x_s():
    return Box([-25.0, -30.0], [25.0, 30.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
