import numpy as np
import pytest

import catalog
from config import Config
from mesh import build_box_mesh, interpolate


@pytest.fixture
def double_well():
    return catalog.get('double_well')


@pytest.fixture
def unit_mesh():
    return build_box_mesh(1, (0.0, 1.0), 16)


@pytest.fixture
def zero_on_unit(unit_mesh):
    return interpolate('0', unit_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(Config.DEFAULT_SEED)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, 'OUTPUT_OVERRIDE', None)
    return str(tmp_path / 'results')
