import os.path

import numpy as np
import pytest

from memnav import config, gridworld
from memnav.gridworld import MapSpec


@pytest.fixture(scope='session')
def data_dir():
    yield os.path.abspath('example_data')

@pytest.fixture(scope='session')
def culdesac(data_dir):
    p = os.path.join(data_dir, 'maps', 'culdesac_l2.txt')
    with open(p, 'r') as f:
        yield gridworld.read_map(f)

@pytest.fixture(scope='session')
def walls(data_dir):
    p = os.path.join(data_dir, 'maps', 'walls_l2.txt')
    with open(p, 'r') as f:
        yield gridworld.read_map(f)

@pytest.fixture(scope='session')
def nospec(data_dir):
    p = os.path.join(data_dir, 'maps', 'open_nospec.txt')
    with open(p, 'r') as f:
        yield gridworld.read_map(f)

@pytest.fixture(scope='session')
def manifest(data_dir):
    p = os.path.join(data_dir, 'suites', 'manifest.txt')
    with open(p, 'r') as f:
        yield gridworld.read_manifest(f)

@pytest.fixture(scope='session')
def desk_sensor():
    yield config.PRESETS['desk'].sensor

@pytest.fixture(scope='session')
def long_culdesac():
    yield gridworld.generate_map(MapSpec('culdesac', 10.0, 2.0))

@pytest.fixture
def rng():
    yield np.random.default_rng(12345)
