import math

import numpy as np
import pytest

from itm.services import background_tasks, data_manager, logger as error_logger
from itm.services.geometry import ScalarField, make_grid
from itm.services.media import gaussian_bump, periodic_offsets, preset_free


@pytest.fixture(autouse=True)
def clean_state():
    """Module-level status tables are shared; start every test from empty."""
    background_tasks.reset_status()
    error_logger.clear_errors()
    data_manager.clear_cache()
    yield


@pytest.fixture
def grid_2pi():
    return make_grid(1, 2 * math.pi, 64)


@pytest.fixture
def line_grid():
    return make_grid(1, 20.0, 256)


@pytest.fixture
def free_line(line_grid):
    return preset_free(line_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian(grid, width=1.0, center=None):
    return gaussian_bump(grid, center=center, width=width)


def gaussian_derivative(grid, width=1.0, center=None, axis=0):
    bump = gaussian_bump(grid, center=center, width=width)
    dx = periodic_offsets(grid, center)[axis]
    return bump.with_values(-dx / width ** 2 * bump.values)


def sine(grid, m=1, phase=0.0):
    x = grid.coordinates()[0]
    return ScalarField(grid, np.sin(2 * np.pi * m * x / grid.L + phase))


def base_config(**overrides):
    """Small 1-d free-medium config mapping for harness tests."""
    raw = {
        'name': 'unit',
        'kind': 'run',
        'grid': {'d': 1, 'L': 20.0, 'N': 128},
        'medium': {'preset': 'free'},
        'schedule': [{'T': 1.5, 'eps': 0.1, 'eta0': 0.5}],
        'initial': {
            'u0': {'type': 'gaussian', 'width': 1.0},
            'u1': {'type': 'gaussian-derivative', 'width': 1.0},
        },
        'run': {'t_end': 3.5, 'snapshots': [0.0, 3.0]},
        'seed': 0,
        'threads': 1,
    }
    raw.update(overrides)
    return raw
