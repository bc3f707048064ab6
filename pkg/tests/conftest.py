import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repository root to the Python path
current_dir = Path(__file__).parent.parent.absolute()
sys.path.insert(0, str(current_dir))

from room_sim import SimConfig, make_room, octave_bands_for  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_sim():
    """8 kHz, 0.25 s responses: the desk-scale simulation settings"""
    return SimConfig(sample_rate=8000, duration=0.25, max_order=6, tail=True, perturbation=0.02,
                     bands=octave_bands_for(8000))


@pytest.fixture
def shoebox():
    """Unperturbed 5 x 4 x 3 m room with a flat 0.5 s Sabine absorption"""
    from room_sim import sabine_absorption

    room = make_room((5.0, 4.0, 3.0), perturbation=0.0, bands=octave_bands_for(8000))
    alpha = sabine_absorption(np.full(len(room.bands), 0.5), room)
    return room.with_absorption(alpha)
