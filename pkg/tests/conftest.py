import numpy as np
import pytest

from tdkslearn.grid import build_grid
from tdkslearn.tdks import build_cache
from tdkslearn.tdse2d import (PacketSpec, current_density, exact_ks_state,
                              initial_wavefunction, one_electron_density)


@pytest.fixture(scope="session")
def desk_phi0():
    """Exact Kohn-Sham orbital of the p=-1.5 initial frame on the desk TDKS grid (J=120)."""
    fine = build_grid(-40.0, 20.0, 240, 1.0, 1)
    wf = initial_wavefunction(fine, PacketSpec(10.0, -1.5, 1.0))
    phi = exact_ks_state(one_electron_density(wf), current_density(wf), fine)
    return phi[::2].copy()


@pytest.fixture(scope="session")
def desk_cache():
    return build_cache(build_grid(-40.0, 20.0, 120, 0.0125 * 40, 40))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
