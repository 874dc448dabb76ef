import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True)
settings.load_profile("repo")

from qkdsec import channelsim as cs
from qkdsec import protocolkit as pk


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


@pytest.fixture
def bb84_full_model():
    return pk.bb84_model(delta_theta=0.063, epsilon=1e-5, corr_length=2, p_z=0.9)


@pytest.fixture
def ideal_bb84_model():
    return pk.bb84_model(delta_theta=0.0, epsilon=0.0, corr_length=0, p_z=0.5)


@pytest.fixture
def channel_50km():
    return cs.ChannelParams(distance_km=50.0, eta_det=0.73, p_dark=1e-6)


@pytest.fixture
def decoy_full_model():
    return pk.decoy_model(delta_theta=0.063, epsilon=1e-5, corr_length=2, p_z=0.9,
                          intensities=(0.48, 0.1, 1e-5),
                          intensity_probs=(0.7, 0.2, 0.1),
                          n_cut=3, vacuum_convention=True)
