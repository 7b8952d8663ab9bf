import numpy as np
import pytest

from binaural_diffusion.dsp_render import ShoeboxRoom, make_synthetic_dataset, make_toy_hrtf_bank


@pytest.fixture(scope="session")
def toy_bank():
    return make_toy_hrtf_bank(8000.0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, toy_bank):
    """Two short DSP-rendered clips at 8 kHz."""
    out = tmp_path_factory.mktemp("data")
    return make_synthetic_dataset(3, 2, 0.05, 8000.0, ShoeboxRoom(), toy_bank, out)


def delta_bank(sample_rate=8000.0):
    from binaural_diffusion.dsp_render import ImpulseResponse

    one = np.array([1.0])
    return {(0.0, 0.0): (ImpulseResponse(one, sample_rate, "l"), ImpulseResponse(one, sample_rate, "r"))}
