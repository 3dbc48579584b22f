import numpy as np
import pytest

from mpcs.dataset import MAGNIFICATIONS, MagnifiedSample, generate_synthetic


@pytest.fixture(scope="session")
def small_synth():
    """16 specimens from 8 patients, 32 px views."""
    return generate_synthetic(16, 8, 0.5, 640, seed=3, output_size=32)


@pytest.fixture(scope="session")
def ten_patient_synth():
    """20 specimens, 10 patients (5 per class), enough for 5 stratified folds."""
    return generate_synthetic(20, 10, 0.5, 640, seed=11, output_size=32)


def make_sample(specimen_id="s0", patient_id="p0", label=0, size=16, seed=0):
    rng = np.random.default_rng(seed)
    images = {mf: rng.integers(0, 256, (size, size, 3), dtype=np.uint8) for mf in MAGNIFICATIONS}
    return MagnifiedSample(specimen_id, patient_id, label, images)
