import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def toy_patches():
    """Normalized (micro 64², clinical 8²) patch pools from two small phantoms."""
    from cmsr.phantom import PhantomSpec, generate_phantom_pair
    from cmsr.volumeio import PatchSet, PatchSpec, normalize_intensity, sample_patches

    micro, clinical = [], []
    for seed in (100, 101):
        hr, lr = generate_phantom_pair(PhantomSpec(seed=seed))
        spec = PatchSpec(8, 64, 48, rng_seed=seed)
        micro.append(sample_patches(normalize_intensity(hr, (-1000, 400)), None, spec, "hr"))
        clinical.append(sample_patches(normalize_intensity(lr, (-1000, 400)), None, spec, "lr"))
    return PatchSet.concat(micro), PatchSet.concat(clinical)
