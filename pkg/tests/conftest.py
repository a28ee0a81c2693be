import numpy as np
import pytest

import voxcomp as vc
from voxcomp.cli import _block_stimulus


def make_phantom(seed=7, snr_db=20.0, dims=(16, 16, 8, 64), n_stimuli=4,
                 n_regions=4, block=6, rest=2):
    """Standard desk-scale phantom with full ground truth."""
    stim = _block_stimulus(n_stimuli, dims[3], block, rest)
    hrf = vc.HrfParams()
    vol, truth = vc.generate(dims, stim, hrf, n_regions, snr_db, seed=seed)
    return vol, truth, stim, hrf


@pytest.fixture(scope="session")
def phantom():
    return make_phantom()


@pytest.fixture(scope="session")
def phantom_mask(phantom):
    vol, _, _, _ = phantom
    return vc.auto_mask(vol, rel_threshold=0.1)


def small_model_config(**overrides):
    base = dict(k=4, t=64, embed_freqs=4, mlp_layers=3, mlp_width=16,
                feat_channels=2, fusion_levels=2, fusion_width=8)
    base.update(overrides)
    return vc.ModelConfig(**base)


@pytest.fixture(scope="session")
def phantom_fit(phantom, phantom_mask):
    """One shared full training run on the phantom (used by several tests)."""
    vol, _, _, _ = phantom
    cfg = vc.TrainConfig(epochs=600, pretrain_epochs=300, batch_voxels=128, seed=0)
    return vc.compress_volume(vol, small_model_config(), cfg, mask=phantom_mask,
                              bits=8)
