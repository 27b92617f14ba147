import numpy as np
import pytest
import torch

from gaze_focus.adapter import AdapterConfig
from gaze_focus.backbone import BackboneDims
from gaze_focus.data import SynthConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_synth_config() -> SynthConfig:
    return SynthConfig(image_size=64)


@pytest.fixture(scope="session")
def small_backbone_dims() -> BackboneDims:
    return BackboneDims(channels=32, text_dim=24, visual_layers=10)


@pytest.fixture(scope="session")
def small_adapter_config() -> AdapterConfig:
    return AdapterConfig(dim=48, heads=4, decoder_hidden=32, decoder_out=32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
