import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from nets import DiscriminatorConfig, GeneratorConfig, UNetConfig
from volume_io import PhantomSpec


@pytest.fixture
def small_spec():
    return PhantomSpec(image_size=32, n_subjects=3, n_slices=6, tumor_radius_range=(3, 6), seed=3)


@pytest.fixture
def tiny_unet():
    return UNetConfig(in_channels=4, encoder_channels=(4, 8), out_channels=4)


@pytest.fixture
def tiny_generator():
    return GeneratorConfig(in_channels=4, encoder_channels=(4, 8), out_channels=4)


@pytest.fixture
def tiny_discriminator():
    return DiscriminatorConfig(in_channels=4, channels=(4, 8))
