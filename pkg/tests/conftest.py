import numpy as np
import pytest

from fairstyle.core import ChannelId
from fairstyle.synthgen import AttributeRule, SyntheticSpec, make_synthetic, stylegan_layout

PLANTED = ChannelId(2, 5)


def biased_spec(base_rate=0.2, channel=PLANTED, **kwargs):
    return SyntheticSpec(
        layers=tuple(stylegan_layout(6, 8)),
        attributes=(AttributeRule("glasses", channel, base_rate),),
        **kwargs,
    )


@pytest.fixture
def spec():
    return biased_spec()


@pytest.fixture
def model(spec):
    return make_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
