import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from exray.imgproc import Image  # noqa: E402
from exray.models import ChannelOrder, PipelineSpec, Resizer  # noqa: E402
from exray.synth import textured_image, write_dataset  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance harnesses that run for tens of seconds")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pipeline():
    return PipelineSpec(
        channel_order=ChannelOrder.RGB,
        resizer=Resizer.AREA,
        target_h=8,
        target_w=8,
        norm_lo=-1.0,
        norm_hi=1.0,
        rotation=0,
    )


@pytest.fixture
def image_dir(tmp_path, rng):
    """Three textured 12x10 images with labels."""
    images = [textured_image(12, 10, rng, dominant=i % 3) for i in range(3)]
    directory = tmp_path / "images"
    write_dataset(directory, images, labels=[0, 1, 2])
    return directory


@pytest.fixture
def gradient_image():
    yy, xx = np.mgrid[0:16, 0:12]
    values = np.stack([yy * 15, xx * 20, (yy + xx) * 8], axis=-1)
    return Image(np.clip(values, 0, 255).astype(np.uint8))
