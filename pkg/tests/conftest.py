"""Shared fixtures: deterministic images and toy model bundles.

Everything is seeded; no test depends on ambient randomness. The toy
bundle widths keep forward passes cheap while exercising every layer
of the real architecture.
"""

import numpy as np
import pytest

from uwsc import CodecConfig, FilterConfig, ModelBundle
from uwsc.imaging import RgbImage

TOY_CODEC = CodecConfig(width=8, latent_channels=8, hyper_channels=8)
TOY_FILTER = FilterConfig(width=4)


def structured_image(seed, h, w):
    """Smooth multi-frequency scene with mild texture; uint8 RGB."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.stack([
        120 + 60 * np.sin(yy / 23.0) + 30 * np.cos(xx / 17.0),
        100 + 50 * np.cos(yy / 31.0 + 1.0) + 40 * np.sin(xx / 13.0),
        90 + 45 * np.sin((xx + yy) / 29.0),
    ], axis=2)
    base += rng.normal(0.0, 12.0, size=(h, w, 3))
    return RgbImage(np.clip(base, 0, 255).astype(np.uint8))


def underwater_image(seed, h, w):
    """Structured scene pushed through a crude water column: red
    absorbed, green mildly, everything veiled toward teal."""
    img = structured_image(seed, h, w).data.astype(np.float64)
    veil = np.array([10.0, 40.0, 55.0])
    atten = np.array([0.35, 0.75, 0.90])
    out = img * atten + veil
    return RgbImage(np.clip(out, 0, 255).astype(np.uint8))


@pytest.fixture(scope="session")
def toy_bundle():
    return ModelBundle.new(lam=64, codec_config=TOY_CODEC,
                           filter_config=TOY_FILTER, seed=7)


@pytest.fixture(scope="session")
def fixture_images():
    """Five deterministic underwater-looking images of varied sizes."""
    sizes = [(64, 64), (64, 128), (80, 70), (128, 64), (96, 96)]
    return [underwater_image(100 + i, h, w) for i, (h, w) in enumerate(sizes)]
