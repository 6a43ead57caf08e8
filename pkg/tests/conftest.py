import numpy as np
import pytest

from sphlight import EquirectImage, NormalMap, ShCoefficients, dering
from sphlight.sh import direction_grid


def dc_dominant_coeffs(rng, dc_range=(1.5, 3.0), band_range=0.3) -> ShCoefficients:
    """Random lighting with a strong positive ambient term, deringed.

    Keeps the irradiance positive over the whole sphere so render clamping stays
    inactive, which several gradient and recovery oracles require.
    """
    values = rng.uniform(-band_range, band_range, (3, 9))
    values[:, 0] = rng.uniform(*dc_range, size=3)
    return dering(ShCoefficients(values))


def full_sphere_normals(width: int, height: int) -> NormalMap:
    return NormalMap(direction_grid(width, height).copy())


def random_image(rng, width: int, height: int, lo=0.05, hi=1.0) -> EquirectImage:
    return EquirectImage(rng.uniform(lo, hi, (height, width, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
