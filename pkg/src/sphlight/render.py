"""Diffuse irradiance from SH lighting, image-based relighting, blending and deringing."""
from __future__ import annotations

import math

import numpy as np

from . import sh
from .images import EquirectImage, NormalMap

# Clamped-cosine lobe gains per band: pi, 2pi/3, pi/4.
A_HAT = (math.pi, 2.0 * math.pi / 3.0, math.pi / 4.0)
_BAND_GAIN = np.array([A_HAT[b] for b in sh.SH_BAND])

# Quadratic-form constants, derived from the lobe gains and basis normalization
# (off-diagonal entries appear twice in the quadratic form, hence the halving).
C1 = A_HAT[2] * sh.SH_C2_2          # 0.429043
C2 = A_HAT[1] * sh.SH_C1 / 2.0      # 0.511663
C3 = 3.0 * A_HAT[2] * sh.SH_C2_0    # 0.743124
C4 = A_HAT[0] * sh.SH_C0            # 0.886227
C5 = A_HAT[2] * sh.SH_C2_0          # 0.247708

DEFAULT_DERING_CUTOFF = 3
DEFAULT_LDR_SCALE = 100.0


def build_irradiance_matrices(coeffs: sh.ShCoefficients) -> np.ndarray:
    """Symmetric 4x4 quadratic-form matrix per channel, shape (3, 4, 4)."""
    out = np.zeros((3, 4, 4))
    for c, (l00, l1m1, l10, l11, l2m2, l2m1, l20, l21, l22) in enumerate(coeffs.values):
        out[c] = [
            [C1 * l22,  C1 * l2m2, C1 * l21,  C2 * l11],
            [C1 * l2m2, -C1 * l22, C1 * l2m1, C2 * l1m1],
            [C1 * l21,  C1 * l2m1, C3 * l20,  C2 * l10],
            [C2 * l11,  C2 * l1m1, C2 * l10,  C4 * l00 - C5 * l20],
        ]
    return out


def irradiance_at(normal: np.ndarray, coeffs: sh.ShCoefficients) -> np.ndarray:
    """Diffuse irradiance for a unit normal, one value per color channel."""
    n = np.asarray(normal, dtype=np.float64)
    if n.shape != (3,):
        raise ValueError("normal must be a 3-vector")
    length = np.linalg.norm(n)
    if abs(length - 1.0) > 1e-3:
        raise ValueError(f"normal must be unit length, got |n|={length:.6f}")
    eta = np.append(n, 1.0)
    m = build_irradiance_matrices(coeffs)
    return np.einsum("i,cij,j->c", eta, m, eta)


def irradiance_basis(normal: np.ndarray) -> np.ndarray:
    """Linear form of the irradiance: dot(irradiance_basis(n), channel) == irradiance."""
    return _BAND_GAIN * sh.eval_basis(np.asarray(normal, dtype=np.float64))


def irradiance_basis_for(normals: np.ndarray) -> np.ndarray:
    """Vectorized irradiance basis for (..., 3) unit normals -> (..., 9)."""
    return sh.basis_for_directions(normals) * _BAND_GAIN


def irradiance_map(normals: NormalMap, coeffs: sh.ShCoefficients,
                   clamp_negative: bool = True) -> np.ndarray:
    """Per-pixel irradiance (H, W, 3); invalid normals yield 0."""
    b = irradiance_basis_for(normals.normals)
    e = b.reshape(-1, 9) @ coeffs.values.T
    e = e.reshape(normals.height, normals.width, 3)
    if clamp_negative:
        np.clip(e, 0.0, None, out=e)
    e[~normals.valid] = 0.0
    return e


def relight(image: EquirectImage, normals: NormalMap, coeffs: sh.ShCoefficients) -> EquirectImage:
    """Impose new lighting: per-pixel irradiance times the base image.

    Negative irradiance from truncated SH clamps to zero; pixels whose normal is
    degenerate render black.
    """
    if (image.width, image.height) != (normals.width, normals.height):
        raise ValueError(f"image {image.width}x{image.height} and normals "
                         f"{normals.width}x{normals.height} dimensions differ")
    return EquirectImage(irradiance_map(normals, coeffs) * image.pixels)


def blend_lights(a: EquirectImage, b: EquirectImage, lambda_blend: float) -> EquirectImage:
    """Pixelwise convex combination lambda*a + (1-lambda)*b."""
    if not 0.0 <= lambda_blend <= 1.0:
        raise ValueError(f"lambda_blend must be in [0, 1], got {lambda_blend}")
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"blend inputs {a.width}x{a.height} and {b.width}x{b.height} differ")
    return EquirectImage(lambda_blend * a.pixels + (1.0 - lambda_blend) * b.pixels)


def dering_window(cutoff: int) -> np.ndarray:
    """Per-band cosine low-pass gains h(l) = cos(pi*l / (2*cutoff)), zero from the cutoff up."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    bands = np.arange(3)
    h = np.where(bands < cutoff, np.cos(np.pi * bands / (2.0 * cutoff)), 0.0)
    return h


def dering(coeffs: sh.ShCoefficients, cutoff: int = DEFAULT_DERING_CUTOFF) -> sh.ShCoefficients:
    """Attenuate high bands to suppress ringing in reconstructions."""
    gains = dering_window(cutoff)[sh.SH_BAND]
    return sh.ShCoefficients(coeffs.values * gains)


def generate_relit_sample(ldr: EquirectImage, normals: NormalMap,
                          probe_a: EquirectImage, probe_b: EquirectImage,
                          lambda_blend: float,
                          ldr_scale: float = DEFAULT_LDR_SCALE,
                          dering_cutoff: int = DEFAULT_DERING_CUTOFF):
    """Couple a color image with lighting from two probes.

    The probes are blended and projected to deringed coefficients; the LDR image is
    relit with the coefficients scaled by `ldr_scale` and saturated to [0, 1]. The
    returned ground truth is the unscaled coefficients.
    """
    mixed = blend_lights(probe_a, probe_b, lambda_blend)
    gt = dering(sh.project(mixed), dering_cutoff)
    relit = relight(ldr, normals, gt.scaled(ldr_scale))
    relit_ldr = EquirectImage(np.clip(relit.pixels, 0.0, 1.0))
    return relit_ldr, gt
