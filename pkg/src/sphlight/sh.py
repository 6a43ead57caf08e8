"""Real spherical-harmonics basis (bands 0-2), equirectangular projection and reconstruction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Basis normalization constants, cartesian polynomial form.
SH_C0 = 0.28209479177387814  # 0.5*sqrt(1/pi)
SH_C1 = 0.4886025119029199   # sqrt(3/(4*pi))
SH_C2 = 1.0925484305920792   # 0.5*sqrt(15/pi), for xy, yz, xz
SH_C2_0 = 0.31539156525252005  # 0.25*sqrt(5/pi)
SH_C2_2 = 0.5462742152960396   # 0.25*sqrt(15/pi)

N_COEFFS = 9
N_CHANNELS = 3

# Fixed (l,m) coefficient order; also the JSON interchange layout.
SH_LAYOUT = ("0,0", "1,-1", "1,0", "1,1", "2,-2", "2,-1", "2,0", "2,1", "2,2")
SH_BAND = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])

# Sign of each basis function under azimuth rotation by pi (x,y -> -x,-y).
AZIMUTH_PI_PARITY = np.array([1, -1, 1, -1, 1, -1, 1, -1, 1], dtype=np.float64)


@dataclass(frozen=True)
class SphericalDirection:
    """A direction on the unit sphere; phi in [0, 2pi), theta in [0, pi] from the +z pole."""

    phi: float
    theta: float

    @property
    def unit_vector(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])


def pixel_to_direction(u: int, v: int, width: int, height: int) -> SphericalDirection:
    """Direction through the center of pixel (u, v) of a width x height equirectangular grid."""
    if not (0 <= u < width and 0 <= v < height):
        raise ValueError(f"pixel ({u},{v}) outside {width}x{height} grid")
    return SphericalDirection(phi=2.0 * math.pi * (u + 0.5) / width,
                              theta=math.pi * (v + 0.5) / height)


def eval_basis(direction: SphericalDirection | np.ndarray) -> np.ndarray:
    """Evaluate the 9 basis functions at a direction (SphericalDirection or unit 3-vector)."""
    if isinstance(direction, SphericalDirection):
        vec = direction.unit_vector
    else:
        vec = np.asarray(direction, dtype=np.float64)
        if vec.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        n = np.linalg.norm(vec)
        if abs(n - 1.0) > 1e-6:
            vec = vec / n
    x, y, z = vec
    return np.array([
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C2_0 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C2_2 * (x * x - y * y),
    ])


def basis_for_directions(dirs: np.ndarray) -> np.ndarray:
    """Vectorized basis evaluation, dirs (..., 3) unit vectors -> (..., 9)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C2_0 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C2_2 * (x * x - y * y),
    ], axis=-1)


@lru_cache(maxsize=8)
def direction_grid(width: int, height: int) -> np.ndarray:
    """Unit directions through all pixel centers, shape (height, width, 3). Cached, read-only."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width
    theta = np.pi * (np.arange(height) + 0.5) / height
    st, ct = np.sin(theta), np.cos(theta)
    out = np.empty((height, width, 3))
    out[..., 0] = st[:, None] * np.cos(phi)[None, :]
    out[..., 1] = st[:, None] * np.sin(phi)[None, :]
    out[..., 2] = ct[:, None]
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def basis_grid(width: int, height: int) -> np.ndarray:
    """Basis values at all pixel centers, shape (height, width, 9). Cached, read-only."""
    out = basis_for_directions(direction_grid(width, height))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def solid_angle_weights(width: int, height: int) -> np.ndarray:
    """Per-pixel solid angle sin(theta)*dtheta*dphi, shape (height, width); sums to ~4pi."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    theta = np.pi * (np.arange(height) + 0.5) / height
    row = np.sin(theta) * (2.0 * np.pi / width) * (np.pi / height)
    out = np.broadcast_to(row[:, None], (height, width)).copy()
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def attention_mask(width: int, height: int) -> np.ndarray:
    """sin(theta)-proportional per-pixel weights normalized to mean 1, shape (height, width)."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    theta = np.pi * (np.arange(height) + 0.5) / height
    row = np.sin(theta)
    out = np.broadcast_to(row[:, None], (height, width)).copy()
    out /= out.mean()
    out.setflags(write=False)
    return out


class ShCoefficients:
    """27 lighting coefficients: 3 color channels x 9 basis coefficients in SH_LAYOUT order."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (N_CHANNELS, N_COEFFS):
            raise ValueError(f"expected shape (3, 9), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficients must be finite")
        self.values = values

    @classmethod
    def zeros(cls) -> "ShCoefficients":
        return cls(np.zeros((N_CHANNELS, N_COEFFS)))

    @classmethod
    def gray(cls, per_band: np.ndarray | list) -> "ShCoefficients":
        """Same 9-vector on all three channels."""
        v = np.asarray(per_band, dtype=np.float64).reshape(N_COEFFS)
        return cls(np.tile(v, (N_CHANNELS, 1)))

    def scaled(self, factor: float) -> "ShCoefficients":
        return ShCoefficients(self.values * factor)

    def __eq__(self, other) -> bool:
        return isinstance(other, ShCoefficients) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ShCoefficients({self.values!r})"

    def to_json(self) -> str:
        # Python float repr is shortest round-trip (>= 9 significant digits).
        payload = {
            "order": 2,
            "layout": list(SH_LAYOUT),
            "channels": {
                "r": [float(x) for x in self.values[0]],
                "g": [float(x) for x in self.values[1]],
                "b": [float(x) for x in self.values[2]],
            },
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ShCoefficients":
        payload = json.loads(text)
        if payload.get("order") != 2 or list(payload.get("layout", [])) != list(SH_LAYOUT):
            raise ValueError("unsupported coefficient file: expected order-2 layout "
                             + ",".join(SH_LAYOUT))
        ch = payload["channels"]
        return cls(np.array([ch["r"], ch["g"], ch["b"]], dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ShCoefficients":
        with open(path) as f:
            return cls.from_json(f.read())


def project(image, paper_literal: bool = False) -> ShCoefficients:
    """Project a spherical image onto the 9 basis functions.

    Default weighting is the per-pixel solid angle; `paper_literal` switches to the
    uniform 4pi/N measure, which over-weights the poles on equirectangular grids
    (kept for comparison only).

    Summation relies on numpy's pairwise reduction, so results do not depend on
    chunking and are reproducible to ~1e-12.
    """
    px = np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != N_CHANNELS:
        raise ValueError("expected (H, W, 3) image data")
    h, w = px.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image dimensions must be >= 1")
    if not np.all(np.isfinite(px)):
        raise ValueError("image contains non-finite pixels")
    basis = basis_grid(w, h)
    if paper_literal:
        weights = np.full((h, w), 4.0 * np.pi / (w * h))
    else:
        weights = solid_angle_weights(w, h)
    weighted = px * weights[..., None]               # (h, w, 3)
    coeffs = np.sum(weighted[..., None] * basis[..., None, :], axis=(0, 1))  # (3, 9)
    return ShCoefficients(coeffs)


def reconstruct(coeffs: ShCoefficients, width: int, height: int):
    """Evaluate the band-limited spherical function on an equirectangular grid."""
    from .images import EquirectImage

    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    basis = basis_grid(width, height)
    px = basis.reshape(-1, N_COEFFS) @ coeffs.values.T
    return EquirectImage(px.reshape(height, width, N_CHANNELS))
