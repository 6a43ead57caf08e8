"""Equirectangular image and normal-map data model with HDR (Radiance RGBE), PFM and PNG I/O."""
from __future__ import annotations

import math
import re
import struct

import numpy as np
from PIL import Image

GAMMA = 2.2
WORKING_WIDTH, WORKING_HEIGHT = 512, 256

_HDR_MAGIC = b"#?RADIANCE"
_RGBE_FORMAT = "32-bit_rle_rgbe"
# New-style RLE scanlines are only defined for widths in this range.
_RLE_MIN_WIDTH, _RLE_MAX_WIDTH = 8, 0x7FFF


class FormatError(Exception):
    """Malformed or unsupported image file content."""


class EquirectImage:
    """W x H x 3 linear-radiance spherical panorama (loss-domain images may be signed)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixel array, got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image contains non-finite values")
        self.pixels = pixels

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __repr__(self) -> str:
        return f"EquirectImage({self.width}x{self.height})"


class NormalMap:
    """W x H x 3 world-space unit normals plus a validity mask for degenerate inputs."""

    __slots__ = ("normals", "valid")

    def __init__(self, normals: np.ndarray, renormalize: bool = True):
        normals = np.asarray(normals, dtype=np.float64)
        if normals.ndim != 3 or normals.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) normal array, got {normals.shape}")
        if normals.shape[0] < 1 or normals.shape[1] < 1:
            raise ValueError("normal map dimensions must be >= 1")
        if not np.all(np.isfinite(normals)):
            raise ValueError("normal map contains non-finite values")
        length = np.linalg.norm(normals, axis=-1)
        self.valid = length > 1e-12
        if renormalize:
            safe = np.where(self.valid, length, 1.0)
            normals = normals / safe[..., None]
            normals[~self.valid] = 0.0
        self.normals = normals

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    @property
    def height(self) -> int:
        return self.normals.shape[0]


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr)

def _rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    """(..., 4) uint8 -> (..., 3) float, value = mantissa * 2^(e - 128 - 8)."""
    scale = np.ldexp(1.0, rgbe[..., 3].astype(np.int32) - 136)
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def _rgbe_encode(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) float -> (..., 4) uint8; zeros for pixels below the format's range."""
    rgb = np.maximum(rgb, 0.0)
    maxc = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = maxc >= 1e-32
    if np.any(live):
        m, e = np.frexp(maxc[live])          # maxc = m * 2^e, m in [0.5, 1)
        scale = m * 256.0 / maxc[live]
        mant = np.rint(rgb[live] * scale[..., None])
        np.clip(mant, 0, 255, out=mant)
        out[live, :3] = mant.astype(np.uint8)
        out[live, 3] = (e + 128).astype(np.uint8)
    return out


def load_hdr(path) -> EquirectImage:
    """Read a Radiance RGBE panorama (flat or new-style RLE scanlines)."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(_HDR_MAGIC):
        raise FormatError(f"{path}: missing #?RADIANCE magic")
    # Header: lines up to the first empty one, then the resolution line.
    pos = data.find(b"\n") + 1
    fmt = None
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: unterminated header at byte {pos}")
        line = data[pos:end]
        pos = end + 1
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            fmt = line[len(b"FORMAT="):].decode("ascii", "replace")
    if fmt is not None and fmt != _RGBE_FORMAT:
        raise FormatError(f"{path}: unsupported FORMAT={fmt}")
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"{path}: missing resolution line at byte {pos}")
    m = re.fullmatch(rb"-Y (\d+) \+X (\d+)", data[pos:end])
    if not m:
        raise FormatError(f"{path}: unsupported pixel order {data[pos:end]!r} "
                          "(only '-Y h +X w')")
    height, width = int(m.group(1)), int(m.group(2))
    if width < 1 or height < 1:
        raise FormatError(f"{path}: zero image dimension {width}x{height}")
    pos = end + 1

    rgbe = np.empty((height, width, 4), dtype=np.uint8)
    buf = memoryview(data)
    for row in range(height):
        pos = _read_scanline(buf, pos, rgbe[row], path)
    return EquirectImage(_rgbe_decode(rgbe))


def _read_scanline(buf: memoryview, pos: int, out_row: np.ndarray, path) -> int:
    width = out_row.shape[0]
    if pos + 4 > len(buf):
        raise FormatError(f"{path}: truncated scanline at byte {pos}")
    b0, b1, b2, b3 = buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]
    if b0 == 2 and b1 == 2 and (b2 << 8 | b3) == width and width >= _RLE_MIN_WIDTH:
        pos += 4
        for c in range(4):
            x = 0
            while x < width:
                if pos >= len(buf):
                    raise FormatError(f"{path}: truncated scanline at byte {pos}")
                code = buf[pos]
                pos += 1
                if code > 128:  # run
                    count = code - 128
                    if pos >= len(buf) or x + count > width:
                        raise FormatError(f"{path}: bad RLE run at byte {pos}")
                    out_row[x:x + count, c] = buf[pos]
                    pos += 1
                else:           # literal
                    count = code
                    if count == 0 or x + count > width or pos + count > len(buf):
                        raise FormatError(f"{path}: bad RLE literal at byte {pos}")
                    out_row[x:x + count, c] = np.frombuffer(buf[pos:pos + count], dtype=np.uint8)
                    pos += count
                x += count
        return pos
    # Flat scanline of width RGBE quadruples.
    if pos + 4 * width > len(buf):
        raise FormatError(f"{path}: truncated flat scanline at byte {pos}")
    flat = np.frombuffer(buf[pos:pos + 4 * width], dtype=np.uint8).reshape(width, 4)
    out_row[:] = flat
    return pos + 4 * width


def save_hdr(image: EquirectImage, path) -> None:
    """Write Radiance RGBE; RLE scanlines when the width allows, flat otherwise."""
    rgbe = _rgbe_encode(image.pixels)
    h, w = rgbe.shape[:2]
    parts = [b"#?RADIANCE\n", b"FORMAT=" + _RGBE_FORMAT.encode() + b"\n\n",
             f"-Y {h} +X {w}\n".encode()]
    use_rle = _RLE_MIN_WIDTH <= w <= _RLE_MAX_WIDTH
    for row in range(h):
        if use_rle:
            parts.append(bytes([2, 2, w >> 8, w & 0xFF]))
            for c in range(4):
                parts.append(_rle_component(rgbe[row, :, c]))
        else:
            parts.append(rgbe[row].tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def _rle_component(col: np.ndarray) -> bytes:
    """RLE-encode one component stream: runs >= 4 as (128+len, byte), rest as literals."""
    out = bytearray()
    n = len(col)
    x = 0
    while x < n:
        run_start = x
        run_len = 1
        while run_len < 127 and run_start + run_len < n and col[run_start + run_len] == col[run_start]:
            run_len += 1
        if run_len >= 4:
            out.append(128 + run_len)
            out.append(int(col[run_start]))
            x += run_len
            continue
        # Literal chunk up to the next worthwhile run (or 128 bytes).
        lit_end = x + 1
        while lit_end < n and lit_end - x < 128:
            nxt = lit_end
            run = 1
            while run < 4 and nxt + run < n and col[nxt + run] == col[nxt]:
                run += 1
            if run >= 4:
                break
            lit_end += 1
        out.append(lit_end - x)
        out.extend(col[x:lit_end].tobytes())
        x = lit_end
    return bytes(out)


# ---------------------------------------------------------------------------
# PFM (normal maps)

def load_pfm(path) -> NormalMap:
    """Read a 3-channel PFM; normals are renormalized, zero-length ones flagged invalid."""
    with open(path, "rb") as f:
        data = f.read()

    def token(pos):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if pos == end:
            raise FormatError(f"{path}: truncated PFM header at byte {pos}")
        return data[pos:end], end

    magic, pos = token(0)
    if magic != b"PF":
        raise FormatError(f"{path}: not a color PFM (magic {magic!r})")
    w_tok, pos = token(pos)
    h_tok, pos = token(pos)
    s_tok, pos = token(pos)
    try:
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header: {exc}") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: zero image dimension {width}x{height}")
    pos += 1  # single whitespace byte after the scale line
    count = width * height * 3
    if len(data) - pos < count * 4:
        raise FormatError(f"{path}: truncated PFM payload at byte {pos}")
    dtype = "<f4" if scale < 0 else ">f4"
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    rows = raw.reshape(height, width, 3).astype(np.float64)
    # PFM stores rows bottom-to-top.
    return NormalMap(rows[::-1])


def save_pfm(nmap: NormalMap, path) -> None:
    """Write a little-endian 3-channel PFM (lossless at 32-bit precision)."""
    px = nmap.normals.astype("<f4")
    header = f"PF\n{nmap.width} {nmap.height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(px[::-1].tobytes())


# ---------------------------------------------------------------------------
# 8-bit PNG (LDR)

def decode_gamma(byte_values: np.ndarray) -> np.ndarray:
    """uint8 -> linear radiance via the 2.2 power law."""
    return (byte_values.astype(np.float64) / 255.0) ** GAMMA


def encode_gamma(linear: np.ndarray) -> np.ndarray:
    """linear radiance -> uint8; out-of-gamut values are clamped."""
    clamped = np.clip(linear, 0.0, 1.0)
    return np.rint(255.0 * clamped ** (1.0 / GAMMA)).astype(np.uint8)


def load_ldr(path) -> EquirectImage:
    """Read an 8-bit RGB PNG and decode to linear radiance."""
    with Image.open(path) as im:
        if im.mode != "RGB":
            if im.mode in ("RGBA", "P", "L"):
                raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
            raise FormatError(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return EquirectImage(decode_gamma(arr))


def save_ldr(image: EquirectImage, path) -> None:
    """Gamma-encode to 8-bit RGB PNG (HDR values clamp to the displayable range)."""
    Image.fromarray(encode_gamma(image.pixels), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Resampling

def _bilinear_axis_indices(n_out: int, n_in: int, wrap: bool):
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(centers).astype(np.int64)
    frac = centers - i0
    i1 = i0 + 1
    if wrap:
        i0 %= n_in
        i1 %= n_in
    else:
        i0 = np.clip(i0, 0, n_in - 1)
        i1 = np.clip(i1, 0, n_in - 1)
    return i0, i1, frac


def resize_bilinear(image: EquirectImage, width: int, height: int) -> EquirectImage:
    """Separable bilinear resize; the azimuth axis wraps at the seam, the polar axis clamps."""
    if width < 1 or height < 1:
        raise ValueError("target dimensions must be >= 1")
    px = image.pixels
    if width == image.width and height == image.height:
        return EquirectImage(px.copy())
    j0, j1, fx = _bilinear_axis_indices(width, image.width, wrap=True)
    i0, i1, fy = _bilinear_axis_indices(height, image.height, wrap=False)
    rows = px[:, j0] * (1.0 - fx)[None, :, None] + px[:, j1] * fx[None, :, None]
    out = rows[i0] * (1.0 - fy)[:, None, None] + rows[i1] * fy[:, None, None]
    return EquirectImage(out)


def resize_normal_map(nmap: NormalMap, width: int, height: int) -> NormalMap:
    """Bilinear resize of the normal components followed by renormalization."""
    as_img = EquirectImage(np.where(nmap.valid[..., None], nmap.normals, 0.0))
    resized = resize_bilinear(as_img, width, height)
    return NormalMap(resized.pixels)
