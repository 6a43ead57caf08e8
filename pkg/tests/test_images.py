import struct

import numpy as np
import pytest

from sphlight.images import (EquirectImage, FormatError, NormalMap, decode_gamma,
                             encode_gamma, load_hdr, load_ldr, load_pfm, resize_bilinear,
                             resize_normal_map, save_hdr, save_ldr, save_pfm)


def write_flat_hdr(path, width, height, quad):
    """Handcrafted uncompressed RGBE file with every pixel equal to `quad`."""
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {height} +X {width}\n".encode()
    with open(path, "wb") as f:
        f.write(header + bytes(quad) * (width * height))


class TestHdr:
    def test_decode_reference_quad(self, tmp_path):
        # 128 * 2^(129-136) = 1.0
        p = tmp_path / "one.hdr"
        write_flat_hdr(p, 4, 2, (128, 128, 128, 129))
        img = load_hdr(p)
        assert img.width == 4 and img.height == 2
        np.testing.assert_allclose(img.pixels, 1.0, rtol=1e-12)

    def test_handcrafted_rle_scanline(self, tmp_path):
        # One 16-pixel row, each component a single run; exponent 130 -> v/64.
        p = tmp_path / "rle.hdr"
        payload = bytes([2, 2, 0, 16]) + bytes([144, 10, 144, 20, 144, 30, 144, 130])
        with open(p, "wb") as f:
            f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 16\n" + payload)
        img = load_hdr(p)
        np.testing.assert_allclose(img.pixels[0, 0], [10 / 64, 20 / 64, 30 / 64], rtol=1e-12)
        assert np.all(img.pixels == img.pixels[0, 0])

    @staticmethod
    def coherent_radiance(rng, shape, lo, hi):
        # RGBE shares one exponent per pixel, so the 1% relative guarantee holds
        # for channels of comparable magnitude (ratio <= 2 keeps mantissas >= 64).
        brightness = 10.0 ** rng.uniform(np.log10(lo), np.log10(hi), shape[:2])
        return brightness[..., None] * rng.uniform(0.5, 1.0, shape)

    def test_roundtrip_quantization(self, tmp_path, rng):
        img = EquirectImage(self.coherent_radiance(rng, (16, 32, 3), 0.01, 100.0))
        p = tmp_path / "rt.hdr"
        save_hdr(img, p)
        back = load_hdr(p)
        rel = np.abs(back.pixels - img.pixels) / img.pixels
        assert rel.max() <= 0.01

    def test_roundtrip_wide_range(self, tmp_path, rng):
        values = self.coherent_radiance(rng, (8, 16, 3), 1e-3, 1e4)
        p = tmp_path / "range.hdr"
        save_hdr(EquirectImage(values), p)
        rel = np.abs(load_hdr(p).pixels - values) / values
        assert rel.max() <= 0.01

    def test_zero_roundtrip_exact(self, tmp_path):
        p = tmp_path / "zero.hdr"
        save_hdr(EquirectImage(np.zeros((4, 16, 3))), p)
        assert np.all(load_hdr(p).pixels == 0.0)

    def test_small_width_uses_flat_scanlines(self, tmp_path, rng):
        img = EquirectImage(rng.uniform(0.1, 10.0, (2, 4, 3)))
        p = tmp_path / "tiny.hdr"
        save_hdr(img, p)
        rel = np.abs(load_hdr(p).pixels - img.pixels) / img.pixels
        assert rel.max() <= 0.01

    def test_rle_roundtrip_with_runs_and_literals(self, tmp_path, rng):
        px = self.coherent_radiance(rng, (3, 64, 3), 0.1, 1.0)
        px[0, 10:40] = 0.5            # long run
        px[2, :8] = 0.0               # zero run
        p = tmp_path / "mix.hdr"
        save_hdr(EquirectImage(px), p)
        back = load_hdr(p).pixels
        mask = px > 0
        rel = np.abs(back[mask] - px[mask]) / px[mask]
        assert rel.max() <= 0.01
        assert np.all(back[~mask] == 0)

    def test_missing_magic(self, tmp_path):
        p = tmp_path / "bad.hdr"
        p.write_bytes(b"NOTHDR\n")
        with pytest.raises(FormatError):
            load_hdr(p)

    def test_unsupported_pixel_order(self, tmp_path):
        p = tmp_path / "order.hdr"
        p.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n+Y 2 +X 4\n" + bytes(32))
        with pytest.raises(FormatError, match="pixel order"):
            load_hdr(p)

    def test_truncated_scanline(self, tmp_path):
        p = tmp_path / "trunc.hdr"
        write_flat_hdr(p, 4, 2, (128, 128, 128, 129))
        data = p.read_bytes()
        p.write_bytes(data[:-5])
        with pytest.raises(FormatError, match="byte"):
            load_hdr(p)

    def test_unsupported_format_line(self, tmp_path):
        p = tmp_path / "fmt.hdr"
        p.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 4\n" + bytes(16))
        with pytest.raises(FormatError, match="FORMAT"):
            load_hdr(p)

    def test_cross_check_against_opencv(self, tmp_path, rng):
        cv2 = pytest.importorskip("cv2")
        img = EquirectImage(rng.uniform(0.01, 50.0, (16, 32, 3)))
        p = tmp_path / "cv.hdr"
        save_hdr(img, p)
        decoded = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        assert decoded is not None
        decoded = decoded[:, :, ::-1].astype(np.float64)  # BGR -> RGB
        ours = load_hdr(p).pixels
        np.testing.assert_allclose(decoded, ours, rtol=1e-6, atol=1e-9)


class TestPfm:
    def test_constant_up_roundtrip(self, tmp_path):
        nmap = NormalMap(np.tile([0.0, 0.0, 1.0], (4, 8, 1)))
        p = tmp_path / "up.pfm"
        save_pfm(nmap, p)
        back = load_pfm(p)
        assert np.array_equal(back.normals, nmap.normals)
        assert back.valid.all()

    def test_random_roundtrip_lossless(self, tmp_path, rng):
        raw = rng.normal(size=(6, 10, 3))
        raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
        nmap = NormalMap(raw.astype(np.float32).astype(np.float64))
        p = tmp_path / "rand.pfm"
        save_pfm(nmap, p)
        back = load_pfm(p)
        # float32 storage of already-float32 values is bit-exact up to renormalization.
        np.testing.assert_allclose(back.normals, nmap.normals, atol=1e-6)

    def test_unnormalized_input_renormalizes(self, tmp_path):
        nmap = NormalMap(np.tile([0.0, 0.0, 2.0], (2, 2, 1)))
        np.testing.assert_allclose(nmap.normals[..., 2], 1.0)
        assert nmap.valid.all()
        p = tmp_path / "norm.pfm"
        save_pfm(nmap, p)
        np.testing.assert_allclose(load_pfm(p).normals[..., 2], 1.0)

    def test_zero_normal_flagged_invalid(self):
        arr = np.tile([0.0, 0.0, 1.0], (2, 3, 1))
        arr[1, 2] = 0.0
        nmap = NormalMap(arr)
        assert not nmap.valid[1, 2]
        assert nmap.valid.sum() == 5

    def test_bottom_up_row_order(self, tmp_path):
        # Rows are stored bottom-to-top: the file's first row is the image's last.
        arr = np.zeros((2, 1, 3))
        arr[0] = [1.0, 0.0, 0.0]
        arr[1] = [0.0, 1.0, 0.0]
        p = tmp_path / "rows.pfm"
        save_pfm(NormalMap(arr), p)
        data = p.read_bytes()
        first_stored = struct.unpack("<3f", data[-24:-12])
        assert first_stored == (0.0, 1.0, 0.0)
        back = load_pfm(p)
        np.testing.assert_allclose(back.normals, arr)

    def test_grayscale_pfm_rejected(self, tmp_path):
        p = tmp_path / "gray.pfm"
        p.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(16))
        with pytest.raises(FormatError, match="PF"):
            load_pfm(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.pfm"
        p.write_bytes(b"PF\n4 4\n-1.0\n" + bytes(10))
        with pytest.raises(FormatError, match="truncated"):
            load_pfm(p)


class TestLdr:
    def test_gamma_endpoints(self):
        assert decode_gamma(np.array(255)) == pytest.approx(1.0)
        assert decode_gamma(np.array(0)) == 0.0
        assert encode_gamma(np.array(1.0)) == 255
        assert encode_gamma(np.array(0.0)) == 0

    def test_mid_gray_decode(self):
        assert decode_gamma(np.array(128)) == pytest.approx(0.2195197180748679, abs=1e-12)

    def test_byte_identity_all_values(self):
        everything = np.arange(256, dtype=np.uint8)
        assert np.array_equal(encode_gamma(decode_gamma(everything)), everything)

    def test_out_of_gamut_clamps(self):
        assert encode_gamma(np.array(3.7)) == 255
        assert encode_gamma(np.array(-0.2)) == 0

    def test_png_roundtrip(self, tmp_path, rng):
        arr = rng.integers(0, 256, (8, 16, 3), dtype=np.uint8)
        p = tmp_path / "img.png"
        save_ldr(EquirectImage(decode_gamma(arr)), p)
        back = load_ldr(p)
        np.testing.assert_allclose(back.pixels, decode_gamma(arr), atol=1e-12)

    def test_rejects_rgba(self, tmp_path):
        from PIL import Image
        p = tmp_path / "rgba.png"
        Image.new("RGBA", (4, 4)).save(p)
        with pytest.raises(FormatError, match="RGB"):
            load_ldr(p)


class TestResize:
    def test_constant_preserved(self):
        img = EquirectImage(np.full((3, 5, 3), 0.37))
        out = resize_bilinear(img, 11, 7)
        np.testing.assert_allclose(out.pixels, 0.37, atol=1e-12)

    def test_identity_size(self, rng):
        img = EquirectImage(rng.uniform(0, 1, (4, 6, 3)))
        out = resize_bilinear(img, 6, 4)
        assert np.array_equal(out.pixels, img.pixels)

    def test_azimuth_wraps_at_seam(self):
        a, b = 1.0, 5.0
        img = EquirectImage(np.array([[[a] * 3, [b] * 3]]))
        out = resize_bilinear(img, 4, 1).pixels[0, :, 0]
        # Hand-computed wrap-aware samples; clamping would give [a, ...] at the seam.
        np.testing.assert_allclose(out, [0.75 * a + 0.25 * b, 0.75 * a + 0.25 * b,
                                         0.25 * a + 0.75 * b, 0.25 * a + 0.75 * b],
                                    atol=1e-12)

    def test_polar_clamps(self):
        a, b = 2.0, 8.0
        img = EquirectImage(np.array([[[a] * 3], [[b] * 3]]))
        out = resize_bilinear(img, 1, 4).pixels[:, 0, 0]
        np.testing.assert_allclose(out, [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b],
                                    atol=1e-12)

    def test_normal_map_resize_keeps_unit_length(self, rng):
        raw = rng.normal(size=(8, 16, 3))
        raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
        out = resize_normal_map(NormalMap(raw), 8, 4)
        lengths = np.linalg.norm(out.normals[out.valid], axis=-1)
        np.testing.assert_allclose(lengths, 1.0, atol=1e-3)


class TestValidation:
    def test_image_rejects_nan_and_empty(self):
        with pytest.raises(ValueError):
            EquirectImage(np.full((2, 2, 3), np.nan))
        with pytest.raises(ValueError):
            EquirectImage(np.zeros((0, 2, 3)))

    def test_normal_map_rejects_non_finite(self):
        bad = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
        bad[0, 0, 1] = np.inf
        with pytest.raises(ValueError):
            NormalMap(bad)
