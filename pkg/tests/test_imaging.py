import math

import numpy as np
import pytest

from nightstereo.errors import (
    IoFailure,
    MalformedHeader,
    NonPositiveSigma,
    ShapeMismatch,
    TruncatedData,
    UnsupportedMaxval,
    ZeroDimension,
)
from nightstereo.imaging import (
    ImageBuf,
    box_blur,
    decode_pnm,
    encode_pnm,
    gaussian_blur,
    gaussian_kernel,
    load_pnm,
    psnr,
    resize_bilinear,
    save_pnm,
    to_grayscale,
)


def constant(value, height=4, width=5, channels=1):
    return ImageBuf(np.full((height, width, channels), value))


class TestPnm:
    def test_decode_p5(self):
        img = decode_pnm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        assert img.shape == (2, 2, 1)
        np.testing.assert_allclose(img.plane, [[0.0, 1.0], [128 / 255, 64 / 255]])

    def test_decode_p6(self):
        img = decode_pnm(b"P6 1 1 255\n" + bytes([255, 0, 0]))
        np.testing.assert_allclose(img.data[0, 0], [1.0, 0.0, 0.0])

    def test_decode_16_bit_big_endian(self):
        img = decode_pnm(b"P5\n1 1\n65535\n" + bytes([0x80, 0x00]))
        assert img.plane[0, 0] == 32768 / 65535

    def test_header_comments_skipped(self):
        img = decode_pnm(b"P5\n# made by hand\n1 1\n# max\n255\n" + bytes([51]))
        assert img.plane[0, 0] == pytest.approx(0.2)

    def test_bad_magic(self):
        with pytest.raises(MalformedHeader) as info:
            decode_pnm(b"P2\n1 1\n255\n0")
        assert info.value.offset == 0

    def test_non_numeric_header_reports_offset(self):
        with pytest.raises(MalformedHeader) as info:
            decode_pnm(b"P5\nxx 1\n255\n" + bytes([0]))
        assert info.value.offset == 3
        assert "offset 3" in str(info.value)

    def test_zero_width(self):
        with pytest.raises(MalformedHeader):
            decode_pnm(b"P5\n0 1\n255\n")

    def test_unsupported_maxval(self):
        with pytest.raises(UnsupportedMaxval) as info:
            decode_pnm(b"P5\n1 1\n1023\n" + bytes([0, 0]))
        assert info.value.offset == 7

    def test_truncated(self):
        raw = b"P5\n4 4\n255\n" + bytes(10)
        with pytest.raises(TruncatedData) as info:
            decode_pnm(raw)
        assert info.value.offset == len(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure) as info:
            load_pnm(tmp_path / "nope.pgm")
        assert "nope.pgm" in str(info.value)

    def test_8_bit_half_step(self, tmp_path, rng):
        img = ImageBuf(rng.random((7, 9, 3)))
        save_pnm(img, tmp_path / "a.ppm")
        back = load_pnm(tmp_path / "a.ppm")
        assert np.abs(back.data - img.data).max() <= 1 / 510 + 1e-12

    def test_16_bit_half_step(self, tmp_path, rng):
        img = ImageBuf(rng.random((6, 5)))
        save_pnm(img, tmp_path / "a.pgm", bitdepth=16)
        back = load_pnm(tmp_path / "a.pgm")
        assert np.abs(back.data - img.data).max() <= 1 / 131070 + 1e-12

    def test_round_half_up(self):
        raw = encode_pnm(constant(0.5, 2, 2))
        assert raw.endswith(bytes([128] * 4))
        assert raw.startswith(b"P5\n2 2\n255\n")

    def test_unsupported_bitdepth(self):
        with pytest.raises(ValueError):
            encode_pnm(constant(0.5), bitdepth=12)


class TestImageBuf:
    def test_read_only(self):
        img = constant(0.3)
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0

    def test_does_not_alias_caller_array(self):
        array = np.full((2, 2, 1), 0.5)
        img = ImageBuf(array)
        array[0, 0, 0] = 0.0
        assert img.data[0, 0, 0] == 0.5

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageBuf(np.full((2, 2), 1.5))

    def test_rejects_bad_channels(self):
        with pytest.raises(ShapeMismatch):
            ImageBuf(np.zeros((2, 2, 2)))

    def test_rejects_zero_extent(self):
        with pytest.raises(ZeroDimension):
            ImageBuf(np.zeros((0, 3, 1)))

    def test_from_array_clips(self):
        img = ImageBuf.from_array(np.array([[-1.0, 2.0]]))
        np.testing.assert_array_equal(img.plane, [[0.0, 1.0]])


class TestGrayscale:
    def test_white(self):
        assert to_grayscale(constant(1.0, channels=3)).plane[0, 0] == pytest.approx(1.0)

    def test_red(self):
        red = np.zeros((1, 1, 3))
        red[..., 0] = 1.0
        assert to_grayscale(ImageBuf(red)).plane[0, 0] == pytest.approx(0.299)

    def test_gray_passthrough(self):
        img = constant(0.4)
        assert to_grayscale(img) is img


class TestResize:
    def test_output_dims(self):
        out = resize_bilinear(constant(0.2, 40, 60), 15, 10)
        assert (out.width, out.height) == (15, 10)

    def test_constant_preserved(self):
        out = resize_bilinear(constant(0.7, 5, 7, 3), 13, 4)
        np.testing.assert_allclose(out.data, 0.7)

    def test_upsampled_ramp_stays_linear(self):
        ramp = np.tile(np.linspace(0.1, 0.9, 8), (4, 1))
        out = resize_bilinear(ImageBuf(ramp), 16, 8).plane
        interior = out[:, 1:-1]
        steps = np.diff(interior, axis=1)
        np.testing.assert_allclose(steps, steps[0, 0], atol=1e-6)

    def test_zero_target(self):
        with pytest.raises(ZeroDimension):
            resize_bilinear(constant(0.1), 0, 3)


class TestFilters:
    def test_box_radius_zero_is_identity(self, rng):
        img = ImageBuf(rng.random((5, 5)))
        assert box_blur(img, 0) is img

    def test_box_constant(self):
        np.testing.assert_allclose(box_blur(constant(0.3, 6, 6), 2).data, 0.3)

    def test_box_center_is_mean(self, rng):
        values = rng.random((3, 3))
        out = box_blur(ImageBuf(values), 1)
        assert out.plane[1, 1] == pytest.approx(values.mean())

    def test_box_negative_radius(self):
        with pytest.raises(ValueError):
            box_blur(constant(0.1), -1)

    def test_gaussian_kernel_width(self):
        kernel = gaussian_kernel(1.6)
        assert len(kernel) == 11
        assert kernel.sum() == pytest.approx(1.0)

    def test_gaussian_constant(self):
        np.testing.assert_allclose(gaussian_blur(constant(0.6, 9, 9), 1.2).data, 0.6)

    def test_gaussian_preserves_mean(self, rng):
        values = np.full((64, 64), 0.5)
        values[20:44, 20:44] += 0.2 * rng.random((24, 24))
        out = gaussian_blur(ImageBuf(values), 1.0)
        assert out.plane.mean() == pytest.approx(values.mean(), abs=1e-6)

    def test_non_positive_sigma(self):
        with pytest.raises(NonPositiveSigma):
            gaussian_blur(constant(0.1), 0.0)


class TestPsnr:
    def test_identical_is_capped(self, rng):
        img = ImageBuf(rng.random((4, 4)))
        assert psnr(img, img) == 99.0

    def test_black_vs_white(self):
        assert psnr(constant(0.0), constant(1.0)) == pytest.approx(0.0)

    def test_black_vs_half(self):
        assert psnr(constant(0.0), constant(0.5)) == pytest.approx(10 * math.log10(4))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(constant(0.0, 2, 2), constant(0.0, 3, 3))
