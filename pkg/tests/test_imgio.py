import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from superpix.errors import (
    BadMagic,
    Downscale,
    LabelOverflow,
    MalformedHeader,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDepth,
    VersionMismatch,
    WrongChannelCount,
)
from superpix.imgio import (
    FeatureTensor,
    MultiChannelImage,
    RawImage,
    SuperpixelMap,
    boundary_overlay,
    concat_channels,
    export_labelmap_pgm,
    gray_to_lightness,
    load_image,
    load_pgm_labels,
    read_feature_file,
    read_labelmap,
    rgb_to_lab,
    save_image,
    save_pgm,
    to_multichannel,
    upscale_nearest,
    write_feature_file,
    write_labelmap,
)


def lab_oracle(r, g, b):
    """Scalar textbook sRGB -> XYZ (D65) -> CIELAB, written independently of the package."""

    def lin(c):
        c /= 255.0
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    R, G, B = lin(float(r)), lin(float(g)), lin(float(b))
    X = 0.4124 * R + 0.3576 * G + 0.1805 * B
    Y = 0.2126 * R + 0.7152 * G + 0.0722 * B
    Z = 0.0193 * R + 0.1192 * G + 0.9505 * B
    Xn, Yn, Zn = 0.95047, 1.0, 1.08883

    def f(t):
        return t ** (1 / 3) if t > 216 / 24389 else (24389 / 27 * t + 16) / 116

    fx, fy, fz = f(X / Xn), f(Y / Yn), f(Z / Zn)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def rgb_image(pixels):
    data = np.asarray(pixels, dtype=np.uint8).reshape(1, -1, 3)
    return RawImage(data.shape[1], 1, 3, data)


class TestNetpbm:
    def test_p5_bytes_copied(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = load_image(p)
        assert (img.width, img.height, img.channels) == (2, 2, 1)
        np.testing.assert_array_equal(img.data.ravel(), [0, 128, 255, 64])

    def test_header_comments(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n# max\n255\n" + bytes([7, 9]))
        np.testing.assert_array_equal(load_image(p).data.ravel(), [7, 9])

    def test_p6_16bit_rejected(self, tmp_path):
        p = tmp_path / "a.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(UnsupportedDepth):
            load_image(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(15))
        with pytest.raises(TruncatedData):
            load_image(p)

    @pytest.mark.parametrize("head", [b"P3\n1 1\n255\n", b"P5\n1\n", b"P5\nx 1\n255\n", b"P5\n1 1\n0\n"])
    def test_malformed(self, tmp_path, head):
        p = tmp_path / "m.pgm"
        p.write_bytes(head + bytes(3))
        with pytest.raises(MalformedHeader):
            load_image(p)

    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        save_image(tmp_path / "x.ppm", RawImage(7, 5, 3, data))
        img = load_image(tmp_path / "x.ppm")
        assert img.channels == 3
        np.testing.assert_array_equal(img.data, data)

    def test_16bit_labels(self, tmp_path):
        labels = np.array([[0, 300], [65535, 7]])
        save_pgm(tmp_path / "l.pgm", labels)
        np.testing.assert_array_equal(load_pgm_labels(tmp_path / "l.pgm"), labels)

    def test_rawimage_invariants(self):
        with pytest.raises(ShapeMismatch):
            RawImage(2, 2, 1, np.zeros((2, 3, 1), np.uint8))
        with pytest.raises(WrongChannelCount):
            RawImage(1, 1, 2, np.zeros((1, 1, 2), np.uint8))


class TestLab:
    def test_white(self):
        L, a, b = rgb_to_lab(rgb_image([255, 255, 255])).data[:, 0, 0]
        np.testing.assert_allclose([L, a, b], [100, 0, 0], atol=1e-3)

    def test_black(self):
        np.testing.assert_allclose(rgb_to_lab(rgb_image([0, 0, 0])).data[:, 0, 0], [0, 0, 0], atol=1e-12)

    def test_red_against_oracle(self):
        got = rgb_to_lab(rgb_image([255, 0, 0])).data[:, 0, 0]
        np.testing.assert_allclose(got, lab_oracle(255, 0, 0), atol=0.05)
        np.testing.assert_allclose(got, [53.24, 80.09, 67.20], atol=0.05)

    def test_random_colors_against_oracle(self):
        rng = np.random.default_rng(1)
        px = rng.integers(0, 256, (200, 3))
        got = rgb_to_lab(rgb_image(px)).data[:, 0, :].T
        want = np.array([lab_oracle(*p) for p in px])
        np.testing.assert_allclose(got, want, atol=0.05)

    def test_against_skimage(self):
        from skimage.color import rgb2lab

        rng = np.random.default_rng(2)
        px = rng.integers(0, 256, (1, 300, 3)).astype(np.uint8)
        got = rgb_to_lab(RawImage(300, 1, 3, px)).data
        want = np.moveaxis(rgb2lab(px), 2, 0)
        np.testing.assert_allclose(got, want, atol=0.05)

    @given(st.integers(0, 255))
    def test_gray_has_no_chroma(self, v):
        a, b = rgb_to_lab(rgb_image([v, v, v])).data[1:, 0, 0]
        assert abs(a) < 1e-6 and abs(b) < 1e-6

    def test_lightness_range_and_names(self):
        rng = np.random.default_rng(3)
        lab = rgb_to_lab(rgb_image(rng.integers(0, 256, (100, 3))))
        assert lab.channel_names == ("L", "a", "b")
        assert lab.data[0].min() >= 0 and lab.data[0].max() <= 100

    def test_wrong_channels(self):
        with pytest.raises(WrongChannelCount):
            rgb_to_lab(RawImage(1, 1, 1, np.zeros((1, 1, 1), np.uint8)))

    def test_gray_input_becomes_lab(self):
        img = RawImage(2, 1, 1, np.array([[[10], [200]]], np.uint8))
        lab = to_multichannel(img)
        assert lab.channel_names == ("L", "a", "b")
        np.testing.assert_allclose(lab.data[1:], 0, atol=1e-6)

    def test_gray_to_lightness(self):
        img = RawImage(3, 1, 1, np.array([[[0], [128], [255]]], np.uint8))
        L = gray_to_lightness(img)
        assert L.channel_names == ("L",)
        np.testing.assert_allclose(L.data[0, 0], [lab_oracle(v, v, v)[0] for v in (0, 128, 255)], atol=0.05)
        with pytest.raises(WrongChannelCount):
            gray_to_lightness(rgb_image([1, 2, 3]))


class TestUpscale:
    def test_2x2_blocks(self):
        t = FeatureTensor(np.array([[[1, 2], [3, 4]]], np.float32))
        want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], np.float32)
        np.testing.assert_array_equal(upscale_nearest(t, 4, 4).data[0], want)

    def test_identity(self):
        t = FeatureTensor(np.random.default_rng(0).normal(size=(3, 5, 6)).astype(np.float32))
        out = upscale_nearest(t, 6, 5)
        assert out.data.tobytes() == t.data.tobytes()

    def test_index_arithmetic(self):
        rng = np.random.default_rng(0)
        t = FeatureTensor(rng.normal(size=(81, 64, 64)).astype(np.float32))
        up = upscale_nearest(t, 256, 256)
        assert up.data.shape == (81, 256, 256)
        # x = 130, y = 7 -> source (130 // 4, 7 // 4) = (32, 1)
        np.testing.assert_array_equal(up.data[:, 7, 130], t.data[:, 1, 32])

    def test_non_integer_ratio(self):
        t = FeatureTensor(np.arange(3, dtype=np.float32).reshape(1, 1, 3))
        # sw = 7/3: source x fills [floor(x*sw), ...) -> starts 0, 2, 4
        np.testing.assert_array_equal(upscale_nearest(t, 7, 1).data[0, 0], [0, 0, 1, 1, 2, 2, 2])

    def test_downscale_rejected(self):
        with pytest.raises(Downscale):
            upscale_nearest(FeatureTensor(np.zeros((1, 4, 4), np.float32)), 2, 4)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-5, 5, width=32)),
        st.integers(0, 6),
        st.integers(0, 6),
    )
    def test_preserves_value_set(self, data, ex, ey):
        t = FeatureTensor(data)
        up = upscale_nearest(t, t.width + ex, t.height + ey)
        for m in range(t.map_count):
            np.testing.assert_array_equal(np.unique(up.data[m]), np.unique(t.data[m]))


class TestConcat:
    def lab(self, w=4, h=3):
        return MultiChannelImage(np.random.default_rng(0).normal(size=(3, h, w)), ("L", "a", "b"))

    def test_all_true(self):
        t = FeatureTensor(np.zeros((81, 3, 4), np.float32))
        assert concat_channels(self.lab(), t).channel_count == 84

    def test_all_false_identity(self):
        img = self.lab()
        t = FeatureTensor(np.zeros((81, 3, 4), np.float32))
        assert concat_channels(img, t, [False] * 81) is img

    def test_naming(self):
        t = FeatureTensor(np.arange(81 * 12, dtype=np.float32).reshape(81, 3, 4))
        mask = [m in (0, 5) for m in range(81)]
        out = concat_channels(self.lab(), t, mask)
        assert out.channel_names == ("L", "a", "b", "f0", "f5")
        np.testing.assert_array_equal(out.data[4], t.data[5])

    def test_drop_appended_restores_input(self):
        img = self.lab()
        t = FeatureTensor(np.random.default_rng(1).normal(size=(6, 3, 4)).astype(np.float32))
        out = concat_channels(img, t, [True, False, True, True, False, True])
        np.testing.assert_array_equal(out.data[:3], img.data)
        assert out.channel_names[:3] == img.channel_names

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            concat_channels(self.lab(), FeatureTensor(np.zeros((2, 4, 4), np.float32)))
        with pytest.raises(ShapeMismatch):
            concat_channels(self.lab(), FeatureTensor(np.zeros((2, 3, 4), np.float32)), [True])


class TestFeatureFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        data = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
        write_feature_file(tmp_path / "a.ften", FeatureTensor(data))
        assert read_feature_file(tmp_path / "a.ften").data.tobytes() == data.tobytes()

    def test_layout_single_value(self, tmp_path):
        write_feature_file(tmp_path / "one.ften", FeatureTensor(np.full((1, 1, 1), 2.5, np.float32)))
        buf = (tmp_path / "one.ften").read_bytes()
        assert len(buf) == 24
        assert buf[:4] == b"FTEN"
        assert struct.unpack("<4I", buf[4:20]) == (1, 1, 1, 1)
        assert buf[20:] == struct.pack("<f", 2.5)

    def test_map_planar_order(self, tmp_path):
        data = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
        write_feature_file(tmp_path / "o.ften", FeatureTensor(data))
        vals = np.frombuffer((tmp_path / "o.ften").read_bytes()[20:], "<f4")
        np.testing.assert_array_equal(vals, np.arange(12))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ften").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(BadMagic):
            read_feature_file(tmp_path / "x.ften")

    def test_version(self, tmp_path):
        (tmp_path / "v.ften").write_bytes(b"FTEN" + struct.pack("<4I", 2, 1, 1, 1) + bytes(4))
        with pytest.raises(VersionMismatch):
            read_feature_file(tmp_path / "v.ften")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ften").write_bytes(b"FTEN" + struct.pack("<4I", 1, 2, 2, 1) + bytes(12))
        with pytest.raises(TruncatedData):
            read_feature_file(tmp_path / "t.ften")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            FeatureTensor(np.array([[[np.nan]]], np.float32))


class TestLabelMap:
    def test_roundtrip(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 100000, (6, 9))
        write_labelmap(tmp_path / "m.spxl", SuperpixelMap(labels))
        np.testing.assert_array_equal(read_labelmap(tmp_path / "m.spxl").labels, labels)

    def test_pgm_export_big_endian(self, tmp_path):
        export_labelmap_pgm(tmp_path / "m.pgm", SuperpixelMap(np.array([[3, 7]])))
        buf = (tmp_path / "m.pgm").read_bytes()
        assert buf.startswith(b"P5\n2 1\n65535\n")
        assert buf[-4:] == bytes([0, 3, 0, 7])
        np.testing.assert_array_equal(load_pgm_labels(tmp_path / "m.pgm"), [[3, 7]])

    def test_overflow_only_on_pgm(self, tmp_path):
        sp = SuperpixelMap(np.array([[70000]]))
        with pytest.raises(LabelOverflow):
            export_labelmap_pgm(tmp_path / "m.pgm", sp)
        write_labelmap(tmp_path / "m.spxl", sp)
        assert read_labelmap(tmp_path / "m.spxl").labels[0, 0] == 70000

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "a.spxl").write_bytes(b"SPXX" + bytes(12))
        with pytest.raises(BadMagic):
            read_labelmap(tmp_path / "a.spxl")
        (tmp_path / "b.spxl").write_bytes(b"SPXL" + struct.pack("<3I", 1, 2, 2) + bytes(8))
        with pytest.raises(TruncatedData):
            read_labelmap(tmp_path / "b.spxl")

    def test_overlay(self):
        rgb = np.zeros((2, 4, 3), np.uint8)
        out = boundary_overlay(rgb, np.array([[0, 0, 1, 1], [0, 0, 1, 1]]))
        np.testing.assert_array_equal(out[:, :, 0], [[0, 255, 255, 0], [0, 255, 255, 0]])
