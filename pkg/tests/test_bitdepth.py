import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spn.bitdepth import BitPlaneImage, DepthStageSpec, join_bits, preview_quantize, split_bits
from spn.subscale import Image


def image_of(values, depth):
    return Image(values=np.asarray(values, dtype=np.int32).reshape(1, 1, 3) * np.ones((2, 2, 3), dtype=np.int32), depth=depth)


class TestSplitBits:
    def test_value_181(self):
        img = image_of([181, 181, 181], 8)
        planes = split_bits(img, DepthStageSpec(3, 5))
        assert planes.msb.values[0, 0, 0] == 5  # 0b101
        assert planes.lsb.values[0, 0, 0] == 21  # 0b10101

    def test_zero(self):
        planes = split_bits(image_of([0, 0, 0], 8), DepthStageSpec(3, 5))
        assert np.all(planes.msb.values == 0) and np.all(planes.lsb.values == 0)

    def test_exhaustive_roundtrip_8bit(self):
        values = np.arange(256, dtype=np.int32)
        img = Image(values=np.stack([values] * 3, axis=-1).reshape(16, 16, 3), depth=8)
        spec = DepthStageSpec(3, 5)
        back = join_bits(split_bits(img, spec), spec)
        assert np.array_equal(back.values, img.values)

    def test_depth_mismatch(self):
        with pytest.raises(ValueError, match="depth"):
            split_bits(image_of([1, 1, 1], 4), DepthStageSpec(3, 5))


class TestJoinBits:
    def test_5_21_gives_181(self):
        spec = DepthStageSpec(3, 5)
        planes = BitPlaneImage(msb=image_of([5] * 3, 3), lsb=image_of([21] * 3, 5))
        assert join_bits(planes, spec).values[0, 0, 0] == 181

    def test_max(self):
        spec = DepthStageSpec(3, 5)
        planes = BitPlaneImage(msb=image_of([7] * 3, 3), lsb=image_of([31] * 3, 5))
        assert join_bits(planes, spec).values[0, 0, 0] == 255

    @given(d1=st.integers(1, 7), seed=st.integers(0, 1000))
    @settings(max_examples=40)
    def test_roundtrip_random(self, d1, seed):
        d2 = 8 - d1
        spec = DepthStageSpec(d1, d2)
        r = np.random.default_rng(seed)
        img = Image(values=r.integers(0, 256, size=(4, 4, 3)), depth=8)
        assert np.array_equal(join_bits(split_bits(img, spec), spec).values, img.values)

    @given(d1=st.integers(1, 6), d2=st.integers(1, 6))
    @settings(max_examples=30)
    def test_roundtrip_partial_depths(self, d1, d2):
        if d1 + d2 > 8:
            return
        spec = DepthStageSpec(d1, d2)
        total = d1 + d2
        values = np.arange(1 << total, dtype=np.int32)
        n = values.size
        img = Image(values=np.stack([values] * 3, -1).reshape(n, 1, 3), depth=total)
        assert np.array_equal(join_bits(split_bits(img, spec), spec).values, img.values)

    def test_overflow_rejected(self):
        spec = DepthStageSpec(3, 2)
        planes = BitPlaneImage(msb=image_of([1] * 3, 3), lsb=image_of([3] * 3, 2))
        join_bits(planes, spec)  # 3 < 4, fine
        bad = BitPlaneImage(msb=image_of([1] * 3, 3), lsb=image_of([3] * 3, 3))
        with pytest.raises(ValueError, match="overflow"):
            join_bits(BitPlaneImage(msb=bad.msb, lsb=Image(values=bad.lsb.values + 1, depth=3)),
                      spec)


class TestPreviewQuantize:
    def test_max_maps_to_max(self):
        assert preview_quantize(image_of([7] * 3, 3)).values[0, 0, 0] == 255

    def test_zero(self):
        assert preview_quantize(image_of([0] * 3, 3)).values[0, 0, 0] == 0

    def test_mid_value(self):
        # round(4 * 255 / 7) = 146
        assert preview_quantize(image_of([4] * 3, 3)).values[0, 0, 0] == 146

    def test_shift_mode(self):
        assert preview_quantize(image_of([7] * 3, 3), mode="shift").values[0, 0, 0] == 7 << 5

    def test_depth8_identity(self, rng):
        img = Image(values=rng.integers(0, 256, size=(2, 2, 3)), depth=8)
        assert preview_quantize(img) is img

    @given(d=st.integers(1, 8))
    def test_monotone(self, d):
        values = np.arange(1 << d, dtype=np.int32)
        img = Image(values=np.stack([values] * 3, -1).reshape(-1, 1, 3), depth=d)
        out = preview_quantize(img).values[:, 0, 0]
        assert np.all(np.diff(out) >= 0)

    @given(d=st.integers(1, 7))
    def test_stretch_inverts_to_msbs(self, d):
        # loading an 8-bit preview by taking the top D bits recovers the value
        values = np.arange(1 << d, dtype=np.int32)
        img = Image(values=np.stack([values] * 3, -1).reshape(-1, 1, 3), depth=d)
        out = preview_quantize(img).values[:, 0, 0]
        assert np.array_equal(out >> (8 - d), values)
