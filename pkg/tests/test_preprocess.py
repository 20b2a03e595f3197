import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swinseg.preprocess import (
    CropBox, EmptyForegroundError, crop_nonzero, embed, resample, zscore,
)
from swinseg.volio import LabelMap, Volume


def vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing)


class TestCrop:
    def test_single_voxel(self):
        data = np.zeros((6, 6, 6))
        data[2, 3, 4] = 1.0
        cropped, box = crop_nonzero(vol(data))
        assert cropped.dims == (1, 1, 1)
        assert box.lo == (2, 3, 4) and box.hi == (3, 4, 5)

    def test_fully_nonzero_identity(self, rng):
        v = vol(rng.uniform(1, 2, size=(4, 5, 6)))
        cropped, box = crop_nonzero(v)
        assert cropped.dims == v.dims
        assert box.lo == (0, 0, 0)

    def test_all_zero_errors(self):
        with pytest.raises(EmptyForegroundError):
            crop_nonzero(vol(np.zeros((3, 3, 3))))

    def test_crop_embed_roundtrip(self, rng):
        data = np.zeros((8, 8, 8), dtype=np.float32)
        data[2:5, 1:7, 3:4] = rng.uniform(1, 2, size=(3, 6, 1))
        v = vol(data)
        cropped, box = crop_nonzero(v)
        back = embed(cropped, box, v.dims)
        np.testing.assert_array_equal(back.voxels, v.voxels)


class TestResample:
    def test_identity_bit_exact(self, rng):
        v = vol(rng.normal(size=(5, 5, 5)), spacing=(1.5, 1.0, 2.0))
        out = resample(v, (1.5, 1.0, 2.0))
        assert out.voxels.tobytes() == v.voxels.tobytes()

    def test_constant_label_downsample(self):
        lab = LabelMap(np.ones((4, 4, 4), np.uint8), (1, 1, 1), 1, frozenset({1}))
        out = resample(lab, (2.0, 2.0, 2.0))
        assert out.dims == (2, 2, 2)
        assert (out.labels == 1).all()

    def test_midpoint_interpolation(self):
        # 1D ramp along W: values 0 and 1 at 1 mm; sample at 2 mm spacing puts
        # the single output center exactly between the two inputs
        v = vol(np.array([[[0.0, 1.0]]]), spacing=(1.0, 1.0, 1.0))
        out = resample(v, (1.0, 1.0, 2.0))
        assert out.dims == (1, 1, 1)
        assert abs(out.voxels[0, 0, 0] - 0.5) <= 1e-6

    def test_trilinear_on_labels_rejected(self):
        lab = LabelMap(np.zeros((2, 2, 2), np.uint8), (1, 1, 1), 1, frozenset())
        with pytest.raises(ValueError, match="nearest"):
            resample(lab, (2.0, 2.0, 2.0), mode="trilinear")

    def test_nearest_preserves_label_set(self, rng):
        labels = rng.choice([0, 1, 3], size=(6, 6, 6)).astype(np.uint8)
        lab = LabelMap(labels, (1, 1, 1), 3, frozenset({1, 3}))
        out = resample(lab, (0.7, 1.3, 0.9))
        assert set(np.unique(out.labels)) <= set(np.unique(labels))

    def test_dims_rounding(self):
        v = vol(np.zeros((10, 10, 10)), spacing=(1.0, 1.0, 1.0))
        out = resample(v, (3.0, 0.5, 1.0))
        assert out.dims == (3, 20, 10)


class TestZscore:
    def test_hand_values(self):
        v = vol(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 3))
        out, params = zscore(v)
        assert params.mu == pytest.approx(4.0)
        assert params.sigma == pytest.approx(np.sqrt(8.0 / 3.0))
        assert abs(out.voxels.mean()) <= 1e-9

    def test_constant_volume(self):
        out, params = zscore(vol(np.full((3, 3, 3), 7.0)))
        assert (out.voxels == 0).all()
        assert params.sigma == pytest.approx(0.0)

    def test_affine_invariance(self, rng):
        x = rng.normal(size=(4, 4, 4)).astype(np.float32)
        a, _ = zscore(vol(x))
        b, _ = zscore(vol(3.5 * x + 2.0))
        assert np.abs(a.voxels - b.voxels).max() <= 1e-5

    def test_region_stats(self, rng):
        data = rng.normal(10, 4, size=(8, 8, 8)).astype(np.float32)
        box = CropBox((1, 1, 1), (5, 5, 5))
        out, params = zscore(vol(data), region=box)
        reg = out.voxels[box.slices]
        assert abs(reg.mean()) <= 1e-6
        assert abs(reg.std() - 1.0) <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16), d=st.integers(2, 6))
    def test_mean_std_property(self, seed, d):
        rng = np.random.default_rng(seed)
        data = rng.normal(rng.uniform(-5, 5), rng.uniform(0.5, 5), size=(d, d, d))
        out, _ = zscore(vol(data))
        assert abs(out.voxels.mean(dtype=np.float64)) <= 1e-6
        assert abs(out.voxels.std(dtype=np.float64) - 1.0) <= 1e-4
