import numpy as np
import pytest

from segqa.volume import (
    LabelMap,
    PreprocessConfig,
    VolumeError,
    VoxelVolume,
    WindowSpec,
    apply_window,
    crop_or_pad,
    normalize_intensity,
    preprocess_study,
    resample_labels_nearest,
    resample_spline,
)


def const_volume(value, shape=(4, 4, 4)):
    return VoxelVolume(np.full(shape, value, dtype=np.float32))


class TestTypes:
    def test_rejects_nan_with_coordinate(self):
        data = np.zeros((3, 3, 3), dtype=np.float32)
        data[1, 2, 0] = np.nan
        with pytest.raises(VolumeError, match=r"\(1, 2, 0\)"):
            VoxelVolume(data)

    def test_rejects_inf(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 1] = np.inf
        with pytest.raises(VolumeError, match="non-finite"):
            VoxelVolume(data)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(VolumeError, match="spacing"):
            VoxelVolume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_data_is_immutable(self):
        vol = const_volume(1.0)
        with pytest.raises(ValueError):
            vol.data[0, 0, 0] = 5.0

    def test_labelmap_rejects_negative_codes(self):
        with pytest.raises(VolumeError, match="non-negative"):
            LabelMap(np.full((2, 2, 2), -1, dtype=np.int32))

    def test_labelmap_rejects_float_data(self):
        with pytest.raises(VolumeError, match="integer"):
            LabelMap(np.zeros((2, 2, 2), dtype=np.float32))

    def test_window_spec_requires_positive_width(self):
        with pytest.raises(VolumeError, match="window"):
            WindowSpec(window=0.0, level=40.0)


class TestApplyWindow:
    def test_level_maps_to_half(self):
        out = apply_window(const_volume(35.0), WindowSpec(190.0, 35.0))
        assert np.all(out.data == 0.5)

    def test_lower_bound_clamps_to_zero(self):
        spec = WindowSpec(190.0, 35.0)
        out = apply_window(const_volume(35.0 - 95.0), spec)
        assert np.all(out.data == 0.0)

    def test_hand_evaluated_upper_point(self):
        # (130 - (35 - 95)) / 190 = 1.0
        out = apply_window(const_volume(130.0), WindowSpec(190.0, 35.0))
        assert np.all(out.data == 1.0)

    def test_shape_and_spacing_unchanged(self):
        vol = VoxelVolume(np.zeros((3, 4, 5), dtype=np.float32), spacing=(1.5, 2.0, 2.5))
        out = apply_window(vol, WindowSpec(100.0, 0.0))
        assert out.shape == (3, 4, 5)
        assert out.spacing == (1.5, 2.0, 2.5)

    def test_monotone_in_input(self):
        u = np.sort(np.random.default_rng(0).uniform(-500, 500, size=64))
        vol = VoxelVolume(u.reshape(4, 4, 4).astype(np.float32))
        out = apply_window(vol, WindowSpec(190.0, 35.0)).data.ravel()
        assert np.all(np.diff(out) >= 0)


class TestNormalize:
    def test_midpoint(self):
        out = normalize_intensity(const_volume(0.0), -1024.0, 1024.0)
        assert np.all(out.data == 0.5)

    def test_endpoints(self):
        assert np.all(normalize_intensity(const_volume(-1024.0)).data == 0.0)
        assert np.all(normalize_intensity(const_volume(1024.0)).data == 1.0)

    def test_hand_evaluated_point(self):
        out = normalize_intensity(const_volume(512.0), -1024.0, 1024.0)
        assert np.allclose(out.data, 0.75)

    def test_invalid_range(self):
        with pytest.raises(VolumeError, match="range"):
            normalize_intensity(const_volume(0.0), 10.0, 10.0)

    def test_monotone(self):
        u = np.sort(np.random.default_rng(1).uniform(-2000, 2000, size=64))
        vol = VoxelVolume(u.reshape(4, 4, 4).astype(np.float32))
        out = normalize_intensity(vol).data.ravel()
        assert np.all(np.diff(out) >= 0)


class TestResampleSpline:
    def test_constant_stays_constant(self):
        out = resample_spline(const_volume(7.25, (4, 5, 6)), (9, 3, 12))
        assert out.shape == (9, 3, 12)
        assert np.allclose(out.data, 7.25, atol=1e-6)

    def test_identity_when_shapes_match(self):
        rng = np.random.default_rng(2)
        data = rng.uniform(0, 1, size=(5, 6, 7)).astype(np.float32)
        out = resample_spline(VoxelVolume(data), (5, 6, 7))
        assert np.max(np.abs(out.data - data)) < 1e-9

    def test_linear_ramp_8_to_15(self):
        # Catmull-Rom reproduces degree-1 fields; oracle is the analytic ramp
        ramp = np.arange(8, dtype=np.float32)
        data = np.broadcast_to(ramp[:, None, None], (8, 4, 4)).copy()
        out = resample_spline(VoxelVolume(data), (15, 4, 4))
        expected = np.arange(15) * (7.0 / 14.0)
        assert np.max(np.abs(out.data - expected[:, None, None])) < 1e-6

    def test_linear_ramp_all_axes(self):
        for axis in range(3):
            shape = [4, 4, 4]
            shape[axis] = 8
            ramp = np.arange(8, dtype=np.float64)
            data = np.moveaxis(
                np.broadcast_to(ramp[:, None, None], (8, 4, 4)).copy(), 0, axis
            )
            target = [4, 4, 4]
            target[axis] = 13
            out = resample_spline(VoxelVolume(data), tuple(target))
            pos = np.arange(13) * (7.0 / 12.0)
            got = np.moveaxis(out.data, axis, 0)
            assert np.max(np.abs(got - pos[:, None, None])) < 1e-6

    def test_extent_preserved_in_spacing(self):
        vol = VoxelVolume(np.zeros((9, 9, 9), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
        out = resample_spline(vol, (17, 5, 9))
        # physical extent (n-1)*spacing stays fixed per axis
        assert out.spacing[0] == pytest.approx(2.0 * 8 / 16)
        assert out.spacing[1] == pytest.approx(2.0 * 8 / 4)
        assert out.spacing[2] == pytest.approx(2.0)

    def test_rejects_tiny_target(self):
        with pytest.raises(VolumeError, match="target"):
            resample_spline(const_volume(0.0), (1, 4, 4))


class TestResampleLabels:
    def test_identity(self):
        rng = np.random.default_rng(3)
        data = rng.integers(0, 4, size=(5, 5, 5)).astype(np.int32)
        out = resample_labels_nearest(LabelMap(data), (5, 5, 5))
        assert np.array_equal(out.data, data)

    def test_single_voxel_upsample_block(self):
        # code 2 at (1,1,1) in 4^3 -> exactly the {2,3}^3 block in 8^3
        data = np.zeros((4, 4, 4), dtype=np.int32)
        data[1, 1, 1] = 2
        out = resample_labels_nearest(LabelMap(data), (8, 8, 8))
        expected = np.zeros((8, 8, 8), dtype=np.int32)
        expected[2:4, 2:4, 2:4] = 2
        assert np.array_equal(out.data, expected)

    def test_never_invents_codes(self):
        rng = np.random.default_rng(4)
        data = rng.choice([0, 2, 3], size=(6, 7, 5)).astype(np.int32)
        out = resample_labels_nearest(LabelMap(data), (11, 4, 9))
        assert set(np.unique(out.data)) <= {0, 2, 3}


class TestCropOrPad:
    def test_paper_shape_transition(self):
        vol = VoxelVolume(np.zeros((512, 512, 52), dtype=np.float32))
        out = crop_or_pad(vol, (168, 168, 64), fill=0.0)
        assert out.shape == (168, 168, 64)

    def test_identity(self):
        rng = np.random.default_rng(5)
        data = rng.uniform(size=(4, 5, 6)).astype(np.float32)
        out = crop_or_pad(VoxelVolume(data), (4, 5, 6))
        assert np.array_equal(out.data, data)

    def test_pad_preserves_sum(self):
        vol = const_volume(1.0, (4, 4, 4))
        out = crop_or_pad(vol, (6, 6, 6), fill=0.0)
        assert out.shape == (6, 6, 6)
        assert out.data.sum() == 64.0

    def test_pad_then_crop_roundtrip_bit_exact(self):
        rng = np.random.default_rng(6)
        data = rng.uniform(size=(3, 5, 4)).astype(np.float32)
        vol = VoxelVolume(data)
        back = crop_or_pad(crop_or_pad(vol, (9, 7, 10), fill=2.5), (3, 5, 4))
        assert np.array_equal(back.data, data)

    def test_label_pad_uses_background(self):
        lbl = LabelMap(np.full((2, 2, 2), 3, dtype=np.int32))
        out = crop_or_pad(lbl, (4, 4, 4), fill=0)
        assert isinstance(out, LabelMap)
        assert (out.data == 3).sum() == 8
        assert (out.data == 0).sum() == 64 - 8


class TestPreprocessStudy:
    def test_default_output_shapes(self):
        rng = np.random.default_rng(7)
        data = rng.uniform(-200, 200, size=(64, 64, 13)).astype(np.float32)
        lbl = LabelMap((rng.uniform(size=(64, 64, 13)) > 0.8).astype(np.int32))
        out = preprocess_study(VoxelVolume(data), lbl)
        assert out.image.shape == (168, 168, 64)
        assert out.soft.shape == (168, 168, 64)
        assert out.label.shape == (168, 168, 64)

    def test_full_scale_shape_contract(self):
        # 512x512x52 input -> every output 168x168x64
        data = np.zeros((512, 512, 52), dtype=np.float32)
        out = preprocess_study(VoxelVolume(data), None)
        assert out.image.shape == (168, 168, 64)
        assert out.soft.shape == (168, 168, 64)

    def test_label_optional(self):
        out = preprocess_study(const_volume(0.0, (8, 8, 8)), None,
                               PreprocessConfig(target_shape=(8, 8, 8)))
        assert out.label is None

    def test_constant_at_level_gives_half_soft(self):
        cfg = PreprocessConfig(target_shape=(8, 8, 8))
        out = preprocess_study(const_volume(35.0, (16, 16, 16)), None, cfg)
        assert np.allclose(out.soft.data, 0.5, atol=1e-6)

    def test_shapes_identical_with_crop_and_resample_steps(self):
        cfg = PreprocessConfig(resample_shape=(20, 20, 12), target_shape=(16, 16, 16))
        rng = np.random.default_rng(8)
        data = rng.uniform(-500, 500, size=(30, 28, 22)).astype(np.float32)
        lbl = LabelMap((rng.uniform(size=(30, 28, 22)) > 0.7).astype(np.int32) * 2)
        out = preprocess_study(VoxelVolume(data), lbl, cfg)
        assert out.image.shape == out.soft.shape == out.label.shape == (16, 16, 16)

    def test_outputs_stay_in_unit_range(self):
        rng = np.random.default_rng(9)
        data = rng.uniform(-3000, 3000, size=(24, 24, 24)).astype(np.float32)
        cfg = PreprocessConfig(target_shape=(16, 16, 16))
        out = preprocess_study(VoxelVolume(data), None, cfg)
        for vol in (out.image, out.soft):
            assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0

    def test_label_shape_mismatch_rejected(self):
        lbl = LabelMap(np.zeros((4, 4, 4), dtype=np.int32))
        with pytest.raises(VolumeError, match="match"):
            preprocess_study(const_volume(0.0, (8, 8, 8)), lbl)
