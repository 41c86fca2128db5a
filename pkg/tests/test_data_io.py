"""Volume formats, depth resampling, normalization, and phantoms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrunet3d.data import (
    ScanPair,
    Volume,
    VolumeFormatError,
    depth_index_map,
    make_ellipsoid_phantom,
    normalize,
    preprocess_pair,
    read_internal,
    read_metaimage,
    resample_depth,
    write_internal,
    write_metaimage,
)


def metaimage_fixture(tmp_path, *, dtype="MET_UCHAR", payload=None, extra="",
                      dims=(4, 3, 2), spacing=True):
    header = tmp_path / "scan.mhd"
    lines = ["NDims = 3", f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
             f"ElementType = {dtype}"]
    if spacing:
        lines.append("ElementSpacing = 0.7 0.8 2.5")
    if extra:
        lines.append(extra)
    lines.append("ElementDataFile = scan.raw")
    header.write_text("\n".join(lines) + "\n", encoding="ascii")
    if payload is None:
        payload = bytes(range(dims[0] * dims[1] * dims[2]))
    (tmp_path / "scan.raw").write_bytes(payload)
    return header


class TestMetaImage:
    def test_synthetic_fixture(self, tmp_path):
        vol = read_metaimage(metaimage_fixture(tmp_path))
        assert vol.dims == (2, 3, 4)
        assert vol.spacing == (2.5, 0.8, 0.7)
        assert vol.voxels[0, 0, 0] == 0.0
        assert vol.voxels[1, 2, 3] == 23.0

    def test_default_spacing(self, tmp_path):
        vol = read_metaimage(metaimage_fixture(tmp_path, spacing=False))
        assert vol.spacing == (1.0, 1.0, 1.0)

    def test_short_payload_rejected(self, tmp_path):
        header = metaimage_fixture(tmp_path, payload=bytes(range(23)))
        with pytest.raises(VolumeFormatError, match="23 bytes"):
            read_metaimage(header)

    def test_missing_key_rejected(self, tmp_path):
        header = tmp_path / "bad.mhd"
        header.write_text("NDims = 3\nDimSize = 2 2 2\n", encoding="ascii")
        with pytest.raises(VolumeFormatError, match="ElementType"):
            read_metaimage(header)

    def test_unsupported_type_rejected(self, tmp_path):
        header = metaimage_fixture(tmp_path, dtype="MET_DOUBLE",
                                   payload=bytes(24 * 8))
        with pytest.raises(VolumeFormatError, match="MET_DOUBLE"):
            read_metaimage(header)

    def test_compressed_rejected(self, tmp_path):
        header = metaimage_fixture(tmp_path, extra="CompressedData = True")
        with pytest.raises(VolumeFormatError, match="compressed"):
            read_metaimage(header)

    def test_local_payload_rejected(self, tmp_path):
        header = tmp_path / "local.mhd"
        header.write_text(
            "NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\n"
            "ElementDataFile = LOCAL\n", encoding="ascii")
        with pytest.raises(VolumeFormatError, match="LOCAL"):
            read_metaimage(header)

    def test_short_dtype_little_endian(self, tmp_path):
        payload = np.arange(-12, 12, dtype="<i2").tobytes()
        vol = read_metaimage(metaimage_fixture(tmp_path, dtype="MET_SHORT",
                                               payload=payload))
        assert vol.voxels[0, 0, 0] == -12.0
        assert vol.voxels[1, 2, 3] == 11.0

    def test_write_read_roundtrip(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32), spacing=(2, 1, 1))
        write_metaimage(vol, tmp_path / "out.mhd")
        back = read_metaimage(tmp_path / "out.mhd")
        np.testing.assert_array_equal(back.voxels, vol.voxels)
        assert back.spacing == vol.spacing

    def test_read_is_byte_deterministic(self, tmp_path):
        header = metaimage_fixture(tmp_path)
        a = read_metaimage(header).voxels.tobytes()
        b = read_metaimage(header).voxels.tobytes()
        assert a == b


class TestInternalFormat:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((2, 3, 4)).astype(np.float32), spacing=(1.5, 1, 1))
        write_internal(vol, tmp_path / "vol.rvol")
        back = read_internal(tmp_path / "vol.rvol")
        assert back.voxels.tobytes() == vol.voxels.tobytes()
        assert back.dims == vol.dims and back.spacing == vol.spacing

    def test_payload_size_mismatch(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((2, 2, 2)).astype(np.float32))
        write_internal(vol, tmp_path / "vol.rvol")
        raw = tmp_path / "vol.rvol.raw"
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(VolumeFormatError, match="bytes"):
            read_internal(tmp_path / "vol.rvol")

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "junk.rvol").write_text("not json")
        with pytest.raises(VolumeFormatError):
            read_internal(tmp_path / "junk.rvol")


class TestDepthIndexMap:
    def test_identity_at_same_depth(self):
        np.testing.assert_array_equal(depth_index_map(5, 5), np.arange(5))

    def test_repeat_3_to_6(self):
        np.testing.assert_array_equal(depth_index_map(3, 6), [0, 0, 1, 1, 2, 2])

    def test_select_512_to_256(self):
        np.testing.assert_array_equal(depth_index_map(512, 256), np.arange(1, 512, 2))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300))
    def test_map_properties(self, depth, target):
        src = depth_index_map(depth, target)
        assert src.shape == (target,)
        assert np.all(np.diff(src) >= 0)          # order preserving
        assert src.min() >= 0 and src.max() < depth

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 120), st.integers(1, 120))
    def test_resample_idempotent_at_target(self, depth, target):
        rng = np.random.default_rng(depth * 1000 + target)
        vol = Volume(rng.standard_normal((depth, 2, 2)).astype(np.float32))
        once = resample_depth(vol, target)
        twice = resample_depth(once, target)
        np.testing.assert_array_equal(once.voxels, twice.voxels)


class TestResampleDepth:
    def test_output_slices_are_exact_copies(self, rng):
        vol = Volume(rng.standard_normal((7, 3, 3)).astype(np.float32))
        out = resample_depth(vol, 11)
        src = depth_index_map(7, 11)
        for i, j in enumerate(src):
            np.testing.assert_array_equal(out.voxels[i], vol.voxels[j])

    def test_spacing_scales_with_depth_ratio(self):
        vol = Volume(np.zeros((4, 2, 2), dtype=np.float32), spacing=(2.0, 1.0, 1.0))
        assert resample_depth(vol, 8).spacing[0] == pytest.approx(1.0)


class TestNormalize:
    def test_affine_map(self):
        vol = Volume(np.array([-1000.0, 0.0, 1000.0], dtype=np.float32).reshape(3, 1, 1))
        out = normalize(vol).voxels.reshape(-1)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_constant_scan_maps_to_zero(self):
        vol = Volume(np.full((2, 2, 2), 7.0, dtype=np.float32))
        np.testing.assert_array_equal(normalize(vol).voxels, 0.0)

    def test_min_zero_max_one(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)).astype(np.float32) * 100)
        out = normalize(vol).voxels
        assert out.min() == 0.0 and out.max() == 1.0

    def test_idempotent_on_nonconstant(self, rng):
        vol = Volume(rng.standard_normal((3, 3, 3)).astype(np.float32))
        once = normalize(vol)
        np.testing.assert_array_equal(normalize(once).voxels, once.voxels)


class TestPreprocessPair:
    def test_identity_depth_keeps_mask(self, rng):
        image = Volume(rng.standard_normal((4, 3, 3)).astype(np.float32))
        mask = Volume((rng.uniform(size=(4, 3, 3)) > 0.5).astype(np.float32))
        pair = preprocess_pair(image, mask, 4)
        np.testing.assert_array_equal(pair.mask.voxels, mask.voxels)

    def test_mask_stays_binary(self, rng):
        image = Volume(rng.standard_normal((5, 3, 3)).astype(np.float32))
        mask = Volume((rng.uniform(size=(5, 3, 3)) > 0.5).astype(np.float32))
        pair = preprocess_pair(image, mask, 9)
        assert set(np.unique(pair.mask.voxels)) <= {0.0, 1.0}

    def test_slice_correspondence_preserved(self, rng):
        depth = 6
        image = Volume(np.stack([np.full((2, 2), i, dtype=np.float32)
                                 for i in range(depth)]))
        mask = Volume(np.stack([np.full((2, 2), float(i % 2), dtype=np.float32)
                                for i in range(depth)]))
        pair = preprocess_pair(image, mask, 10)
        src = depth_index_map(depth, 10)
        # image slice k came from source index src[k]; mask must match it
        norm = pair.image.voxels[:, 0, 0] * (depth - 1)  # undo min-max scaling
        np.testing.assert_allclose(norm, src.astype(np.float32), atol=1e-5)
        np.testing.assert_array_equal(pair.mask.voxels[:, 0, 0],
                                      (src % 2).astype(np.float32))

    def test_dim_mismatch_rejected(self, rng):
        image = Volume(np.zeros((4, 3, 3), dtype=np.float32))
        mask = Volume(np.zeros((4, 3, 2), dtype=np.float32))
        with pytest.raises(VolumeFormatError):
            preprocess_pair(image, mask, 4)


class TestPhantoms:
    def test_mask_binary_and_nonempty(self, rng):
        pair = make_ellipsoid_phantom(rng)
        assert set(np.unique(pair.mask.voxels)) == {0.0, 1.0}
        assert pair.mask.voxels.sum() > 0

    def test_dims_and_noise(self, rng):
        pair = make_ellipsoid_phantom(rng, dims=(8, 16, 16), noise_sigma=0.1)
        assert pair.image.dims == (8, 16, 16)
        assert not np.array_equal(pair.image.voxels, pair.mask.voxels)

    def test_seeded_determinism(self):
        a = make_ellipsoid_phantom(np.random.default_rng(3))
        b = make_ellipsoid_phantom(np.random.default_rng(3))
        np.testing.assert_array_equal(a.image.voxels, b.image.voxels)


class TestVolumeTypes:
    def test_volume_validates_rank(self):
        with pytest.raises(VolumeFormatError):
            Volume(np.zeros((2, 2), dtype=np.float32))

    def test_volume_validates_spacing(self):
        with pytest.raises(VolumeFormatError):
            Volume(np.zeros((2, 2, 2), dtype=np.float32), spacing=(0, 1, 1))

    def test_scanpair_validates_dims(self):
        with pytest.raises(VolumeFormatError):
            ScanPair(Volume(np.zeros((2, 2, 2), dtype=np.float32)),
                     Volume(np.zeros((2, 2, 3), dtype=np.float32)))

    def test_scanpair_validates_binary_mask(self):
        with pytest.raises(VolumeFormatError):
            ScanPair(Volume(np.zeros((2, 2, 2), dtype=np.float32)),
                     Volume(np.full((2, 2, 2), 0.5, dtype=np.float32)))
