"""Volume ingestion and the CT preprocessing pipeline.

Ingestion paths: MetaImage (ASCII header plus a separate little-endian raw
payload) and a minimal internal format (JSON manifest plus float32 raw
payload) so tests and desk-scale runs never require real CT data.

Preprocessing follows two rules: depth is resampled by a nearest-index map
that repeats slices when there are too few and picks equally spaced ones
when there are too many (never interpolating), and intensities are min-max
normalized per scan into [0, 1]. Height and width are left untouched.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine.tensor import Tensor


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file."""


@dataclass
class Volume:
    """Scalar field of shape (D, H, W) with voxel spacing in millimeters."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise VolumeFormatError(f"volume must be 3-axis (D,H,W), got {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be positive, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class ScanPair:
    """Aligned image and binary mask."""

    image: Volume
    mask: Volume

    def __post_init__(self):
        if self.image.dims != self.mask.dims:
            raise VolumeFormatError(
                f"image dims {self.image.dims} != mask dims {self.mask.dims}")
        if not np.all((self.mask.voxels == 0) | (self.mask.voxels == 1)):
            raise VolumeFormatError("mask must be binary")


_METAIMAGE_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}


def read_metaimage(header_path) -> Volume:
    """Read an uncompressed 3D MetaImage header + raw payload pair.

    DimSize is in (x y z) order and maps to internal (D,H,W) = (z,y,x);
    the raw payload is little-endian with x fastest, matching row-major
    (D,H,W) storage directly.
    """
    header_path = os.fspath(header_path)
    fields = {}
    with open(header_path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()

    for required in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if required not in fields:
            raise VolumeFormatError(f"{header_path}: missing required key {required}")
    if fields["NDims"] != "3":
        raise VolumeFormatError(f"{header_path}: NDims = {fields['NDims']}, only 3 supported")
    if fields.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError(f"{header_path}: compressed MetaImage is not supported")
    etype = fields["ElementType"]
    if etype not in _METAIMAGE_DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported ElementType {etype}")
    if fields["ElementDataFile"].upper() in ("LOCAL", "LIST"):
        raise VolumeFormatError(
            f"{header_path}: ElementDataFile = {fields['ElementDataFile']} unsupported; "
            "a separate raw file is required")

    nx, ny, nz = (int(v) for v in fields["DimSize"].split())
    if "ElementSpacing" in fields:
        sx, sy, sz = (float(v) for v in fields["ElementSpacing"].split())
    else:
        sx = sy = sz = 1.0

    raw_path = os.path.join(os.path.dirname(header_path), fields["ElementDataFile"])
    dtype = _METAIMAGE_DTYPES[etype]
    expected = nx * ny * nz * dtype.itemsize
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(payload)} bytes, expected {expected}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(np.float32)
    return Volume(voxels, spacing=(sz, sy, sx))


def write_metaimage(volume: Volume, header_path) -> None:
    """Write a MetaImage pair (fixture/testing convenience, MET_FLOAT only)."""
    header_path = os.fspath(header_path)
    raw_name = os.path.splitext(os.path.basename(header_path))[0] + ".raw"
    d, h, w = volume.dims
    sz, sy, sx = volume.spacing
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {w} {h} {d}",
        f"ElementSpacing = {sx} {sy} {sz}",
        "ElementType = MET_FLOAT",
        f"ElementDataFile = {raw_name}",
    ]
    with open(header_path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(os.path.dirname(header_path), raw_name), "wb") as fh:
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


INTERNAL_VERSION = 1


def write_internal(volume: Volume, path) -> None:
    """Write the internal format: JSON manifest at `path`, raw f32 at `path`.raw."""
    path = os.fspath(path)
    raw_name = os.path.basename(path) + ".raw"
    manifest = {
        "format_version": INTERNAL_VERSION,
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "dtype": "f32",
        "data_file": raw_name,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    with open(path + ".raw", "wb") as fh:
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_internal(path) -> Volume:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: invalid manifest: {exc}") from exc
    if manifest.get("format_version") != INTERNAL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format_version")
    if manifest.get("dtype") != "f32":
        raise VolumeFormatError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    dims = tuple(manifest["dims"])
    raw_path = os.path.join(os.path.dirname(path), manifest["data_file"])
    expected = int(np.prod(dims)) * 4
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise VolumeFormatError(f"{raw_path}: payload is {len(payload)} bytes, expected {expected}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(voxels.copy(), spacing=tuple(manifest["spacing"]))


def depth_index_map(depth: int, target_depth: int) -> np.ndarray:
    """Source slice index for each output slice: floor((i + 0.5) * D / T),
    clamped. Non-decreasing; repeats when D < T, selects equally when D > T."""
    i = np.arange(target_depth)
    src = np.floor((i + 0.5) * depth / target_depth).astype(np.int64)
    return np.clip(src, 0, depth - 1)


def resample_depth(volume: Volume, target_depth: int) -> Volume:
    """Copy slices along depth by the nearest-index map; no interpolation."""
    if target_depth < 1:
        raise ValueError("target_depth must be >= 1")
    d = volume.dims[0]
    src = depth_index_map(d, target_depth)
    voxels = volume.voxels[src]
    sz, sy, sx = volume.spacing
    return Volume(voxels, spacing=(sz * d / target_depth, sy, sx))


def normalize(volume: Volume) -> Volume:
    """Min-max normalize into [0, 1]; constant scans map to all zeros."""
    v = volume.voxels
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return Volume(out, spacing=volume.spacing)


def preprocess_pair(image: Volume, mask: Volume, target_depth: int) -> ScanPair:
    """Depth-resample both volumes with the same index map, normalize the
    image, and re-binarize the mask at 0.5."""
    if image.dims != mask.dims:
        raise VolumeFormatError(f"image dims {image.dims} != mask dims {mask.dims}")
    image_r = resample_depth(image, target_depth)
    mask_r = resample_depth(mask, target_depth)
    mask_r = Volume((mask_r.voxels >= 0.5).astype(np.float32), spacing=mask_r.spacing)
    return ScanPair(image=normalize(image_r), mask=mask_r)


def make_ellipsoid_phantom(rng: np.random.Generator, dims=(16, 32, 32),
                           noise_sigma: float = 0.1) -> ScanPair:
    """Synthetic scan: a random ellipsoid mask plus Gaussian image noise."""
    d, h, w = dims
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    center = rng.uniform(0.35, 0.65, size=3) * np.array(dims)
    radii = rng.uniform(0.18, 0.32, size=3) * np.array(dims)
    inside = (((zz - center[0]) / radii[0]) ** 2
              + ((yy - center[1]) / radii[1]) ** 2
              + ((xx - center[2]) / radii[2]) ** 2) <= 1.0
    mask = inside.astype(np.float32)
    image = mask + rng.normal(0.0, noise_sigma, size=dims).astype(np.float32)
    return ScanPair(image=Volume(image), mask=Volume(mask))


def volume_to_tensor(volume: Volume, dtype=np.float32) -> Tensor:
    """Wrap a volume as a [1, 1, D, H, W] tensor."""
    return Tensor(volume.voxels[None, None], dtype=dtype)
