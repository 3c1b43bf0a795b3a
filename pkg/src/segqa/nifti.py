"""Bit-exact reader/writer for a little-endian NIfTI-1 subset (single .nii).

Supported datatypes: 2 (uint8), 4 (int16), 16 (float32). Files written here
put the 348-byte header plus 4 pad bytes in front of the payload, so
vox_offset is always 352. The voxel payload is x-fastest (Fortran order over
(x, y, z)), matching the format's column-major convention.

uint8 payloads without intensity scaling decode to LabelMap; everything else
decodes to VoxelVolume. Orientation fields (qform/sform, header bytes
252..343) are never interpreted; pass the header returned by
``read_nifti_with_header`` back into ``write_nifti`` to carry them through a
round-trip unchanged. Origins are not persisted: the harness works in voxel
space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, VoxelVolume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPES = {
    DT_UINT8: (np.dtype("<u1"), 8),
    DT_INT16: (np.dtype("<i2"), 16),
    DT_FLOAT32: (np.dtype("<f4"), 32),
}

_ORIENT_START, _ORIENT_END = 252, 344  # qform/sform block, kept opaque


class NiftiError(ValueError):
    pass


class NiftiFormatError(NiftiError):
    """Header field violates the subset invariants."""


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


class ValueRangeError(NiftiError):
    """Values not representable in the requested on-disk datatype."""


@dataclass
class NiftiHeaderSubset:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    orientation: bytes  # raw bytes 252..343, opaque

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.dim[1], self.dim[2], self.dim[3])

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.pixdim[1], self.pixdim[2], self.pixdim[3])


def _parse_header(buf: bytes) -> NiftiHeaderSubset:
    if len(buf) < VOX_OFFSET:
        raise TruncatedFileError(
            f"file too short for a NIfTI-1 header: expected at least "
            f"{VOX_OFFSET} bytes, got {len(buf)}"
        )
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != HEADER_SIZE:
        (swapped,) = struct.unpack_from(">i", buf, 0)
        if swapped == HEADER_SIZE:
            raise NiftiFormatError(
                "sizeof_hdr is byte-swapped: big-endian files are not supported"
            )
        raise NiftiFormatError(f"sizeof_hdr must be {HEADER_SIZE}, got {sizeof_hdr}")
    magic = buf[344:348]
    if magic != MAGIC:
        raise NiftiFormatError(f"magic must be {MAGIC!r}, got {magic!r}")
    dim = struct.unpack_from("<8h", buf, 40)
    datatype, bitpix = struct.unpack_from("<2h", buf, 70)
    pixdim = struct.unpack_from("<8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", buf, 108)
    return NiftiHeaderSubset(
        sizeof_hdr=sizeof_hdr,
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        magic=magic,
        orientation=buf[_ORIENT_START:_ORIENT_END],
    )


def _validate_header(hdr: NiftiHeaderSubset) -> None:
    if hdr.dim[0] != 3:
        raise NiftiFormatError(f"dim[0] (rank) must be 3, got {hdr.dim[0]}")
    if any(d < 1 for d in hdr.dim[1:4]):
        raise NiftiFormatError(f"dim[1..3] must be >= 1, got {hdr.dim[1:4]}")
    if hdr.datatype not in _DTYPES:
        raise UnsupportedDatatypeError(
            f"unsupported datatype code {hdr.datatype} "
            f"(supported: 2=uint8, 4=int16, 16=float32)"
        )
    expected_bitpix = _DTYPES[hdr.datatype][1]
    if hdr.bitpix != expected_bitpix:
        raise NiftiFormatError(
            f"bitpix {hdr.bitpix} inconsistent with datatype {hdr.datatype} "
            f"(expected {expected_bitpix})"
        )
    if any(not (p > 0) for p in hdr.pixdim[1:4]):
        raise NiftiFormatError(f"pixdim[1..3] must be > 0, got {hdr.pixdim[1:4]}")
    if hdr.vox_offset < VOX_OFFSET:
        raise NiftiFormatError(
            f"vox_offset must be >= {VOX_OFFSET}, got {hdr.vox_offset}"
        )


def read_nifti_with_header(buf: bytes) -> tuple[VoxelVolume | LabelMap, NiftiHeaderSubset]:
    hdr = _parse_header(buf)
    _validate_header(hdr)
    nx, ny, nz = hdr.shape
    dtype, bitpix = _DTYPES[hdr.datatype]
    nvox = nx * ny * nz
    offset = int(hdr.vox_offset)
    expected = offset + nvox * (bitpix // 8)
    if len(buf) < expected:
        raise TruncatedFileError(
            f"truncated payload: expected {expected} bytes, got {len(buf)}"
        )
    raw = np.frombuffer(buf, dtype=dtype, count=nvox, offset=offset)
    raw = raw.reshape((nx, ny, nz), order="F")

    scaled = hdr.scl_slope != 0.0 and not (hdr.scl_slope == 1.0 and hdr.scl_inter == 0.0)
    if hdr.datatype == DT_UINT8 and not scaled:
        return LabelMap(raw.astype(np.int32), hdr.spacing), hdr
    if scaled:
        values = raw.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    else:
        values = raw
    return VoxelVolume(values, hdr.spacing), hdr


def read_nifti(buf: bytes) -> VoxelVolume | LabelMap:
    """Decode a .nii byte stream; see module docstring for conventions."""
    return read_nifti_with_header(buf)[0]


def _encode_payload(vol: VoxelVolume | LabelMap, datatype: int) -> bytes:
    dtype, _ = _DTYPES[datatype]
    data = vol.data
    if datatype == DT_FLOAT32:
        if isinstance(vol, LabelMap):
            data = data.astype(np.float32)
        return np.asarray(data, dtype=dtype).tobytes(order="F")
    info = np.iinfo(dtype)
    if isinstance(vol, VoxelVolume):
        if not np.array_equal(data, np.round(data)):
            raise ValueRangeError(
                f"volume has non-integral values; not representable as "
                f"datatype {datatype}"
            )
    lo, hi = int(data.min()), int(data.max())
    if lo < info.min or hi > info.max:
        raise ValueRangeError(
            f"values in [{lo}, {hi}] do not fit datatype {datatype} "
            f"range [{info.min}, {info.max}]"
        )
    return data.astype(dtype).tobytes(order="F")


def write_nifti(
    vol: VoxelVolume | LabelMap,
    datatype: int = DT_FLOAT32,
    header: NiftiHeaderSubset | None = None,
) -> bytes:
    """Encode to .nii bytes; read_nifti inverts it exactly.

    When ``header`` is given, its orientation block is copied through
    verbatim; all subset fields are regenerated from the volume.
    """
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")
    payload = _encode_payload(vol, datatype)
    nx, ny, nz = vol.shape
    _, bitpix = _DTYPES[datatype]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    if header is not None:
        hdr[_ORIENT_START:_ORIENT_END] = header.orientation
    hdr[344:348] = MAGIC
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def read_nifti_file(path) -> VoxelVolume | LabelMap:
    with open(path, "rb") as f:
        return read_nifti(f.read())


def write_nifti_file(path, vol, datatype: int = DT_FLOAT32) -> None:
    with open(path, "wb") as f:
        f.write(write_nifti(vol, datatype))
