"""Minimal NIfTI-1 single-file (.nii) reader and writer.

Only the header fields needed to decode voxels are interpreted.  Byte order
is detected from ``sizeof_hdr`` (348 in exactly one of the two orders).
Voxels are stored x-fastest, so arrays are reshaped in Fortran order to
``[X, Y, Z]``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NotNiftiError, TruncationError, UnsupportedFormatError

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

# datatype code -> (numpy kind, bitpix)
DATATYPES: dict[int, tuple[str, int]] = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
    64: ("f8", 64),
}
DTYPE_CODES = {np.dtype(kind).str[1:]: code for code, (kind, _) in DATATYPES.items()}

_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_MAGIC = 344


@dataclass
class VolumeHeader:
    dims: tuple[int, ...]
    datatype_code: int
    bitpix: int
    vox_offset: int
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    magic: bytes = b"n+1\x00"
    pixdim: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    endian: str = "<"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dims[1:1 + self.dims[0]])

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.endian + DATATYPES[self.datatype_code][0])

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.shape)) * self.bitpix // 8


@dataclass
class Volume:
    header: VolumeHeader
    voxels: np.ndarray  # float64 [X, Y, Z] after slope/intercept
    raw: np.ndarray = field(repr=False, default=None)
    source: str = ""


def parse_nifti_header(data: bytes) -> VolumeHeader:
    if len(data) < SINGLE_FILE_OFFSET:
        raise NotNiftiError(f"need at least {SINGLE_FILE_OFFSET} bytes, got {len(data)}")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", data, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NotNiftiError("sizeof_hdr is not 348 in either byte order")
    dims = struct.unpack_from(endian + "8h", data, _OFF_DIM)
    datatype, bitpix = struct.unpack_from(endian + "2h", data, _OFF_DATATYPE)
    pixdim = struct.unpack_from(endian + "8f", data, _OFF_PIXDIM)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", data, _OFF_VOX_OFFSET)
    magic = bytes(data[_OFF_MAGIC:_OFF_MAGIC + 4])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NotNiftiError(f"bad magic {magic!r}")
    if datatype not in DATATYPES:
        raise UnsupportedFormatError(
            f"unsupported NIfTI datatype code {datatype}; supported: {sorted(DATATYPES)}")
    if DATATYPES[datatype][1] != bitpix:
        raise UnsupportedFormatError(
            f"bitpix {bitpix} inconsistent with datatype code {datatype}")
    if not 1 <= dims[0] <= 7 or any(d < 1 for d in dims[1:1 + dims[0]]):
        raise NotNiftiError(f"invalid dim field {dims}")
    if magic == b"n+1\x00" and vox_offset < SINGLE_FILE_OFFSET:
        raise NotNiftiError(f"vox_offset {vox_offset} < {SINGLE_FILE_OFFSET} in single-file form")
    return VolumeHeader(dims=tuple(dims), datatype_code=datatype, bitpix=bitpix,
                        vox_offset=int(vox_offset), scl_slope=float(slope),
                        scl_inter=float(inter), magic=magic, pixdim=tuple(pixdim),
                        endian=endian)


def encode_header(header: VolumeHeader) -> bytes:
    """Serialise ``header`` as 348 header bytes plus the 4-byte empty extension."""
    e = header.endian
    buf = bytearray(SINGLE_FILE_OFFSET)
    struct.pack_into(e + "i", buf, 0, HEADER_SIZE)
    struct.pack_into(e + "8h", buf, _OFF_DIM, *header.dims)
    struct.pack_into(e + "2h", buf, _OFF_DATATYPE, header.datatype_code, header.bitpix)
    struct.pack_into(e + "8f", buf, _OFF_PIXDIM, *header.pixdim)
    struct.pack_into(e + "3f", buf, _OFF_VOX_OFFSET, float(header.vox_offset),
                     header.scl_slope, header.scl_inter)
    buf[_OFF_MAGIC:_OFF_MAGIC + 4] = header.magic
    return bytes(buf)


def decode_volume(data: bytes, source: str = "") -> Volume:
    header = parse_nifti_header(data)
    need = header.payload_bytes
    have = len(data) - header.vox_offset
    if have < need:
        raise TruncationError(f"{source or 'volume'}: expected {need} voxel bytes, found {max(have, 0)}")
    raw = np.frombuffer(data, dtype=header.dtype, count=int(np.prod(header.shape)),
                        offset=header.vox_offset).reshape(header.shape, order="F")
    voxels = raw.astype(np.float64)
    if header.scl_slope != 0.0:
        voxels = voxels * header.scl_slope + header.scl_inter
    if not np.isfinite(voxels).all():
        raise DataError(f"{source or 'volume'}: non-finite voxel values")
    return Volume(header=header, voxels=voxels, raw=raw, source=source)


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    return decode_volume(data, source=str(path))


def encode_volume(array: np.ndarray, slope: float = 0.0, inter: float = 0.0,
                  endian: str = "<", pixdim: tuple[float, ...] | None = None) -> bytes:
    """Encode ``array`` (dtype uint8/int16/float32/float64, up to 7-D) as .nii bytes."""
    kind = np.dtype(array.dtype).str[1:]
    if kind not in DTYPE_CODES:
        raise UnsupportedFormatError(f"cannot store dtype {array.dtype}; use uint8/int16/float32/float64")
    if not 1 <= array.ndim <= 7:
        raise UnsupportedFormatError(f"NIfTI-1 holds 1-7 dimensions, got {array.ndim}")
    code = DTYPE_CODES[kind]
    dims = (array.ndim, *array.shape) + (1,) * (7 - array.ndim)
    header = VolumeHeader(dims=dims, datatype_code=code, bitpix=DATATYPES[code][1],
                          vox_offset=SINGLE_FILE_OFFSET, scl_slope=slope, scl_inter=inter,
                          endian=endian,
                          pixdim=pixdim or (1.0,) * 8)
    payload = np.asarray(array, dtype=header.dtype).tobytes(order="F")
    return encode_header(header) + payload


def write_volume(path: str | Path, array: np.ndarray, slope: float = 0.0, inter: float = 0.0,
                 endian: str = "<") -> Path:
    path = Path(path)
    path.write_bytes(encode_volume(array, slope, inter, endian))
    return path
