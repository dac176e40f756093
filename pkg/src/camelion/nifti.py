"""Import of uncompressed NIfTI-1 files (a deliberately small subset).

Supported: single-file ``n+1`` and header/``.img`` pair ``ni1`` magics, both
byte orders, datatypes uint8 / int16 / float32, with scl_slope / scl_inter
rescaling. Orientation metadata is ignored; only dim[1..3] and pixdim[1..3]
are honoured. Anything else (4D data, other datatypes, compression) raises.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, PersistenceError, UnsupportedError
from .volumes import LabelVolume, ScalarVolume, VolumeHeader

NIFTI_HEADER_SIZE = 348

_DT_UINT8 = 2
_DT_INT16 = 4
_DT_FLOAT32 = 16
_SUPPORTED = {_DT_UINT8: "u1", _DT_INT16: "i2", _DT_FLOAT32: "f4"}


def import_nifti(path) -> ScalarVolume | LabelVolume:
    """Load an uncompressed NIfTI-1 file as a toolkit volume.

    uint8 data without rescaling becomes a LabelVolume (num_classes = max
    label found); int16, float32 and anything rescaled becomes a
    ScalarVolume. Values are mapped as slope * raw + inter when scl_slope
    is nonzero and finite.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    if len(blob) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: shorter than a NIfTI-1 header")

    sizeof_le = struct.unpack_from("<i", blob, 0)[0]
    sizeof_be = struct.unpack_from(">i", blob, 0)[0]
    if sizeof_le == NIFTI_HEADER_SIZE:
        bo = "<"
    elif sizeof_be == NIFTI_HEADER_SIZE:
        bo = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348, not a NIfTI-1 file")

    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: unrecognized magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", blob, 40)
    datatype = struct.unpack_from(bo + "h", blob, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", blob, 76)
    vox_offset = struct.unpack_from(bo + "f", blob, 108)[0]
    scl_slope = struct.unpack_from(bo + "f", blob, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", blob, 116)[0]

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"{path}: dim[0] = {ndim} out of range")
    if ndim > 3 and any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise UnsupportedError(f"{path}: volume has more than 3 non-trivial dimensions")
    dims = tuple(int(dim[i]) if i <= ndim else 1 for i in (1, 2, 3))
    if any(d <= 0 for d in dims):
        raise FormatError(f"{path}: non-positive dimension in dim[1..3] = {dims}")
    vsizes = tuple(float(pixdim[i]) for i in (1, 2, 3))
    if any(not np.isfinite(v) or v <= 0 for v in vsizes):
        raise FormatError(f"{path}: non-positive pixdim[1..3] = {vsizes}")

    if datatype not in _SUPPORTED:
        raise UnsupportedError(f"{path}: datatype code {datatype} is not supported")
    dtype = np.dtype(bo + _SUPPORTED[datatype])

    if magic == b"n+1\x00":
        offset = int(vox_offset)
        if offset < NIFTI_HEADER_SIZE:
            raise FormatError(f"{path}: vox_offset {offset} inside the header")
        payload = blob[offset:]
    else:
        img_path = path.with_suffix(".img")
        try:
            payload = img_path.read_bytes()
        except OSError as exc:
            raise PersistenceError(f"cannot read image file {img_path}: {exc}") from exc

    n = dims[0] * dims[1] * dims[2]
    need = n * dtype.itemsize
    if len(payload) < need:
        raise FormatError(f"{path}: image data is {len(payload)} bytes, need {need}")
    raw = np.frombuffer(payload[:need], dtype=dtype).reshape(dims)

    header = VolumeHeader(dims, vsizes)
    scaled = np.isfinite(scl_slope) and scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0)
    if datatype == _DT_UINT8 and not scaled:
        return LabelVolume(header, raw.copy(), num_classes=int(raw.max(initial=0)))
    values = raw.astype(np.float64)
    if scaled:
        values = values * float(scl_slope) + float(scl_inter)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite values after rescaling")
    return ScalarVolume(header, values.astype(np.float32))
