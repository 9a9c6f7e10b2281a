"""Minimal NIfTI-1 reader and writer.

Supports .nii and .nii.gz single-file images with uint8, int16, float32 or
float64 payloads, up to 4 dimensions. Writing always emits float32 with the
affine stored in the sform (sform_code = 1) and vox_offset 352.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import (
    CorruptHeader,
    DimensionOverflow,
    IoFailure,
    RejectNonFinite,
    UnsupportedDatatype,
)
from .volume import LevelLabels, Mask, Volume

__all__ = ["load_volume", "save_volume", "load_mask", "load_labels"]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise IoFailure(f"bad gzip stream in {path}: {exc}") from exc
    return raw


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scales = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scales
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def _parse_header(raw: bytes, path: str) -> dict:
    if len(raw) < HEADER_SIZE:
        raise CorruptHeader(f"{path}: file shorter than NIfTI-1 header")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise CorruptHeader(f"{path}: sizeof_hdr != 348")
    if raw[344:348] != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {raw[344:348]!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] < 1:
        raise CorruptHeader(f"{path}: dim[0] = {dim[0]}")
    if dim[0] > 4:
        raise DimensionOverflow(f"{path}: {dim[0]} dimensions unsupported")
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    quatern = struct.unpack_from(endian + "6f", raw, 256)
    srow = struct.unpack_from(endian + "12f", raw, 280)
    return {
        "endian": endian,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern_b": quatern[0],
        "quatern_c": quatern[1],
        "quatern_d": quatern[2],
        "qoffset_x": quatern[3],
        "qoffset_y": quatern[4],
        "qoffset_z": quatern[5],
        "srow": srow,
    }


def load_volume(path: str, ped_axis: int = 1, ped_sign: int = 1) -> Volume:
    """Read a NIfTI-1 file into a Volume.

    Intensity scaling (scl_slope/scl_inter) is applied; the affine is
    taken from the sform when sform_code > 0, otherwise from the qform,
    otherwise from pixdim alone.
    """
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    if hdr["datatype"] not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {hdr['datatype']}")
    dtype = _DTYPES[hdr["datatype"]].newbyteorder(hdr["endian"])
    ndim = hdr["dim"][0]
    shape = tuple(max(int(n), 1) for n in hdr["dim"][1:1 + ndim])
    count = int(np.prod(shape))
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE or len(raw) < offset + count * dtype.itemsize:
        raise CorruptHeader(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data * slope + inter
    if ndim < 3:
        data = data.reshape(shape + (1,) * (3 - ndim))
    spacing = tuple(abs(float(p)) or 1.0 for p in hdr["pixdim"][1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = np.asarray(hdr["srow"], dtype=np.float64).reshape(3, 4)
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return Volume(data=data, spacing=spacing, affine=affine,
                  ped_axis=ped_axis, ped_sign=ped_sign)


def save_volume(v: Volume, path: str, intent_name: str = "") -> None:
    """Write a Volume as a float32 NIfTI-1 file (gzipped when path ends .gz)."""
    if not np.all(np.isfinite(v.data)):
        raise RejectNonFinite("volume contains non-finite samples")
    dims = v.dims
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    pixdim = [1.0, v.spacing[0], v.spacing[1], v.spacing[2], 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<12f", hdr, 280, *np.asarray(v.affine[:3, :], dtype=np.float64).ravel())
    name = intent_name.encode()[:15]
    hdr[328:328 + len(name)] = name
    hdr[344:348] = MAGIC
    payload = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += np.asfortranarray(v.data.astype(np.float32)).tobytes(order="F")
    try:
        if path.endswith(".gz"):
            # fixed mtime so identical volumes produce bit-identical files
            with open(path, "wb") as fh:
                with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                    gz.write(payload)
        else:
            with open(path, "wb") as fh:
                fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_mask(path: str) -> Mask:
    v = load_volume(path)
    return Mask(data=v.data > 0.5, spacing=v.spacing, affine=v.affine)


def load_labels(path: str, names: tuple[str, ...] = ()) -> LevelLabels:
    v = load_volume(path)
    return LevelLabels(data=v.data, spacing=v.spacing, affine=v.affine, names=names)
