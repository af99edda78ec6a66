"""Minimal NIfTI-1 single-file (``.nii`` / ``.nii.gz``) I/O and landmark CSVs.

Volumes are written as float32, label maps as uint8/int16 and displacement
fields as float32 5-D ``(X, Y, Z, 1, 3)`` arrays in voxel units. The writer
always emits little-endian; the reader accepts either byte order.
sform/qform are parsed and passed through, never applied.
"""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gradreg.volume import DisplacementField, LabelMap, LandmarkSet, ShapeError, Volume3

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
INTENT_DISPVECT = 1006
ECODE_COMMENT = 6
FIELD_UNITS_NOTE = b"gradreg displacement units=voxel"

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    dt = np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)
    assert dt.itemsize == HEADER_SIZE
    return dt


class FormatError(ValueError):
    """Input file content could not be parsed."""


class LandmarkFormatError(FormatError):
    pass


class NiftiError(FormatError):
    """Malformed or unsupported file content; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


@dataclass
class NiftiHeader:
    dims: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    magic: bytes = MAGIC_SINGLE
    intent_code: int = 0
    xyzt_units: int = 2  # mm
    descrip: bytes = b""
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    srow: tuple[tuple[float, ...], ...] = ((0.0,) * 4,) * 3
    extensions: list[tuple[int, bytes]] = field(default_factory=list)
    byteorder: str = "<"

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(p) if p > 0 else 1.0 for p in self.pixdim[1:4])  # type: ignore[return-value]

    @property
    def geometry(self) -> dict:
        """The pass-through orientation fields."""
        return {
            "qform_code": self.qform_code,
            "sform_code": self.sform_code,
            "quatern": self.quatern,
            "qoffset": self.qoffset,
            "srow": self.srow,
            "xyzt_units": self.xyzt_units,
        }


# ---------------------------------------------------------------------------
# raw byte level


def _open_read(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedDataError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def _parse_header(raw: bytes, path) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(
            f"{path}: header needs {HEADER_SIZE} bytes, file has {len(raw)}", len(raw)
        )
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(order))[0]
        if 1 <= int(hdr["dim"][0]) <= 7:
            break
    else:
        raise NiftiError(f"{path}: implausible dim[0] in either byte order", 40)
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic != MAGIC_SINGLE:
        if magic == MAGIC_PAIR:
            raise BadMagicError(f"{path}: two-file (.hdr/.img) NIfTI is not supported", 344)
        raise BadMagicError(f"{path}: bad magic {magic!r}", 344)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}", 70)
    ndim = int(hdr["dim"][0])
    dims = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    if any(d < 1 for d in dims):
        raise NiftiError(f"{path}: non-positive dimension in {dims}", 42)
    vox_offset = float(hdr["vox_offset"])
    extensions = _parse_extensions(raw, int(vox_offset), order, path)
    return NiftiHeader(
        dims=dims,
        datatype=code,
        bitpix=int(hdr["bitpix"]),
        pixdim=tuple(float(p) for p in hdr["pixdim"]),
        vox_offset=vox_offset,
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        magic=magic,
        intent_code=int(hdr["intent_code"]),
        xyzt_units=int(hdr["xyzt_units"]),
        descrip=bytes(hdr["descrip"]),
        qform_code=int(hdr["qform_code"]),
        sform_code=int(hdr["sform_code"]),
        quatern=(float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])),
        qoffset=(float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])),
        srow=tuple(tuple(float(v) for v in hdr[k]) for k in ("srow_x", "srow_y", "srow_z")),
        extensions=extensions,
        byteorder=order,
    )


def _parse_extensions(raw: bytes, vox_offset: int, order: str, path) -> list[tuple[int, bytes]]:
    if vox_offset < HEADER_SIZE + 4 or len(raw) < HEADER_SIZE + 4 or raw[HEADER_SIZE] == 0:
        return []
    exts = []
    pos = HEADER_SIZE + 4
    i4 = np.dtype(np.int32).newbyteorder(order)
    while pos + 8 <= vox_offset:
        esize, ecode = (int(v) for v in np.frombuffer(raw[pos : pos + 8], dtype=i4))
        if esize < 8 or pos + esize > vox_offset:
            raise NiftiError(f"{path}: malformed extension of size {esize}", pos)
        exts.append((ecode, raw[pos + 8 : pos + esize]))
        pos += esize
    return exts


def read_nifti(path) -> tuple[NiftiHeader, np.ndarray]:
    """Header and the raw (unscaled) array in its stored dtype and shape."""
    path = Path(path)
    raw = _open_read(path)
    hdr = _parse_header(raw, path)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    count = int(np.prod(hdr.dims))
    start = int(hdr.vox_offset)
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedDataError(
            f"{path}: truncated data: expected {need} bytes, got {len(raw)}", len(raw)
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = data.reshape(hdr.dims, order="F").astype(dtype.newbyteorder("="))
    return hdr, data


def _scaled(hdr: NiftiHeader, data: np.ndarray, path) -> np.ndarray:
    if data.dtype.kind == "f":
        bad = np.flatnonzero(~np.isfinite(data.ravel(order="F")))
        if bad.size:
            off = int(hdr.vox_offset) + int(bad[0]) * data.dtype.itemsize
            raise NiftiError(f"{path}: non-finite value in image data", off)
    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        out_dtype = np.float64 if data.dtype == np.float64 else np.float32
        return (data.astype(np.float64) * slope + inter).astype(out_dtype)
    return data


def _geometry_kwargs(template: NiftiHeader | None) -> dict:
    if template is None:
        return {}
    return {
        "qform_code": template.qform_code,
        "sform_code": template.sform_code,
        "quatern": template.quatern,
        "qoffset": template.qoffset,
        "srow": template.srow,
        "xyzt_units": template.xyzt_units,
    }


def write_nifti(
    path,
    data: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    *,
    dtype=None,
    intent_code: int = 0,
    extensions: list[tuple[int, bytes]] | None = None,
    scl_slope: float = 0.0,
    scl_inter: float = 0.0,
    byteorder: str = "<",
    template: NiftiHeader | None = None,
) -> None:
    """Write ``data`` (any supported dtype, up to 7-D) as single-file NIfTI-1.

    ``byteorder`` exists for building test fixtures; the public writers
    always use little-endian.
    """
    arr = np.asarray(data)
    target = np.dtype(dtype) if dtype is not None else arr.dtype
    if target not in DATATYPE_CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {target}")
    if not 1 <= arr.ndim <= 7:
        raise ShapeError(f"NIfTI-1 holds 1 to 7 dimensions, got {arr.ndim}")
    if max(arr.shape) > 32767:
        raise ShapeError(f"dims {arr.shape} overflow the int16 header fields")

    ext_blob = b""
    for code, payload in extensions or []:
        size = 8 + len(payload)
        size += (-size) % 16
        body = payload.ljust(size - 8, b"\x00")
        ext_blob += np.array([size, code], dtype=np.dtype(np.int32).newbyteorder(byteorder)).tobytes() + body
    vox_offset = HEADER_SIZE + 4 + len(ext_blob)

    geo = _geometry_kwargs(template)
    hdr = np.zeros((), dtype=_header_dtype(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = arr.ndim
    dim[1 : arr.ndim + 1] = arr.shape
    hdr["dim"] = dim
    hdr["intent_code"] = intent_code
    hdr["datatype"] = DATATYPE_CODES[target]
    hdr["bitpix"] = target.itemsize * 8
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = vox_offset
    hdr["scl_slope"] = scl_slope
    hdr["scl_inter"] = scl_inter
    hdr["xyzt_units"] = geo.get("xyzt_units", 2)
    hdr["qform_code"] = geo.get("qform_code", 0)
    hdr["sform_code"] = geo.get("sform_code", 0)
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = geo.get("quatern", (0.0, 0.0, 0.0))
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = geo.get("qoffset", (0.0, 0.0, 0.0))
    srow = geo.get("srow")
    if srow is None:
        srow = ((spacing[0], 0, 0, 0), (0, spacing[1], 0, 0), (0, 0, spacing[2], 0))
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = srow
    hdr["magic"] = MAGIC_SINGLE

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(bytes([1 if ext_blob else 0, 0, 0, 0]))
    buf.write(ext_blob)
    body = np.asarray(arr, dtype=target.newbyteorder(byteorder))
    buf.write(body.tobytes(order="F"))
    payload = buf.getvalue()

    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so identical inputs give identical bytes
        with open(path, "wb") as raw_fh, gzip.GzipFile(fileobj=raw_fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


# ---------------------------------------------------------------------------
# typed readers and writers


def _volume_array(hdr: NiftiHeader, data: np.ndarray, path) -> np.ndarray:
    if len(hdr.dims) > 3 and any(d != 1 for d in hdr.dims[3:]):
        raise ShapeError(f"{path}: expected a 3-D volume, got dims {hdr.dims}")
    if len(hdr.dims) < 3:
        raise ShapeError(f"{path}: expected a 3-D volume, got dims {hdr.dims}")
    return data.reshape(hdr.dims[:3], order="F")


def read_volume(path) -> Volume3:
    """Scalar image; ``scl_slope``/``scl_inter`` applied when the slope is non-zero."""
    hdr, data = read_nifti(path)
    arr = _scaled(hdr, _volume_array(hdr, data, path), path)
    return Volume3(arr, hdr.spacing, hdr)


def read_labels(path) -> LabelMap:
    hdr, data = read_nifti(path)
    arr = _scaled(hdr, _volume_array(hdr, data, path), path)
    if arr.dtype.kind == "f":
        if not np.array_equal(arr, np.round(arr)):
            raise NiftiError(f"{path}: label file holds non-integral values")
        arr = arr.astype(np.int32)
    return LabelMap(arr, hdr.spacing, hdr)


def write_volume(vol: Volume3, path) -> None:
    tmpl = vol.header if isinstance(vol.header, NiftiHeader) else None
    write_nifti(path, vol.data, vol.spacing, dtype=np.float32, template=tmpl)


def write_labels(labels: LabelMap, path) -> None:
    top = int(labels.data.max()) if labels.data.size else 0
    if top <= 255:
        dtype = np.uint8
    elif top <= 32767:
        dtype = np.int16
    else:
        raise ValueError(f"label {top} does not fit in int16")
    tmpl = labels.header if isinstance(labels.header, NiftiHeader) else None
    write_nifti(path, labels.data, labels.spacing, dtype=dtype, template=tmpl)


def write_field(field: DisplacementField, path) -> None:
    data = field.data.reshape(field.dims + (1, 3))
    tmpl = field.header if isinstance(field.header, NiftiHeader) else None
    write_nifti(
        path,
        data,
        field.spacing,
        dtype=np.float32,
        intent_code=INTENT_DISPVECT,
        extensions=[(ECODE_COMMENT, FIELD_UNITS_NOTE)],
        template=tmpl,
    )


def read_field(path) -> DisplacementField:
    hdr, data = read_nifti(path)
    if len(hdr.dims) != 5 or hdr.dims[3] != 1 or hdr.dims[4] != 3:
        raise ShapeError(f"{path}: not a displacement field (dims {hdr.dims}, expected (X, Y, Z, 1, 3))")
    arr = _scaled(hdr, data, path).reshape(hdr.dims[:3] + (3,))
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return DisplacementField(arr, hdr.spacing, hdr)


# ---------------------------------------------------------------------------
# landmarks


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def read_landmarks(path) -> LandmarkSet:
    """Comma-separated ``x,y,z`` rows in mm; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in row]
            if not cells or all(c == "" for c in cells):
                continue
            if lineno == 1 and not _is_number(cells[0]):
                continue
            if len(cells) != 3:
                raise LandmarkFormatError(f"{path}: line {lineno}: expected 3 values, got {len(cells)}")
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise LandmarkFormatError(f"{path}: line {lineno}: non-numeric value in {row!r}") from None
            if not all(np.isfinite(vals)):
                raise LandmarkFormatError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append(vals)
    return LandmarkSet(np.asarray(rows, dtype=np.float64).reshape(-1, 3))


def write_landmarks(lms: LandmarkSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in lms.points:
            w.writerow([repr(float(v)) for v in p])
