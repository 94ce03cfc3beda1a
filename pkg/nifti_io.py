import gzip
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from constants import (
    NIFTI_BITPIX,
    NIFTI_DATATYPES,
    NIFTI_HEADER_SIZE,
    NIFTI_INTENT_LABEL,
    NIFTI_MAGIC_SINGLE,
    NIFTI_VOX_OFFSET,
    NIFTI_XYZT_MM,
)
from errors import NiftiFormatError
from models import Geometry, IntensitySpace, LabelVolume, Volume

logger = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"
DESCRIP_PREFIX = "intensity_space="

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),  # 0
    ("data_type", "S10"),  # 4
    ("db_name", "S18"),  # 14
    ("extents", "i4"),  # 32
    ("session_error", "i2"),  # 36
    ("regular", "S1"),  # 38
    ("dim_info", "u1"),  # 39
    ("dim", "i2", (8,)),  # 40
    ("intent_p1", "f4"),  # 56
    ("intent_p2", "f4"),  # 60
    ("intent_p3", "f4"),  # 64
    ("intent_code", "i2"),  # 68
    ("datatype", "i2"),  # 70
    ("bitpix", "i2"),  # 72
    ("slice_start", "i2"),  # 74
    ("pixdim", "f4", (8,)),  # 76
    ("vox_offset", "f4"),  # 108
    ("scl_slope", "f4"),  # 112
    ("scl_inter", "f4"),  # 116
    ("slice_end", "i2"),  # 120
    ("slice_code", "u1"),  # 122
    ("xyzt_units", "u1"),  # 123
    ("cal_max", "f4"),  # 124
    ("cal_min", "f4"),  # 128
    ("slice_duration", "f4"),  # 132
    ("toffset", "f4"),  # 136
    ("glmax", "i4"),  # 140
    ("glmin", "i4"),  # 144
    ("descrip", "S80"),  # 148
    ("aux_file", "S24"),  # 228
    ("qform_code", "i2"),  # 252
    ("sform_code", "i2"),  # 254
    ("quatern_b", "f4"),  # 256
    ("quatern_c", "f4"),  # 260
    ("quatern_d", "f4"),  # 264
    ("qoffset_x", "f4"),  # 268
    ("qoffset_y", "f4"),  # 272
    ("qoffset_z", "f4"),  # 276
    ("srow_x", "f4", (4,)),  # 280
    ("srow_y", "f4", (4,)),  # 296
    ("srow_z", "f4", (4,)),  # 312
    ("intent_name", "S16"),  # 328
    ("magic", "S4"),  # 344
]
HEADER_DTYPE = np.dtype(HEADER_FIELDS).newbyteorder("<")
OFFSETS = {name: HEADER_DTYPE.fields[name][1] for name in HEADER_DTYPE.names}


@dataclass
class NiftiHeader:
    dims: Tuple[int, ...]
    pixdim: Tuple[float, ...]
    datatype_code: int
    affine: np.ndarray
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    magic: bytes = NIFTI_MAGIC_SINGLE
    qform_code: int = 1
    sform_code: int = 1
    intent_code: int = 0
    descrip: str = ""
    vox_offset: int = NIFTI_VOX_OFFSET
    endianness: str = "<"
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(NIFTI_DATATYPES[self.datatype_code])


def _quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    bcd = np.array([b, c, d], dtype=np.float64)
    w2 = 1.0 - float(bcd @ bcd)
    # float32 storage can push w² slightly negative
    a = np.sqrt(w2) if w2 > 0 else 0.0
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def _matrix_to_quaternion(rotation: np.ndarray) -> Tuple[float, float, float, float]:
    """Returns (b, c, d, qfac) for a direction-cosine matrix, flipping the third column if improper."""
    rotation = np.array(rotation, dtype=np.float64)
    qfac = 1.0
    if np.linalg.det(rotation) < 0:
        rotation[:, 2] *= -1
        qfac = -1.0
    trace = np.trace(rotation)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (rotation[2, 1] - rotation[1, 2]) * s
        c = (rotation[0, 2] - rotation[2, 0]) * s
        d = (rotation[1, 0] - rotation[0, 1]) * s
    elif rotation[0, 0] > rotation[1, 1] and rotation[0, 0] > rotation[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rotation[0, 0] - rotation[1, 1] - rotation[2, 2])
        a = (rotation[2, 1] - rotation[1, 2]) / s
        b = 0.25 * s
        c = (rotation[0, 1] + rotation[1, 0]) / s
        d = (rotation[0, 2] + rotation[2, 0]) / s
    elif rotation[1, 1] > rotation[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rotation[1, 1] - rotation[0, 0] - rotation[2, 2])
        a = (rotation[0, 2] - rotation[2, 0]) / s
        b = (rotation[0, 1] + rotation[1, 0]) / s
        c = 0.25 * s
        d = (rotation[1, 2] + rotation[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + rotation[2, 2] - rotation[0, 0] - rotation[1, 1])
        a = (rotation[1, 0] - rotation[0, 1]) / s
        b = (rotation[0, 2] + rotation[2, 0]) / s
        c = (rotation[1, 2] + rotation[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


def _header_affine(hdr: np.ndarray) -> np.ndarray:
    affine = np.eye(4)
    if hdr["sform_code"] > 0:
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        pixdim = hdr["pixdim"].astype(np.float64)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rotation = _quaternion_to_matrix(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
        )
        scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        affine[:3, :3] = rotation * scale
        affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    else:
        affine[:3, :3] = np.diag(hdr["pixdim"][1:4].astype(np.float64))
    return affine


def _parse_header(raw: bytes, path: Path) -> Tuple[np.ndarray, str]:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: header truncated at offset {len(raw)} (needs {NIFTI_HEADER_SIZE} bytes)",
            "truncated-payload",
        )
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:NIFTI_HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if 1 <= hdr["dim"][0] <= 7:
            break
    else:
        raise NiftiFormatError(
            f"{path}: dim[0] at offset {OFFSETS['dim']} is not in [1, 7] in either byte order",
            "bad-header",
        )
    if hdr["sizeof_hdr"] != NIFTI_HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: sizeof_hdr at offset 0 is {hdr['sizeof_hdr']}, expected {NIFTI_HEADER_SIZE}",
            "bad-header",
        )
    if bytes(hdr["magic"]).ljust(4, b"\x00") != NIFTI_MAGIC_SINGLE:
        raise NiftiFormatError(
            f"{path}: magic at offset {OFFSETS['magic']} is {bytes(hdr['magic'])!r}, expected {NIFTI_MAGIC_SINGLE!r}",
            "bad-magic",
        )
    if int(hdr["datatype"]) not in NIFTI_DATATYPES:
        raise NiftiFormatError(
            f"{path}: datatype {int(hdr['datatype'])} at offset {OFFSETS['datatype']} is not one of "
            f"{sorted(NIFTI_DATATYPES.values())}",
            "unsupported-datatype",
        )
    return hdr, order


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as handle:
        raw = handle.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def read_nifti(
    path: Union[str, Path],
    kind: Optional[str] = None,
    intensity_space: Optional[IntensitySpace] = None,
) -> Tuple[NiftiHeader, Union[Volume, LabelVolume]]:
    """
    Read a NIfTI-1 file into a Volume or LabelVolume.

    `kind` forces "scalar" or "label"; by default label volumes are recognised
    by the NIFTI_INTENT_LABEL intent code. Labels are never intensity-scaled.
    """
    path = Path(path)
    raw = _read_bytes(path)
    hdr, order = _parse_header(raw, path)

    ndim = int(hdr["dim"][0])
    dims = tuple(int(n) for n in hdr["dim"][1 : ndim + 1])
    if any(n < 1 for n in dims):
        raise NiftiFormatError(f"{path}: dim at offset {OFFSETS['dim']} has a non-positive entry {dims}", "bad-header")
    if any(n != 1 for n in dims[3:]):
        raise NiftiFormatError(f"{path}: only 3D volumes are supported, got dims {dims}", "unsupported-dims")
    shape = (dims + (1, 1, 1))[:3]

    vox_offset = int(hdr["vox_offset"])
    if vox_offset < NIFTI_VOX_OFFSET:
        raise NiftiFormatError(
            f"{path}: vox_offset at offset {OFFSETS['vox_offset']} is {vox_offset}, must be >= {NIFTI_VOX_OFFSET}",
            "bad-header",
        )
    datatype_code = int(hdr["datatype"])
    dtype = np.dtype(NIFTI_DATATYPES[datatype_code]).newbyteorder(order)
    count = int(np.prod(shape))
    needed = count * dtype.itemsize
    if len(raw) < vox_offset + needed:
        raise NiftiFormatError(
            f"{path}: payload truncated at offset {len(raw)}; expected {needed} bytes from offset {vox_offset}",
            "truncated-payload",
        )
    payload = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    payload = payload.astype(dtype.newbyteorder("="), copy=True).reshape(shape, order="F")

    descrip = bytes(hdr["descrip"]).rstrip(b"\x00").decode("ascii", errors="replace")
    header = NiftiHeader(
        dims=dims,
        pixdim=tuple(float(p) for p in hdr["pixdim"][1 : ndim + 1]),
        datatype_code=datatype_code,
        affine=_header_affine(hdr),
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        magic=bytes(hdr["magic"]).ljust(4, b"\x00"),
        qform_code=int(hdr["qform_code"]),
        sform_code=int(hdr["sform_code"]),
        intent_code=int(hdr["intent_code"]),
        descrip=descrip,
        vox_offset=vox_offset,
        endianness=order,
    )

    geometry = Geometry.from_affine(shape, header.affine)
    is_label = kind == "label" or (kind is None and header.intent_code == NIFTI_INTENT_LABEL)
    if is_label:
        logger.debug(f"Read label volume {path} with shape {shape}")
        return header, LabelVolume.on_grid(payload, geometry)

    slope = header.scl_slope if np.isfinite(header.scl_slope) and header.scl_slope != 0 else 1.0
    inter = header.scl_inter if np.isfinite(header.scl_inter) else 0.0
    if slope != 1.0 or inter != 0.0:
        payload = payload.astype(np.float64) * slope + inter
    if intensity_space is None:
        intensity_space = IntensitySpace.MR_RAW
        if descrip.startswith(DESCRIP_PREFIX):
            try:
                intensity_space = IntensitySpace(descrip[len(DESCRIP_PREFIX) :])
            except ValueError:
                logger.warning(f"{path}: unknown intensity space in descrip '{descrip}', using MR-raw")
    logger.debug(f"Read {intensity_space.value} volume {path} with shape {shape}")
    return header, Volume.on_grid(payload, geometry, intensity_space)


def header_for(volume: Union[Volume, LabelVolume], datatype: Optional[str] = None) -> NiftiHeader:
    """Header describing `volume`'s grid; float32 for scalars and int16 for labels unless told otherwise."""
    is_label = isinstance(volume, LabelVolume)
    datatype = datatype or ("int16" if is_label else "float32")
    codes = {name: code for code, name in NIFTI_DATATYPES.items()}
    if datatype not in codes:
        raise NiftiFormatError(f"Unsupported datatype '{datatype}'", "unsupported-datatype")
    descrip = "" if is_label else f"{DESCRIP_PREFIX}{volume.intensity_space.value}"
    return NiftiHeader(
        dims=tuple(volume.shape),
        pixdim=tuple(float(s) for s in volume.spacing),
        datatype_code=codes[datatype],
        affine=volume.affine,
        intent_code=NIFTI_INTENT_LABEL if is_label else 0,
        descrip=descrip,
    )


def _encode_payload(header: NiftiHeader, volume: Union[Volume, LabelVolume]) -> np.ndarray:
    dtype = header.dtype
    data = volume.data
    if isinstance(volume, Volume) and (header.scl_slope not in (0.0, 1.0) or header.scl_inter != 0.0):
        slope = header.scl_slope or 1.0
        data = (data.astype(np.float64) - header.scl_inter) / slope
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise NiftiFormatError(
                f"Values [{data.min()}, {data.max()}] do not fit datatype {dtype.name}", "value-out-of-range"
            )
        if not np.issubdtype(data.dtype, np.integer):
            data = np.rint(data)
    return np.ascontiguousarray(data.astype(dtype.newbyteorder("<")).ravel(order="F"))


def _encode_header(header: NiftiHeader, shape) -> bytes:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = NIFTI_HEADER_SIZE
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = shape
    hdr["dim"] = dim
    hdr["datatype"] = header.datatype_code
    hdr["bitpix"] = NIFTI_BITPIX[header.datatype_code]
    affine = np.asarray(header.affine, dtype=np.float64)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    b, c, d, qfac = _matrix_to_quaternion(affine[:3, :3] / spacing)
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = qfac
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = NIFTI_VOX_OFFSET
    hdr["scl_slope"] = header.scl_slope
    hdr["scl_inter"] = header.scl_inter
    hdr["xyzt_units"] = NIFTI_XYZT_MM
    hdr["descrip"] = header.descrip.encode("ascii")[:80]
    hdr["intent_code"] = header.intent_code
    if header.intent_code == NIFTI_INTENT_LABEL:
        hdr["intent_name"] = b"labels"
    hdr["qform_code"] = header.qform_code
    hdr["sform_code"] = header.sform_code
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = affine[:3, 3]
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = NIFTI_MAGIC_SINGLE
    return hdr.tobytes() + b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE)


def write_nifti(header: NiftiHeader, volume: Union[Volume, LabelVolume], path: Union[str, Path]) -> None:
    """
    Write `volume` with `header` to `path`; a ".gz" suffix selects gzip.

    The file is written to a temporary sibling and renamed into place, so a
    failed write never leaves a partial volume behind.
    """
    path = Path(path)
    if tuple(header.dims[:3]) != tuple(volume.shape):
        raise NiftiFormatError(
            f"Header dims {tuple(header.dims)} do not match volume shape {tuple(volume.shape)}",
            "dim-mismatch",
        )
    blob = _encode_header(header, volume.shape) + _encode_payload(header, volume).tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            if path.suffix == ".gz":
                # fixed mtime keeps compressed output byte-identical across runs
                with gzip.GzipFile(filename="", mode="wb", fileobj=handle, mtime=0) as zipped:
                    zipped.write(blob)
            else:
                handle.write(blob)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except OSError as e:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise NiftiFormatError(f"Failed to write {path}: {e}", "io-failure") from e
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {path} ({header.dtype.name}, shape {tuple(volume.shape)})")


def save_volume(volume: Union[Volume, LabelVolume], path: Union[str, Path], datatype: Optional[str] = None) -> None:
    write_nifti(header_for(volume, datatype), volume, path)


def load_volume(path: Union[str, Path], kind: Optional[str] = None) -> Union[Volume, LabelVolume]:
    return read_nifti(path, kind=kind)[1]
