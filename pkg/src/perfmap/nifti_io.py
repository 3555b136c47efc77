"""Volume containers and gzip NIfTI-1 reading/writing.

Only the single-file ``.nii.gz`` variant is handled. Voxel arrays are kept
in numpy index order ``[x, y, z(, t)]``, which matches the on-disk layout
(x fastest) when read with Fortran ordering.
"""
from __future__ import annotations

import enum
import gzip
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagic,
    IoFailure,
    MissingTimeSpacing,
    NonFinite,
    SingularAffine,
    TruncatedStream,
    UnsupportedDatatype,
    UnsupportedFormat,
)

HEADER_SIZE = 348

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


def header_dtype(endian: str = "<") -> np.dtype:
    fields = []
    for spec in _HEADER_FIELDS:
        name, code = spec[0], spec[1]
        if code[0] in "iuf":
            code = endian + code
        fields.append((name, code) + tuple(spec[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


# NIfTI datatype code -> numpy type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}

_TIME_UNIT_SCALE = {0: 1.0, 8: 1.0, 16: 1e-3, 24: 1e-6}


class Modality(str, enum.Enum):
    CTP = "CTP"
    MRP = "MRP"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        return cls(str(value).upper())


def _check_affine(affine) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.allclose(affine[3], [0, 0, 0, 1]):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    return affine


@dataclass(frozen=True)
class Volume3D:
    """A scalar field on a voxel grid with its voxel-to-world mapping (mm)."""

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D needs 3D data, got shape {self.data.shape}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", _check_affine(self.affine))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def with_data(self, data) -> "Volume3D":
        return replace(self, data=data)


@dataclass(frozen=True)
class Mask3D(Volume3D):
    """Boolean voxel selection sharing a Volume3D geometry."""

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=bool))
        super().__post_init__()

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def like(cls, vol, data) -> "Mask3D":
        return cls(np.asarray(data, dtype=bool), vol.spacing, vol.affine)


@dataclass(frozen=True)
class Volume4D:
    """Time series of 3D frames sharing one geometry.

    ``data`` has shape ``(nx, ny, nz, nt)``; ``dt`` is the frame interval in
    seconds. ``echo_time`` (seconds) is only meaningful for MR perfusion.
    """

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray = field(repr=False)
    dt: float = 1.0
    modality: Modality = Modality.CTP
    echo_time: float | None = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"Volume4D needs 4D data, got shape {self.data.shape}")
        if self.data.shape[3] < 1:
            raise ValueError("Volume4D needs at least one frame")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", _check_affine(self.affine))
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.echo_time is not None and not self.echo_time > 0:
            raise ValueError(f"echo_time must be positive, got {self.echo_time}")

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def n_frames(self) -> int:
        return self.data.shape[3]

    def frame(self, i: int) -> Volume3D:
        return Volume3D(self.data[..., i], self.spacing, self.affine)

    @property
    def frames(self) -> list:
        return [self.frame(i) for i in range(self.n_frames)]

    def with_data(self, data, **changes) -> "Volume4D":
        return replace(self, data=data, **changes)

    def geometry(self, data=None) -> Volume3D:
        """A Volume3D with this volume's spatial geometry."""
        if data is None:
            data = np.zeros(self.dims)
        return Volume3D(data, self.spacing, self.affine)


# ---------------------------------------------------------------- reading


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pix = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pix[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot * np.array([pix[1], pix[2], qfac * pix[3]])
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def header_affine(hdr) -> np.ndarray:
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag(list(np.abs(hdr["pixdim"][1:4]).astype(np.float64)) + [1.0])


def _parse_header(raw: bytes):
    if len(raw) < HEADER_SIZE:
        raise TruncatedStream(f"stream holds {len(raw)} bytes, header needs {HEADER_SIZE}")
    size_le = int.from_bytes(raw[:4], "little")
    size_be = int.from_bytes(raw[:4], "big")
    if size_le == HEADER_SIZE:
        endian = "<"
    elif size_be == HEADER_SIZE:
        endian = ">"
    elif 540 in (size_le, size_be):
        raise UnsupportedFormat("NIfTI-2 files are not supported")
    else:
        raise BadMagic(f"sizeof_hdr is {size_le}, expected {HEADER_SIZE}")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(endian))[0]
    magic = bytes(hdr["magic"]).ljust(4, b"\0")
    if magic == b"ni1\0":
        raise UnsupportedFormat("separate .hdr/.img pairs are not supported")
    if magic != b"n+1\0":
        raise BadMagic(f"magic is {magic!r}, expected b'n+1\\x00'")
    return hdr, endian


def _read_payload(path) -> bytes:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    if head != b"\x1f\x8b":
        raise UnsupportedFormat(f"{path} is not gzip-compressed (.nii.gz expected)")
    try:
        with gzip.open(path, "rb") as fh:
            return fh.read()
    except (EOFError, zlib.error) as exc:
        raise TruncatedStream(f"{path}: {exc}") from exc
    except gzip.BadGzipFile as exc:
        raise BadMagic(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _load(path):
    raw = _read_payload(path)
    hdr, endian = _parse_header(raw)
    ndim = int(hdr["dim"][0])
    if ndim not in (3, 4):
        raise UnsupportedFormat(f"dim[0] = {ndim}; only 3D and 4D volumes are supported")
    shape = tuple(int(n) for n in hdr["dim"][1 : ndim + 1])
    if min(shape) < 1:
        raise UnsupportedFormat(f"invalid dimensions {shape}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    dtype = np.dtype(DATATYPES[code]).newbyteorder(endian)
    offset = int(hdr["vox_offset"])
    offset = max(offset, HEADER_SIZE)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedStream(f"{path}: payload has {len(raw) - offset} bytes, needs {nbytes}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data * slope + inter
    if not np.isfinite(data).all():
        raise NonFinite(f"{path} contains non-finite voxel values")
    affine = header_affine(hdr)
    spacing = np.abs(hdr["pixdim"][1:4]).astype(np.float64)
    col_norms = np.linalg.norm(affine[:3, :3], axis=0)
    spacing = np.where(spacing > 0, spacing, col_norms)
    if min(spacing) <= 0:
        raise SingularAffine(f"{path}: cannot determine voxel spacing")
    return hdr, data, affine, tuple(spacing)


def read_nifti(path, modality=Modality.CTP, echo_time=None, dt=None) -> Volume4D:
    """Read a ``.nii.gz`` file as a Volume4D.

    A 3D file yields a single-frame volume. The frame interval comes from
    ``pixdim[4]`` (converted to seconds); when the header stores no time
    spacing, ``dt`` must be supplied for 4D files.
    """
    hdr, data, affine, spacing = _load(path)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    units = int(hdr["xyzt_units"]) & 0x18
    header_dt = float(hdr["pixdim"][4]) * _TIME_UNIT_SCALE[units]
    if header_dt > 0:
        frame_dt = header_dt
    elif dt is not None:
        frame_dt = float(dt)
    elif data.shape[3] > 1:
        raise MissingTimeSpacing(f"{path}: pixdim[4] is 0 and no dt was supplied")
    else:
        frame_dt = 1.0
    return Volume4D(data, spacing, affine, frame_dt, Modality.parse(modality), echo_time)


def read_volume3d(path) -> Volume3D:
    """Read a 3D ``.nii.gz`` (or a 4D file with one frame) as a Volume3D."""
    _, data, affine, spacing = _load(path)
    if data.ndim == 4:
        if data.shape[3] != 1:
            raise UnsupportedFormat(f"{path} has {data.shape[3]} frames, expected a 3D volume")
        data = data[..., 0]
    return Volume3D(data, spacing, affine)


# ---------------------------------------------------------------- writing


def _build_header(shape, spacing, affine, dt) -> np.ndarray:
    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(shape)
    dim[1 : len(shape) + 1] = shape
    hdr["dim"] = dim
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = spacing
    pixdim[4] = dt if dt is not None else 0.0
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = HEADER_SIZE + 4
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, s
    hdr["sform_code"] = 1
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1\0"
    return hdr


def write_nifti(vol, path) -> None:
    """Write a Volume3D/Mask3D/Volume4D as gzip NIfTI-1 with a float32 payload.

    Output is byte-for-byte deterministic (gzip mtime is zeroed).
    """
    data = np.asarray(vol.data)
    dt = getattr(vol, "dt", None)
    if data.ndim == 4 and data.shape[3] == 1 and dt is None:
        data = data[..., 0]
    if not np.isfinite(data).all():
        raise NonFinite("refusing to write non-finite voxel values")
    hdr = _build_header(data.shape, vol.spacing, vol.affine, dt)
    payload = data.astype("<f4").tobytes(order="F")
    try:
        with open(os.fspath(path), "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=6) as fh:
                fh.write(hdr.tobytes())
                fh.write(b"\0\0\0\0")
                fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- orientation


def axis_codes(affine) -> list:
    """For each voxel axis, the (world_axis, sign) it most closely follows.

    Columns are matched to world axes greedily by largest absolute direction
    cosine, so oblique affines map to the nearest axis permutation.
    """
    affine = np.asarray(affine, dtype=np.float64)
    rot = affine[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-12 * max(np.abs(rot).max(), 1e-300) ** 3:
        raise SingularAffine("affine 3x3 part is singular")
    cosines = rot / np.linalg.norm(rot, axis=0)
    work = np.abs(cosines)
    codes = [None, None, None]
    for _ in range(3):
        w, j = np.unravel_index(np.argmax(work), work.shape)
        codes[j] = (int(w), 1 if cosines[w, j] > 0 else -1)
        work[w, :] = -1.0
        work[:, j] = -1.0
    return codes


def reorient_ras(vol: Volume4D) -> Volume4D:
    """Permute/flip voxel axes so that they run toward +R, +A, +S.

    World coordinates of every voxel are preserved and no resampling takes
    place; residual obliquity stays in the affine.
    """
    codes = axis_codes(vol.affine)
    if all(w == j and s > 0 for j, (w, s) in enumerate(codes)):
        return vol
    data = vol.data
    affine = vol.affine.copy()
    for j, (_, sign) in enumerate(codes):
        if sign < 0:
            n = data.shape[j]
            data = np.flip(data, axis=j)
            affine[:3, 3] += affine[:3, j] * (n - 1)
            affine[:3, j] = -affine[:3, j]
    order = [None, None, None]
    for j, (w, _) in enumerate(codes):
        order[w] = j
    perm = order + list(range(3, data.ndim))
    data = np.ascontiguousarray(np.transpose(data, perm))
    new_affine = np.eye(4)
    new_affine[:3, 3] = affine[:3, 3]
    new_affine[:3, :3] = affine[:3, order]
    spacing = tuple(vol.spacing[j] for j in order)
    return replace(vol, data=data, affine=new_affine, spacing=spacing)


def voxel_to_world(affine, ijk) -> np.ndarray:
    ijk = np.atleast_2d(np.asarray(ijk, dtype=np.float64))
    return ijk @ affine[:3, :3].T + affine[:3, 3]
