"""Regular 3D grids: scalar and label volumes, file I/O and interpolation.

Arrays are indexed ``data[x, y, z]``. Whenever voxels are laid out linearly
(files, flat buffers) the order is x fastest, then y, then z, which is
Fortran order for an ``(nx, ny, nz)`` array.

Two on-disk formats are supported:

* a little-endian NIfTI-1 subset (``.nii``): 348-byte header, 4 zero
  extension bytes, voxel data at offset 352. Labels are stored as uint8
  (datatype 2), scalars as float32 (datatype 16). The grid origin goes into
  ``qoffset_x/y/z``; every other unused field is zero.
* raw + sidecar (``.raw``): the bare little-endian payload plus a ``.txt``
  file of ``key: value`` lines (``kind``, ``dims``, ``spacing``, ``origin``,
  ``dtype``).
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    GridMismatchError,
    NonFiniteDataError,
    TruncatedDataError,
    UnsupportedDatatypeError,
    VolumeFormatError,
)

__all__ = [
    "Volume3",
    "LabelVolume",
    "BrainMask",
    "read_volume",
    "write_volume",
    "sample_at",
    "interpolate",
    "voxel_grid",
    "check_same_grid",
    "set_num_threads",
    "get_num_threads",
]

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
DT_UINT8 = 2
DT_FLOAT32 = 16

_RAW_DTYPES = {"uint8": "<u1", "int32": "<i4", "float32": "<f4", "float64": "<f8"}

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Number of worker threads used by the per-voxel interpolation loops.

    Every output voxel depends only on the inputs, so results do not depend
    on the thread count.
    """
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


def _as_triple(values, name):
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 entries, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class Volume3:
    """Dense scalar image on a regular grid.

    ``data`` is held as a read-only float64 array of shape ``(nx, ny, nz)``.
    ``spacing`` is the voxel size in mm and ``origin`` the world position of
    voxel ``(0, 0, 0)``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        _check_grid(arr, self.spacing)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteDataError("volume data contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.dims

    def with_data(self, data) -> "Volume3":
        """Same grid, new voxel values."""
        return Volume3(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense non-negative integer label image.

    Tissue convention: 0 background, 1 grey matter, 2 white matter. ROI
    volumes use arbitrary positive ids.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == "b":
            raw = raw.astype(np.int32)
        elif raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)):
                raise NonFiniteDataError("label data contains NaN or Inf")
            if not np.all(raw == np.round(raw)):
                raise ValueError("label data must be integers")
        elif raw.dtype.kind not in "iu":
            raise ValueError(f"unsupported label dtype {raw.dtype}")
        arr = np.array(raw, dtype=np.int32, copy=True)
        _check_grid(arr, self.spacing)
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.dims

    def with_data(self, data) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.origin)

    def mask(self, label: int) -> np.ndarray:
        """Boolean indicator of ``label``."""
        return self.data == label

    def labels(self) -> list:
        return [int(v) for v in np.unique(self.data)]


class BrainMask(LabelVolume):
    """A {0, 1} label volume marking the support used for patch sampling."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.size and self.data.max() > 1:
            raise ValueError("brain mask must contain only 0 and 1")

    @classmethod
    def from_array(cls, mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return cls(np.asarray(mask).astype(np.int32), spacing, origin)

    @property
    def count(self) -> int:
        return int(self.data.sum())


def _check_grid(arr: np.ndarray, spacing) -> None:
    if arr.ndim != 3:
        raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all dims must be >= 1, got {arr.shape}")
    sp = _as_triple(spacing, "spacing")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be positive, got {sp}")


def check_same_grid(a, b) -> None:
    """Raise :class:`GridMismatchError` unless ``a`` and ``b`` share dims and spacing."""
    if tuple(a.dims) != tuple(b.dims):
        raise GridMismatchError(f"grid dims differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise GridMismatchError(f"grid spacing differs: {a.spacing} vs {b.spacing}")


def voxel_grid(dims) -> np.ndarray:
    """Integer voxel coordinates as a float array of shape ``dims + (3,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# ---------------------------------------------------------------------------
# interpolation

def _interp_chunk(flat, dims, pts, order, zero_fill):
    nx, ny, nz = dims
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    if order == 0:
        ix = np.floor(x + 0.5).astype(np.intp)
        iy = np.floor(y + 0.5).astype(np.intp)
        iz = np.floor(z + 0.5).astype(np.intp)
        if zero_fill:
            inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        np.clip(ix, 0, nx - 1, out=ix)
        np.clip(iy, 0, ny - 1, out=iy)
        np.clip(iz, 0, nz - 1, out=iz)
        out = flat[(ix * ny + iy) * nz + iz]
        if zero_fill:
            out[~inside] = 0
        return out

    def corners(c, n):
        c = np.clip(c, 0.0, n - 1.0)
        i0 = np.floor(c).astype(np.intp)
        np.minimum(i0, max(n - 2, 0), out=i0)
        t = c - i0
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, t

    x0, x1, tx = corners(x, nx)
    y0, y1, ty = corners(y, ny)
    z0, z1, tz = corners(z, nz)
    if flat.ndim == 2:
        tx, ty, tz = tx[:, None], ty[:, None], tz[:, None]
    sx0, sx1 = x0 * ny, x1 * ny
    r00 = (sx0 + y0) * nz
    r01 = (sx0 + y1) * nz
    r10 = (sx1 + y0) * nz
    r11 = (sx1 + y1) * nz
    c00 = flat[r00 + z0] * (1.0 - tz) + flat[r00 + z1] * tz
    c01 = flat[r01 + z0] * (1.0 - tz) + flat[r01 + z1] * tz
    c10 = flat[r10 + z0] * (1.0 - tz) + flat[r10 + z1] * tz
    c11 = flat[r11 + z0] * (1.0 - tz) + flat[r11 + z1] * tz
    c0 = c00 * (1.0 - ty) + c01 * ty
    c1 = c10 * (1.0 - ty) + c11 * ty
    return c0 * (1.0 - tx) + c1 * tx


def interpolate(data: np.ndarray, coords: np.ndarray, order: int = 1,
                zero_fill: bool = False) -> np.ndarray:
    """Sample ``data`` at continuous voxel coordinates.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz) or (nx, ny, nz, C)
        Grid values; trailing channels are interpolated together.
    coords : ndarray, shape (..., 3)
        Continuous voxel coordinates.
    order : {0, 1}
        0 for nearest neighbour (ties round up), 1 for trilinear.
    zero_fill : bool
        Treat everything outside the grid as 0 instead of clamping to the
        nearest edge voxel.

    Returns
    -------
    ndarray of shape ``coords.shape[:-1]`` (plus the channel axis if any).
    """
    data = np.asarray(data)
    coords = np.asarray(coords, dtype=np.float64)
    dims = data.shape[:3]
    extra = data.shape[3:]
    if order == 1 and zero_fill:
        pad = [(1, 1)] * 3 + [(0, 0)] * len(extra)
        data = np.pad(data, pad)
        coords = coords + 1.0
        dims = data.shape[:3]
        zero_fill = False
    flat = data.reshape((-1,) + extra)
    if order == 1 and flat.dtype.kind != "f":
        flat = flat.astype(np.float64)
    pts = coords.reshape(-1, 3)
    n = pts.shape[0]
    threads = _num_threads
    if threads > 1 and n >= 4096:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda ab: _interp_chunk(flat, dims, pts[ab[0]:ab[1]], order, zero_fill),
                zip(bounds[:-1], bounds[1:])))
        out = np.concatenate(parts, axis=0)
    else:
        out = _interp_chunk(flat, dims, pts, order, zero_fill)
    return out.reshape(coords.shape[:-1] + extra)


def sample_at(vol: Volume3, p) -> float:
    """Trilinear value of ``vol`` at continuous voxel coordinate ``p``.

    Coordinates outside the grid are clamped to it first, so the call is
    defined everywhere and returns stored values exactly at integer
    coordinates.
    """
    pts = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return float(interpolate(vol.data, pts, order=1)[0])


# ---------------------------------------------------------------------------
# file I/O

def _nifti_header(dims, spacing, origin, datatype, bitpix) -> bytes:
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 0.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<3f", hdr, 268, *origin)
    hdr[344:348] = NIFTI_MAGIC
    return bytes(hdr)


def _write_nifti(vol, path: Path) -> None:
    if isinstance(vol, LabelVolume):
        if vol.data.max(initial=0) > 255:
            raise ValueError("NIfTI label files store uint8; labels above 255 need the raw format")
        payload = vol.data.astype("<u1").ravel(order="F").tobytes()
        hdr = _nifti_header(vol.dims, vol.spacing, vol.origin, DT_UINT8, 8)
    else:
        payload = vol.data.astype("<f4").ravel(order="F").tobytes()
        hdr = _nifti_header(vol.dims, vol.spacing, vol.origin, DT_FLOAT32, 32)
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00\x00\x00\x00")
        fh.write(payload)


def _read_nifti(path: Path):
    blob = Path(path).read_bytes()
    if len(blob) < NIFTI_VOX_OFFSET:
        raise TruncatedDataError(f"{path}: file shorter than the {NIFTI_VOX_OFFSET}-byte header")
    if blob[344:348] != NIFTI_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[344:348]!r}, expected {NIFTI_MAGIC!r}")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: sizeof_hdr={sizeof_hdr} (only little-endian 348 supported)")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3 or min(dim[1:4]) < 1:
        raise VolumeFormatError(f"{path}: expected a 3D volume, dim={dim}")
    datatype, bitpix = struct.unpack_from("<2h", blob, 70)
    if datatype == DT_UINT8:
        dtype, want_bits = "<u1", 8
    elif datatype == DT_FLOAT32:
        dtype, want_bits = "<f4", 32
    else:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} not supported")
    if bitpix != want_bits:
        raise VolumeFormatError(f"{path}: bitpix {bitpix} does not match datatype {datatype}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    slope, inter = struct.unpack_from("<2f", blob, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise VolumeFormatError(f"{path}: intensity scaling (slope={slope}, inter={inter}) not supported")
    if int(vox_offset) != NIFTI_VOX_OFFSET:
        raise VolumeFormatError(f"{path}: vox_offset {vox_offset} != {NIFTI_VOX_OFFSET}")
    origin = struct.unpack_from("<3f", blob, 268)
    dims = tuple(int(d) for d in dim[1:4])
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * want_bits // 8
    if len(blob) < NIFTI_VOX_OFFSET + nbytes:
        raise TruncatedDataError(
            f"{path}: expected {nbytes} data bytes, found {len(blob) - NIFTI_VOX_OFFSET}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=NIFTI_VOX_OFFSET)
    arr = arr.reshape(dims, order="F")
    spacing = tuple(float(s) for s in pixdim[1:4])
    if datatype == DT_UINT8:
        return LabelVolume(arr, spacing, origin)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteDataError(f"{path}: voxel data contains NaN or Inf")
    return Volume3(arr, spacing, origin)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".txt")


def _write_raw(vol, path: Path, dtype: str | None) -> None:
    if isinstance(vol, LabelVolume):
        dtype = dtype or ("uint8" if vol.data.max(initial=0) <= 255 else "int32")
        kind = "label"
    else:
        dtype = dtype or "float32"
        kind = "scalar"
    if dtype not in _RAW_DTYPES:
        raise UnsupportedDatatypeError(f"raw dtype {dtype!r} not supported")
    payload = vol.data.astype(_RAW_DTYPES[dtype]).ravel(order="F").tobytes()
    lines = [
        f"kind: {kind}",
        "dims: " + " ".join(str(d) for d in vol.dims),
        "spacing: " + " ".join(repr(s) for s in vol.spacing),
        "origin: " + " ".join(repr(o) for o in vol.origin),
        f"dtype: {dtype}",
    ]
    path.write_bytes(payload)
    _sidecar_path(path).write_text("\n".join(lines) + "\n")


def _read_raw(path: Path):
    side = _sidecar_path(path)
    if not side.exists():
        raise VolumeFormatError(f"{path}: missing sidecar {side.name}")
    meta = {}
    for line in side.read_text().splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    try:
        dims = tuple(int(v) for v in meta["dims"].split())
        spacing = tuple(float(v) for v in meta["spacing"].split())
        origin = tuple(float(v) for v in meta.get("origin", "0 0 0").split())
        dtype = meta["dtype"]
        kind = meta.get("kind", "scalar")
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{side}: malformed sidecar ({exc})") from exc
    if dtype not in _RAW_DTYPES:
        raise UnsupportedDatatypeError(f"{side}: dtype {dtype!r} not supported")
    blob = path.read_bytes()
    count = int(np.prod(dims))
    need = count * np.dtype(_RAW_DTYPES[dtype]).itemsize
    if len(blob) < need:
        raise TruncatedDataError(f"{path}: expected {need} bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype=_RAW_DTYPES[dtype], count=count).reshape(dims, order="F")
    if kind == "label":
        return LabelVolume(arr, spacing, origin)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteDataError(f"{path}: voxel data contains NaN or Inf")
    return Volume3(arr, spacing, origin)


def write_volume(vol, path, dtype: str | None = None) -> None:
    """Write a :class:`Volume3` or :class:`LabelVolume`.

    The format follows the extension: ``.nii`` for the NIfTI subset,
    ``.raw`` for raw + sidecar (``dtype`` selects the payload type there).
    Output bytes depend only on the volume.
    """
    path = Path(path)
    if path.suffix == ".raw":
        _write_raw(vol, path, dtype)
    else:
        _write_nifti(vol, path)


def read_volume(path):
    """Read a volume written by :func:`write_volume`.

    uint8 NIfTI files and raw files of kind ``label`` come back as
    :class:`LabelVolume`, everything else as :class:`Volume3`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".txt" and path.with_suffix(".raw").exists():
        path = path.with_suffix(".raw")
    if path.suffix == ".raw":
        return _read_raw(path)
    return _read_nifti(path)
