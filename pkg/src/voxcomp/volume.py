"""4-D volume I/O, masking, and mean-frame handling.

Two on-disk formats are supported:

* ``rawbin`` — a 32-byte self-describing header (magic ``VOL4``) followed by
  an x-fastest contiguous payload.  Trivially hand-writable, used for all
  interchange in this package.
* ``nifti1`` — a minimal read-only subset of the NIfTI-1 single-file layout
  (348-byte header, int16/float32/float64, uncompressed), enough to ingest
  scanner exports without pulling in a neuroimaging stack.

All volumes are held in memory as float32 regardless of the stored dtype;
the source dtype is kept so compression ratios can be accounted against the
original stored bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    DimensionMismatch,
    EmptyMask,
    UnsupportedDatatype,
)

RAWBIN_MAGIC = b"VOL4"
RAWBIN_VERSION = 1
RAWBIN_HEADER_SIZE = 32

# dtype codes used in the rawbin header
_RAWBIN_DTYPES = {1: np.int16, 2: np.float32, 3: np.float64, 4: np.int32}
_RAWBIN_CODES = {np.dtype(v).name: k for k, v in _RAWBIN_DTYPES.items()}

# NIfTI-1 datatype codes we accept
_NIFTI_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}


@dataclass
class Volume4D:
    """Dense W×H×D×T scalar field, axes (x, y, z, t), float32 in memory.

    ``voxel_scale`` is the (offset, gain) pair relating stored raw values to
    the loaded floats (loaded = raw * gain + offset); ``source_dtype`` is the
    numpy dtype name of the stored payload, used for ratio accounting.
    """

    data: np.ndarray
    voxel_scale: tuple[float, float] = (0.0, 1.0)
    source_dtype: str = "float32"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DimensionMismatch(f"expected 4-D data, got {self.data.ndim}-D")
        if not np.all(np.isfinite(self.data)):
            raise CorruptHeader("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def source_bytes(self) -> int:
        """Size of the original stored payload in bytes."""
        return int(np.prod(self.dims)) * np.dtype(self.source_dtype).itemsize


@dataclass
class Mask3D:
    """Boolean (W, H, D) voxel-inclusion mask."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise DimensionMismatch(f"expected 3-D mask, got {self.data.ndim}-D")
        if not self.data.any():
            raise EmptyMask("mask selects no voxels")

    @property
    def n_voxels(self) -> int:
        return int(self.data.sum())


@dataclass
class MeanFrame:
    """Per-voxel temporal mean, shape (W, H, D)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionMismatch(f"expected 3-D mean frame, got {self.data.ndim}-D")


@dataclass
class VoxelSeriesSet:
    """Masked voxel time series.

    ``coords`` is an (n, 3) integer array in lexicographic (x, y, z)
    ascending order and ``series`` the matching (n, T) float32 matrix.
    """

    coords: np.ndarray
    series: np.ndarray
    dims: tuple[int, int, int, int] = field(default=None)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.series = np.asarray(self.series, dtype=np.float32)
        if self.coords.shape[0] != self.series.shape[0]:
            raise DimensionMismatch("coords/series row counts differ")

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def n_frames(self) -> int:
        return self.series.shape[1]


# ---------------------------------------------------------------------------
# rawbin
# ---------------------------------------------------------------------------

def save_rawbin(vol: Volume4D, path, dtype: str | None = None) -> None:
    """Write a volume in rawbin format.

    ``dtype`` defaults to the volume's source dtype.  Integer dtypes round
    the float32 payload to the nearest representable value.
    """
    dtype = dtype or vol.source_dtype
    name = np.dtype(dtype).name
    if name not in _RAWBIN_CODES:
        raise UnsupportedDatatype(f"rawbin cannot store dtype {name}")
    code = _RAWBIN_CODES[name]
    w, h, d, t = vol.dims
    header = RAWBIN_MAGIC + struct.pack("<BBxx4I8x", RAWBIN_VERSION, code, w, h, d, t)
    assert len(header) == RAWBIN_HEADER_SIZE
    payload = vol.data
    if np.issubdtype(np.dtype(dtype), np.integer):
        payload = np.rint(payload)
    payload = payload.astype(dtype).flatten(order="F")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def save_rawbin_labels(labels: np.ndarray, path) -> None:
    """Write a 3-D int label array as a single-frame int32 rawbin volume."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionMismatch("label volume must be 3-D")
    w, h, d = labels.shape
    header = RAWBIN_MAGIC + struct.pack(
        "<BBxx4I8x", RAWBIN_VERSION, _RAWBIN_CODES["int32"], w, h, d, 1
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(labels.astype(np.int32).flatten(order="F").tobytes())


def load_rawbin_labels(path) -> np.ndarray:
    """Read a 3-D int label array written by :func:`save_rawbin_labels`."""
    raw, dims, _ = _read_rawbin_payload(path)
    if dims[3] != 1:
        raise DimensionMismatch("label volume must have a single frame")
    return raw.reshape(dims, order="F")[..., 0].astype(np.int32)


def _read_rawbin_payload(path):
    with open(path, "rb") as f:
        header = f.read(RAWBIN_HEADER_SIZE)
        if len(header) < RAWBIN_HEADER_SIZE or header[:4] != RAWBIN_MAGIC:
            raise CorruptHeader(f"not a rawbin file: {path}")
        version, code, w, h, d, t = struct.unpack("<BBxx4I8x", header[4:])
        if version != RAWBIN_VERSION:
            raise CorruptHeader(f"unsupported rawbin version {version}")
        if code not in _RAWBIN_DTYPES:
            raise UnsupportedDatatype(f"unknown rawbin dtype code {code}")
        dtype = np.dtype(_RAWBIN_DTYPES[code]).newbyteorder("<")
        n = w * h * d * t
        raw = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype)
        if raw.size != n:
            raise CorruptHeader("rawbin payload shorter than declared dims")
    return raw, (w, h, d, t), np.dtype(_RAWBIN_DTYPES[code]).name


def _load_rawbin(path) -> Volume4D:
    raw, dims, dtype_name = _read_rawbin_payload(path)
    data = raw.astype(np.float32).reshape(dims, order="F")
    return Volume4D(data, voxel_scale=(0.0, 1.0), source_dtype=dtype_name)


# ---------------------------------------------------------------------------
# NIfTI-1 (read-only subset)
# ---------------------------------------------------------------------------

def _load_nifti1(path) -> Volume4D:
    path = Path(path)
    with open(path, "rb") as f:
        hdr = f.read(348)
    if len(hdr) < 348:
        raise CorruptHeader("file shorter than a NIfTI-1 header")

    magic = hdr[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise CorruptHeader(f"bad NIfTI magic {magic!r}")

    # endianness: dim[0] must land in 1..7 under the correct byte order
    for endian in ("<", ">"):
        dim0 = struct.unpack(endian + "h", hdr[40:42])[0]
        if 1 <= dim0 <= 7:
            break
    else:
        raise CorruptHeader("dim[0] out of range under both byte orders")

    dim = struct.unpack(endian + "8h", hdr[40:56])
    datatype = struct.unpack(endian + "h", hdr[70:72])[0]
    vox_offset = struct.unpack(endian + "f", hdr[108:112])[0]
    scl_slope = struct.unpack(endian + "f", hdr[112:116])[0]
    scl_inter = struct.unpack(endian + "f", hdr[116:120])[0]

    if dim[0] != 4:
        raise DimensionMismatch(f"need 4-D data, header declares dim[0]={dim[0]}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"NIfTI datatype code {datatype} not supported")

    w, h, d, t = (max(1, dim[i]) for i in range(1, 5))
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)

    if magic == b"n+1\0":
        data_path, offset = path, max(int(vox_offset), 348)
    else:
        data_path = path.with_suffix(".img")
        if not data_path.exists():
            raise CorruptHeader(f"companion image file missing: {data_path}")
        offset = int(vox_offset)

    n = w * h * d * t
    with open(data_path, "rb") as f:
        f.seek(offset)
        raw = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype)
    if raw.size != n:
        raise CorruptHeader("NIfTI payload shorter than declared dims")

    data = raw.astype(np.float32).reshape((w, h, d, t), order="F")
    if scl_slope != 0.0:
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
        scale = (float(scl_inter), float(scl_slope))
    else:
        scale = (0.0, 1.0)
    return Volume4D(data, voxel_scale=scale,
                    source_dtype=np.dtype(_NIFTI_DTYPES[datatype]).name)


def load_volume(path, format: str = "auto") -> Volume4D:
    """Load a 4-D volume from disk.

    Parameters
    ----------
    path : path-like
    format : {"auto", "rawbin", "nifti1"}
        "auto" sniffs the rawbin magic and falls back to NIfTI-1.
    """
    if format == "auto":
        with open(path, "rb") as f:
            format = "rawbin" if f.read(4) == RAWBIN_MAGIC else "nifti1"
    if format == "rawbin":
        return _load_rawbin(path)
    if format == "nifti1":
        return _load_nifti1(path)
    raise ValueError(f"unknown format {format!r}")


# ---------------------------------------------------------------------------
# mean frame / masking
# ---------------------------------------------------------------------------

def split_mean(vol: Volume4D) -> tuple[MeanFrame, Volume4D]:
    """Split a volume into its per-voxel temporal mean and the residual.

    The residual plus the broadcast mean reproduces the input up to float32
    rounding.
    """
    mean = vol.data.mean(axis=3, dtype=np.float64).astype(np.float32)
    residual = vol.data - mean[..., None]
    return MeanFrame(mean), Volume4D(residual, vol.voxel_scale, vol.source_dtype)


def apply_mask(vol: Volume4D, mask: Mask3D) -> VoxelSeriesSet:
    """Extract the time series of all in-mask voxels.

    Rows are ordered lexicographically by (x, y, z) ascending, which keeps
    batch assembly deterministic across runs and platforms.
    """
    if mask.data.shape != vol.dims[:3]:
        raise DimensionMismatch(
            f"mask shape {mask.data.shape} vs volume {vol.dims[:3]}"
        )
    coords = np.argwhere(mask.data)  # C-scan order == lexicographic (x, y, z)
    series = vol.data[mask.data]
    return VoxelSeriesSet(coords, series, dims=vol.dims)


def auto_mask(vol: Volume4D, rel_threshold: float = 0.1) -> Mask3D:
    """Threshold-based foreground mask.

    A voxel is included iff its temporal-mean intensity exceeds
    ``rel_threshold`` times the maximum temporal mean.
    """
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError("rel_threshold must lie in (0, 1)")
    means = vol.data.mean(axis=3)
    selected = means > rel_threshold * means.max()
    if not selected.any():
        raise EmptyMask("no voxel passes the threshold")
    return Mask3D(selected)
