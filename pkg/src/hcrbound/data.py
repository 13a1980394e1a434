"""IDX file reading/writing and pixel normalisation."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE

# IDX element type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxFormatError(ValueError):
    pass


def read_idx(path) -> np.ndarray:
    """Parse an (uncompressed) IDX file into a float64 array.

    The leading dimension is the item count, so ``len(result)`` gives it.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise IdxFormatError(f"{path}: bad magic {data[:4].hex()}")
    if code not in IDX_TYPES:
        raise IdxFormatError(f"{path}: unsupported element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = IDX_TYPES[code]
    expected = math.prod(dims) * dtype.itemsize
    payload = len(data) - header
    if payload < expected:
        raise IdxFormatError(f"{path}: truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise IdxFormatError(f"{path}: {payload - expected} trailing bytes")
    arr = np.frombuffer(data, dtype=dtype, offset=header, count=math.prod(dims))
    return arr.astype(DTYPE).reshape(dims)


def write_idx(path, array: np.ndarray, code: int = 0x08) -> None:
    dtype = IDX_TYPES[code]
    arr = np.asarray(array)
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


@dataclass(frozen=True)
class Normalization:
    """Affine map between raw 0..255 pixel values and network inputs.

    ``mode="mnist"`` scales to [0, 1], subtracts ``mean``, divides by ``std``;
    ``mode="signed"`` maps [0, 255] onto [-1, 1].
    """

    mode: str = "mnist"
    mean: float = 0.1037
    std: float = 0.3081

    def __post_init__(self):
        if self.mode not in ("mnist", "signed"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if not self.std > 0:
            raise ValueError("std must be positive")

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        unit = np.asarray(raw, dtype=DTYPE) / 255.0
        if self.mode == "signed":
            return 2.0 * unit - 1.0
        return (unit - self.mean) / self.std

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        """Network input back to the perceptual [0, 1] scale (unclipped)."""
        x = np.asarray(x, dtype=DTYPE)
        if self.mode == "signed":
            return (x + 1.0) / 2.0
        return x * self.std + self.mean

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return self.to_unit(x) * 255.0


def load_images(path, norm: Normalization) -> np.ndarray:
    """IDX image file as normalised ``(N, C, H, W)`` network inputs."""
    raw = read_idx(path)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim == 4 and raw.shape[-1] in (1, 3):
        raw = raw.transpose(0, 3, 1, 2)
    elif raw.ndim != 4:
        raise IdxFormatError(f"{path}: expected image tensor, got shape {raw.shape}")
    return norm.normalize(raw)


def load_labels(path) -> np.ndarray:
    raw = read_idx(path)
    if raw.ndim != 1:
        raise IdxFormatError(f"{path}: labels must be one-dimensional, got {raw.shape}")
    return raw.astype(np.int64)
