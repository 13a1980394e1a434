"""Dense float64 tensors and counter-based random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; the helpers
below only add validation and the few vector operations the rest of the
package leans on.  Random numbers come from :class:`RngStream`, an
immutable (seed, stream_id, counter) triple backed by the Philox counter
generator, so any sub-stream can be materialised without replaying others.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

DTYPE = np.float64

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4  # Philox4x64 emits four 64-bit words per counter step


def from_data(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 tensor, optionally reshaped, rejecting NaN/Inf."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise ValueError(f"dimensions must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise ValueError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE)


def reshape(v: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    if v.size != math.prod(shape):
        raise ValueError(f"cannot reshape {v.shape} to {shape}")
    return v.reshape(shape)


def dot(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(np.dot(u.ravel(), v.ravel()))


def scale(v: np.ndarray, c: float) -> np.ndarray:
    return v * c


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a*x + y`` without mutating either operand."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return a * x + y


def euclidean_norm(v: np.ndarray) -> float:
    """Euclidean norm, robust to over/underflow of the squared entries."""
    flat = np.asarray(v, dtype=DTYPE).ravel()
    if flat.size == 0:
        return 0.0
    big = float(np.max(np.abs(flat)))
    if big == 0.0 or not math.isfinite(big):
        return big
    # np.linalg.norm squares unscaled and underflows below ~1e-154
    if 1e-100 < big < 1e100:
        return float(math.sqrt(np.dot(flat, flat)))
    scaled = flat / big
    return big * float(math.sqrt(np.dot(scaled, scaled)))


@dataclass(frozen=True)
class RngStream:
    """Position in a reproducible pseudorandom stream.

    ``seed`` and ``stream_id`` together form the 128-bit Philox key;
    ``counter`` is the offset in 64-bit words.  Sampling never mutates the
    stream; use :meth:`advanced` to move past words already consumed.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            value = getattr(self, name)
            if not 0 <= value <= _MASK64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer")

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id & _MASK64)

    def advanced(self, words: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter + words)

    def raw(self, count: int) -> np.ndarray:
        """``count`` uint64 words starting at this stream's counter."""
        block, skip = divmod(self.counter, _WORDS_PER_BLOCK)
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([block, 0, 0, 0], dtype=np.uint64),
        )
        words = bitgen.random_raw(count + skip)
        return np.asarray(words[skip:], dtype=np.uint64)


def stream_for(seed: int, example: int, trial: int = 0, purpose: int = 0) -> RngStream:
    """Per-(example, trial) stream keyed as ``example*1000 + trial``.

    ``purpose`` occupies the top byte of the stream id so that, e.g., the
    starting vectors of the bound search never share words with the noise
    drawn for accuracy evaluation.
    """
    if not 0 <= trial < 1000:
        raise ValueError("trial index must lie in [0, 1000)")
    return RngStream(seed & _MASK64, ((purpose & 0xFF) << 56) | (example * 1000 + trial))


def _open_uniform(words: np.ndarray) -> np.ndarray:
    # 53 high bits mapped to the open interval (0, 1); never hits 0 or 1
    return ((words >> np.uint64(11)).astype(DTYPE) + 0.5) * 2.0**-53


def sample_uniform(rng: RngStream, shape) -> np.ndarray:
    count = math.prod(_as_shape(shape))
    return _open_uniform(rng.raw(count)).reshape(_as_shape(shape))


def sample_normal(rng: RngStream, shape, sigma: float = 1.0) -> np.ndarray:
    """i.i.d. N(0, sigma^2) entries by inverse CDF, one word per variate."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    shape = _as_shape(shape)
    z = ndtri(_open_uniform(rng.raw(math.prod(shape))))
    return (sigma * z).reshape(shape)


def sample_rademacher(rng: RngStream, shape) -> np.ndarray:
    shape = _as_shape(shape)
    top = rng.raw(math.prod(shape)) >> np.uint64(63)
    return (2.0 * top.astype(DTYPE) - 1.0).reshape(shape)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)
