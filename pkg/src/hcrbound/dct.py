"""Orthonormal 2D DCT-II, its inverse, and low-frequency truncation.

Images are ``(C, H, W)`` arrays (a bare ``(H, W)`` array is accepted and
treated as one channel, keeping its shape).  Coefficient ``[c, k, l]`` is
the mode with vertical frequency ``k`` and horizontal frequency ``l``;
``[c, 0, 0]`` is the DC term.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import DTYPE


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthogonal ``n x n`` DCT-II matrix; row k is the k-th cosine mode."""
    if n < 1:
        raise ValueError("transform size must be positive")
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    m *= np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def _as_chw(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W), got shape {x.shape}")
    return x, False


def dct2(image: np.ndarray) -> np.ndarray:
    x, squeeze = _as_chw(image)
    ch, cw = dct_matrix(x.shape[1]), dct_matrix(x.shape[2])
    out = ch @ x @ cw.T
    return out[0] if squeeze else out


def idct2(coeffs: np.ndarray) -> np.ndarray:
    x, squeeze = _as_chw(coeffs)
    ch, cw = dct_matrix(x.shape[1]), dct_matrix(x.shape[2])
    out = ch.T @ x @ cw
    return out[0] if squeeze else out


def lowpass_mask(h: int, w: int, k: int) -> np.ndarray:
    if not 1 <= k <= min(h, w):
        raise ValueError(f"low-pass size {k} outside [1, {min(h, w)}]")
    mask = np.zeros((h, w), dtype=bool)
    mask[:k, :k] = True
    return mask


def lowpass_filter(coeffs: np.ndarray, k: int) -> np.ndarray:
    """Keep modes whose two frequency indices are both below ``k``."""
    x = np.asarray(coeffs, dtype=DTYPE)
    mask = lowpass_mask(x.shape[-2], x.shape[-1], k)
    return np.where(mask, x, 0.0)
