"""Histograms, Rademacher visualisations and PGM/PPM output."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dct import dct2, idct2
from .tensor import DTYPE, RngStream, sample_rademacher


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("bin_left", "bin_right", "count"))
            for left, right, count in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                writer.writerow((repr(float(left)), repr(float(right)), int(count)))


def histogram(values, bins: int) -> Histogram:
    """Equal-width bins over [min, max]; the last bin is closed on the right."""
    values = np.asarray(values, dtype=DTYPE).ravel()
    if values.size == 0:
        raise ValueError("cannot histogram an empty sequence")
    if not np.all(np.isfinite(values)):
        raise ValueError("histogram values must be finite")
    if bins < 1:
        raise ValueError("bins must be positive")
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(edges, counts.astype(np.int64), int(values.size))


def rademacher_visualize(
    normalized_image: np.ndarray,
    bounds: np.ndarray,
    rng: RngStream,
    to_unit: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Perturb each DCT mode by a random sign times its bound, then display.

    ``to_unit`` undoes the input normalisation, mapping to the [0, 1]
    perceptual scale; the result is clipped to [0, 1].
    """
    image = np.asarray(normalized_image, dtype=DTYPE)
    bounds = np.asarray(bounds, dtype=DTYPE)
    if image.shape != bounds.shape:
        raise ValueError(f"image shape {image.shape} does not match bounds {bounds.shape}")
    coeffs = dct2(image) + sample_rademacher(rng, image.shape) * bounds
    return np.clip(to_unit(idct2(coeffs)), 0.0, 1.0)


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.floor(255.0 * np.clip(image, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_image(image: np.ndarray, path, fmt: str | None = None) -> None:
    """Write a [0, 1] image as binary PGM (one channel) or PPM (three).

    ``image`` is ``(H, W)`` or ``(C, H, W)``; the format defaults from the
    path suffix, else from the channel count.
    """
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {image.shape}")
    channels, h, w = image.shape
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower() or ("pgm" if channels == 1 else "ppm")
    if fmt == "pgm" and channels == 1:
        magic, pixels = b"P5", _to_bytes(image[0])
    elif fmt == "ppm" and channels == 3:
        magic, pixels = b"P6", _to_bytes(image.transpose(1, 2, 0))
    else:
        raise ValueError(f"cannot write {channels}-channel image as {fmt!r}")
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
