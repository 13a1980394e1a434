import math

import numpy as np
import pytest

from hcrbound.dct import dct2, idct2, lowpass_filter


def brute_dct2(x):
    """Direct double cosine sum with orthonormal scaling."""
    h, w = x.shape
    out = np.zeros((h, w))
    for k in range(h):
        for l in range(w):
            ak = math.sqrt((1 if k == 0 else 2) / h)
            al = math.sqrt((1 if l == 0 else 2) / w)
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[i, j] * math.cos(math.pi * (2 * i + 1) * k / (2 * h)) * \
                        math.cos(math.pi * (2 * j + 1) * l / (2 * w))
            out[k, l] = ak * al * acc
    return out


def test_constant_image_dc():
    c = dct2(np.ones((1, 4, 4)))
    assert c[0, 0, 0] == pytest.approx(4.0, rel=1e-15)
    c[0, 0, 0] = 0.0
    assert np.max(np.abs(c)) < 1e-14


def test_dc_inversion():
    coeffs = np.zeros((1, 3, 5))
    coeffs[0, 0, 0] = math.sqrt(15)
    np.testing.assert_allclose(idct2(coeffs), np.ones((1, 3, 5)), rtol=1e-14)


def test_round_trip_and_linearity(rng):
    x, y = rng.normal(size=(2, 3, 7, 9))
    np.testing.assert_allclose(idct2(dct2(x)), x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(idct2(2.5 * x - 0.5 * y), 2.5 * idct2(x) - 0.5 * idct2(y),
                               rtol=0, atol=1e-12)


def test_random_8x8_matches_brute_force(rng):
    x = rng.normal(size=(8, 8))
    np.testing.assert_allclose(dct2(x), brute_dct2(x), rtol=0, atol=1e-10)


def test_parseval(rng):
    x = rng.normal(size=(2, 28, 28))
    assert np.linalg.norm(dct2(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_two_dimensional_input_keeps_shape(rng):
    x = rng.normal(size=(5, 6))
    assert dct2(x).shape == (5, 6)
    np.testing.assert_allclose(dct2(x), dct2(x[None])[0])


def test_channels_transform_independently(rng):
    x = rng.normal(size=(3, 4, 4))
    for c in range(3):
        np.testing.assert_allclose(dct2(x)[c], dct2(x[c]), rtol=1e-14)


def test_lowpass(rng):
    square = rng.normal(size=(1, 5, 5))
    np.testing.assert_array_equal(lowpass_filter(square, 5), square)
    c = rng.normal(size=(2, 6, 5))
    # non-square: k = min(H, W) still drops the extra frequency rows
    assert not lowpass_filter(c, 5)[:, 5:].any()
    dc = lowpass_filter(c, 1)
    assert np.count_nonzero(dc) == 2 and np.array_equal(dc[:, 0, 0], c[:, 0, 0])
    low = lowpass_filter(c, 3)
    np.testing.assert_array_equal(low[:, :3, :3], c[:, :3, :3])
    assert np.linalg.norm(low) <= np.linalg.norm(c)
    for k in (0, 6):
        with pytest.raises(ValueError):
            lowpass_filter(c, k)


def test_orthonormality(rng):
    basis = dct2(np.eye(36).reshape(36, 6, 6)).reshape(36, 36)
    np.testing.assert_allclose(basis @ basis.T, np.eye(36), rtol=0, atol=1e-14)
    x, y = rng.normal(size=(2, 2, 9, 7))
    # measured against |x||y|; <x, y> itself may cancel to nearly zero
    gap = abs(np.vdot(dct2(x), dct2(y)) - np.vdot(x, y))
    assert gap <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y)


def test_all_small_sizes_match_brute_force(rng):
    for h in range(1, 9):
        for w in range(1, 9):
            x = rng.normal(size=(h, w))
            np.testing.assert_allclose(dct2(x), brute_dct2(x), rtol=0, atol=1e-10)
