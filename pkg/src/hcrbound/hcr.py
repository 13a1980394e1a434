"""Hammersley-Chapman-Robbins bounds for inputs behind dithered features.

The released observation is ``X = a(theta) + Z`` with ``a`` the feature
extractor and ``Z`` additive noise.  For any input perturbation ``eps`` whose
exact feature shift is ``z_eps = a(theta + eps) - a(theta)``, every unbiased
estimator of ``theta`` satisfies

    Var(theta_hat_k) >= eps_k**2 / E[(f(Z - z_eps) / f(Z) - 1)**2],

and for N(0, sigma^2 I) noise the denominator is ``expm1(|z_eps|^2/sigma^2)``.
The bound holds for *any* ``eps``; :func:`algorithm1` merely looks for one
with a small feature shift per unit of input change.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dct import dct2
from .lsqr import LinearOperator, LsqrConfig, lsqr_solve
from .nn import Linearization, Network
from .tensor import DTYPE, RngStream, euclidean_norm, sample_normal, stream_for

# exponents beyond this overflow expm1 in float64 (log(max double) ~ 709.8)
SATURATION_EXPONENT = 700.0

PURPOSE_START = 1  # stream purpose tag for starting vectors


class DegenerateError(ArithmeticError):
    """The perturbation search collapsed to a zero vector."""


# --------------------------------------------------------------------------
# noise models


@dataclass(frozen=True)
class GaussianIid:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def sample(self, rng: RngStream, count: int, dim: int) -> np.ndarray:
        return sample_normal(rng, (count, dim), self.sigma)

    def density_ratio(self, z: np.ndarray, shift: np.ndarray) -> np.ndarray:
        """``f(z - shift) / f(z)`` for each row of ``z``."""
        shift = np.ravel(shift)
        expo = (2.0 * (z @ shift) - shift @ shift) / (2.0 * self.sigma**2)
        return np.exp(expo)

    def denominator(self, z_epsilon: np.ndarray) -> float:
        return gaussian_denominator(euclidean_norm(z_epsilon), self.sigma)


@dataclass(frozen=True)
class CustomNoise:
    """Any additive noise law, described by a batch sampler and density ratio.

    ``sampler(rng, count, dim)`` returns a ``(count, dim)`` array of noise
    draws; ``density_ratio(z, shift)`` returns ``f(z - shift) / f(z)`` for
    every row of ``z``.
    """

    sampler: Callable[[RngStream, int, int], np.ndarray]
    ratio: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def sample(self, rng, count, dim):
        return np.asarray(self.sampler(rng, count, dim), dtype=DTYPE)

    def density_ratio(self, z, shift):
        return np.asarray(self.ratio(z, shift), dtype=DTYPE)


NoiseModel = GaussianIid | CustomNoise


# --------------------------------------------------------------------------
# denominators and bounds


def gaussian_denominator(z_norm: float, sigma: float) -> float:
    """``exp(|z|^2 / sigma^2) - 1``; ``inf`` once the exponent exceeds 700.

    An infinite denominator makes every bound derived from it exactly zero,
    which is the correct (vacuous) conclusion for such a large shift.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if z_norm < 0:
        raise ValueError("z_norm must be nonnegative")
    c2 = (z_norm / sigma) ** 2
    if c2 > SATURATION_EXPONENT:
        return math.inf
    return math.expm1(c2)


def is_saturated(denominator: float) -> bool:
    return math.isinf(denominator)


_MC_CHUNK_WORDS = 1 << 22
_MC_CHUNK_STRIDE = 1 << 40  # counter gap between chunks of one estimate


def mc_denominator(
    noise: NoiseModel,
    z_epsilon: np.ndarray,
    samples: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[(f(Z - z)/f(Z) - 1)^2]`` and its standard error."""
    if samples < 100:
        raise ValueError("need at least 100 samples")
    z_epsilon = np.asarray(z_epsilon, dtype=DTYPE).ravel()
    dim = z_epsilon.size
    per_chunk = max(1, _MC_CHUNK_WORDS // max(dim, 1))

    count, mean, m2 = 0, 0.0, 0.0
    for chunk, start in enumerate(range(0, samples, per_chunk)):
        size = min(per_chunk, samples - start)
        sub = rng.advanced(chunk * _MC_CHUNK_STRIDE)
        z = noise.sample(sub, size, dim)
        terms = (noise.density_ratio(z, z_epsilon) - 1.0) ** 2
        if not np.all(np.isfinite(terms)):
            raise FloatingPointError("noise model produced a non-finite density ratio")
        # Chan et al. pairwise merge of running mean / sum of squared deviations
        c_mean = float(terms.mean())
        c_m2 = float(((terms - c_mean) ** 2).sum())
        total = count + size
        delta = c_mean - mean
        mean += delta * size / total
        m2 += c_m2 + delta * delta * count * size / total
        count = total

    std = math.sqrt(m2 / (count - 1))
    return mean, std / math.sqrt(count)


def hcr_std_bound(epsilon_k, denominator: float):
    """Lower bound ``|eps_k| / sqrt(denominator)`` on an unbiased estimator's std.

    Works elementwise on arrays.  An infinite denominator gives 0.
    """
    if not denominator > 0:
        raise ValueError(f"denominator must be positive, got {denominator}")
    if math.isinf(denominator):
        return np.zeros_like(epsilon_k, dtype=DTYPE) if np.ndim(epsilon_k) else 0.0
    out = np.abs(epsilon_k) / math.sqrt(denominator)
    return float(out) if np.ndim(out) == 0 else out


def mse_bound(epsilon: np.ndarray, denominator: float) -> float:
    """Bound on the mean (over coordinates) squared error of an unbiased estimator."""
    if not denominator > 0:
        raise ValueError(f"denominator must be positive, got {denominator}")
    eps = np.asarray(epsilon, dtype=DTYPE).ravel()
    return float(np.mean(eps**2) / denominator)


# --------------------------------------------------------------------------
# perturbation search


def jacobian_operator(lin: Linearization) -> LinearOperator:
    """The input Jacobian at ``lin.theta`` as a flat matrix-free operator."""
    return LinearOperator(
        lin.rows,
        lin.cols,
        lambda v: lin.jvp(v).ravel(),
        lambda u: lin.vjp(u).ravel(),
    )


@dataclass
class PerturbationOutcome:
    epsilon: np.ndarray  # shaped like theta
    z_epsilon: np.ndarray  # flat, exactly a(theta + epsilon) - a(theta)
    norm_epsilon: float
    norm_z: float
    gain_ratio: float
    trace: list[float] = field(default_factory=list)
    lsqr_iterations: list[int] = field(default_factory=list)


def algorithm1(
    net: Network,
    theta: np.ndarray,
    z0: np.ndarray,
    repetitions: int = 10,
    lsqr_config: LsqrConfig | None = None,
) -> PerturbationOutcome:
    """Search for an input perturbation with small feature shift per unit size.

    Each repetition rescales the current feature shift to the norm of ``z0``,
    maps it back through the pseudoinverse of the Jacobian at ``theta`` (LSQR,
    matrix-free), then recomputes the *exact* feature shift of the resulting
    input perturbation with a forward pass.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    z0 = np.asarray(z0, dtype=DTYPE).ravel()
    target = euclidean_norm(z0)
    if target == 0.0:
        raise ValueError("starting vector must be nonzero")

    lin = net.linearize(theta)
    if z0.size != lin.rows:
        raise ValueError(f"starting vector has {z0.size} entries, features have {lin.rows}")
    op = jacobian_operator(lin)
    base = lin.theta
    a_theta = lin.output.ravel()

    z = z0
    trace, iters = [], []
    for _ in range(repetitions):
        znorm = euclidean_norm(z)
        if znorm == 0.0:
            raise DegenerateError("feature shift vanished; cannot rescale")
        z_tilde = (target / znorm) * z
        result = lsqr_solve(op, z_tilde, lsqr_config)
        eps = result.x.reshape(base.shape)
        if euclidean_norm(eps) == 0.0:
            raise DegenerateError("least-squares step returned a zero perturbation")
        z = net.forward(base + eps).ravel() - a_theta
        if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(z))):
            raise FloatingPointError("non-finite values in perturbation search")
        trace.append(euclidean_norm(z) / euclidean_norm(eps))
        iters.append(result.iterations)

    norm_eps, norm_z = euclidean_norm(eps), euclidean_norm(z)
    return PerturbationOutcome(eps, z, norm_eps, norm_z, norm_z / norm_eps, trace, iters)


# --------------------------------------------------------------------------
# per-mode protocol


def to_basis(epsilon: np.ndarray, basis: str) -> np.ndarray:
    """Express an input-space vector in pixel or per-channel orthonormal DCT coordinates."""
    if basis == "pixel":
        return np.asarray(epsilon, dtype=DTYPE)
    if basis == "dct":
        if epsilon.ndim not in (2, 3):
            raise ValueError(f"DCT basis needs an image-shaped input, got shape {epsilon.shape}")
        return dct2(epsilon)
    raise ValueError(f"unknown basis {basis!r}")


@dataclass
class BoundReport:
    basis: str
    std_lower_bounds: np.ndarray  # shaped like the input; (C, H, W) modes for "dct"
    trials: int
    size: float
    sigma: float
    repetitions: int
    denominators: list[float] = field(default_factory=list)
    saturated: int = 0

    CSV_HEADER = ("index", "bound", "trials", "s", "sigma", "basis")

    def csv_rows(self) -> list[tuple]:
        flat = self.std_lower_bounds.ravel()
        return [
            (k, _fmt(b), self.trials, _fmt(self.size), _fmt(self.sigma), self.basis)
            for k, b in enumerate(flat)
        ]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            writer.writerows(self.csv_rows())


def _fmt(x: float) -> str:
    return repr(float(x))


def starting_vector(seed: int, example: int, trial: int, n: int, size: float) -> np.ndarray:
    """i.i.d. standard normals scaled by ``size / sqrt(n)``, so the norm is about ``size``."""
    rng = stream_for(seed, example, trial, purpose=PURPOSE_START)
    return sample_normal(rng, n) * (size / math.sqrt(n))


def per_mode_bounds(
    net: Network,
    theta: np.ndarray,
    sigma: float,
    size: float,
    trials: int = 25,
    repetitions: int = 10,
    seed: int = 0,
    example: int = 0,
    basis: str = "dct",
    lsqr_config: LsqrConfig | None = None,
) -> BoundReport:
    """Per-coordinate std lower bounds, maximised over random starting vectors.

    Trial ``t`` of example ``e`` draws its starting vector from the stream
    keyed ``(seed, e*1000 + t)``, so reports do not depend on which other
    examples or trials were computed alongside.
    """
    if not size > 0:
        raise ValueError("perturbation size must be positive")
    if trials < 1:
        raise ValueError("need at least one trial")
    theta = net._as_input(np.asarray(theta, dtype=DTYPE))
    n = net.output_size
    best = np.zeros(theta.shape, dtype=DTYPE)
    denominators, saturated = [], 0
    for t in range(trials):
        z0 = starting_vector(seed, example, t, n, size)
        outcome = algorithm1(net, theta, z0, repetitions, lsqr_config)
        denom = gaussian_denominator(outcome.norm_z, sigma)
        denominators.append(denom)
        if is_saturated(denom):
            saturated += 1
            continue
        coeffs = to_basis(outcome.epsilon, basis)
        best = np.maximum(best, hcr_std_bound(coeffs, denom))
    return BoundReport(basis, best, trials, size, sigma, repetitions, denominators, saturated)


# --------------------------------------------------------------------------
# Cramer-Rao limit


def jacobian_columns(lin: Linearization, coordinates: Sequence[int], chunk: int = 256) -> np.ndarray:
    """Columns ``J e_k`` for the given flat input coordinates, as rows of the result."""
    coords = np.asarray(list(coordinates), dtype=int)
    if coords.size and (coords.min() < 0 or coords.max() >= lin.cols):
        raise IndexError(f"coordinates must lie in [0, {lin.cols})")
    out = np.empty((coords.size, lin.rows), dtype=DTYPE)
    for start in range(0, coords.size, chunk):
        part = coords[start : start + chunk]
        basis = np.zeros((part.size, lin.cols), dtype=DTYPE)
        basis[np.arange(part.size), part] = 1.0
        out[start : start + part.size] = lin.jvp_batch(basis).reshape(part.size, -1)
    return out


def cramer_rao_bounds(
    net: Network, theta: np.ndarray, sigma: float, coordinates: Sequence[int] | None = None
) -> np.ndarray:
    """Variance lower bounds ``sigma^2 / sum_j J_jk^2`` per input coordinate.

    A coordinate the features do not depend on gets ``inf`` (unbounded).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    lin = net.linearize(theta)
    if coordinates is None:
        coordinates = range(lin.cols)
    cols = jacobian_columns(lin, coordinates)
    energy = np.einsum("kj,kj->k", cols, cols)
    with np.errstate(divide="ignore"):
        return np.where(energy > 0, sigma**2 / np.where(energy > 0, energy, 1.0), np.inf)


def coordinate_hcr_variance(
    net: Network, theta: np.ndarray, sigma: float, coordinate: int, size: float
) -> float:
    """HCR variance bound from a perturbation of one input coordinate.

    The step along ``e_k`` is chosen so the linearised feature shift has norm
    ``size``; the denominator uses the exact recomputed shift.  As ``size``
    shrinks this tends to the Cramer-Rao value for that coordinate.
    """
    lin = net.linearize(theta)
    col = jacobian_columns(lin, [coordinate])[0]
    col_norm = euclidean_norm(col)
    if col_norm == 0.0:
        return math.inf
    step = size / col_norm
    eps = np.zeros(lin.cols, dtype=DTYPE)
    eps[coordinate] = step
    z = net.forward(lin.theta + eps.reshape(lin.theta.shape)).ravel() - lin.output.ravel()
    denom = gaussian_denominator(euclidean_norm(z), sigma)
    if denom == 0.0:
        return math.inf
    return hcr_std_bound(step, denom) ** 2
