"""Matrix-free LSQR (Paige & Saunders) for min ||A x - b||.

Only ``apply`` and ``apply_transpose`` of the operator are ever called,
exactly once each per iteration, plus one transpose product at start-up.
No damping, no preconditioning.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import DTYPE, RngStream, euclidean_norm, sample_normal


class Termination(enum.Enum):
    CONVERGED = "atol/btol met"
    MAX_ITERATIONS = "max_iterations"
    BREAKDOWN = "breakdown"


@dataclass
class LinearOperator:
    """An ``rows x cols`` linear map given only by its products."""

    rows: int
    cols: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]
    verify: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("operator dimensions must be positive")
        if self.verify:
            mismatch = self.adjoint_mismatch(RngStream(0x5EED))
            if mismatch > 1e-9:
                raise ValueError(f"apply_transpose is not the adjoint of apply ({mismatch:.3g})")

    @classmethod
    def from_matrix(cls, a: np.ndarray, **kw) -> "LinearOperator":
        a = np.asarray(a, dtype=DTYPE)
        return cls(a.shape[0], a.shape[1], lambda v: a @ v, lambda u: a.T @ u, **kw)

    def adjoint_mismatch(self, rng: RngStream, trials: int = 3) -> float:
        """Worst ``|<u, Av> - <A^T u, v>| / (1 + |u||v|)`` over random pairs."""
        worst = 0.0
        for t in range(trials):
            v = sample_normal(rng.substream(2 * t), self.cols)
            u = sample_normal(rng.substream(2 * t + 1), self.rows)
            lhs = float(np.dot(u, np.ravel(self.apply(v))))
            rhs = float(np.dot(np.ravel(self.apply_transpose(u)), v))
            worst = max(worst, abs(lhs - rhs) / (1.0 + euclidean_norm(u) * euclidean_norm(v)))
        return worst


@dataclass
class LsqrConfig:
    max_iterations: int | None = None  # None means 2 * min(rows, cols)
    atol: float = 1e-10
    btol: float = 1e-10

    def __post_init__(self):
        if not (0 <= self.atol < 1 and 0 <= self.btol < 1):
            raise ValueError("atol and btol must lie in [0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def iteration_cap(self, op: LinearOperator) -> int:
        if self.max_iterations is None:
            return 2 * min(op.rows, op.cols)
        return self.max_iterations


@dataclass
class LsqrResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    termination: Termination
    residual_history: list[float] = field(default_factory=list)
    anorm: float = 0.0


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values in {what}")


def lsqr_solve(
    op: LinearOperator,
    b: np.ndarray,
    config: LsqrConfig | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> LsqrResult:
    """Least-squares solution of ``op x = b`` by Golub-Kahan bidiagonalization.

    Stops when ``||r|| <= btol ||b|| + atol ||A|| ||x||`` (consistent systems)
    or ``||A^T r|| <= atol ||A|| ||r||`` (least squares), with ``||A||`` the
    running Frobenius estimate, or at the iteration cap.  ``residual_history``
    holds the recurrence estimate of ``||b - A x_k||`` for k = 0, 1, ...
    ``callback(k, x_k)`` sees every iterate.
    """
    config = config or LsqrConfig()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if b.size != op.rows:
        raise ValueError(f"right-hand side has {b.size} entries, operator has {op.rows} rows")
    _finite(b, "right-hand side")

    x = np.zeros(op.cols, dtype=DTYPE)
    bnorm = beta = euclidean_norm(b)
    if beta == 0.0:
        return LsqrResult(x, 0, 0.0, Termination.CONVERGED, [0.0])
    u = b / beta
    v = np.asarray(op.apply_transpose(u), dtype=DTYPE).ravel()
    _finite(v, "transpose product")
    alpha = euclidean_norm(v)
    if alpha == 0.0:
        # b is orthogonal to the range: x = 0 is already optimal
        return LsqrResult(x, 0, bnorm, Termination.BREAKDOWN, [bnorm])
    v = v / alpha
    w = v.copy()
    phibar, rhobar = beta, alpha
    anorm2 = 0.0
    history = [bnorm]
    cap = config.iteration_cap(op)

    for itn in range(1, cap + 1):
        u = np.asarray(op.apply(v), dtype=DTYPE).ravel() - alpha * u
        _finite(u, "operator product")
        beta = euclidean_norm(u)
        if beta > 0.0:
            u = u / beta
        anorm2 += alpha * alpha + beta * beta

        v = np.asarray(op.apply_transpose(u), dtype=DTYPE).ravel() - beta * v
        _finite(v, "transpose product")
        alpha = euclidean_norm(v)
        if alpha > 0.0:
            v = v / alpha

        # plane rotation eliminating the subdiagonal beta
        rho = math.hypot(rhobar, beta)
        c, s = rhobar / rho, beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar

        x = x + (phi / rho) * w
        w = v - (theta / rho) * w
        if callback is not None:
            callback(itn, x)

        rnorm = phibar
        arnorm = alpha * abs(c) * phibar
        anorm = math.sqrt(anorm2)
        xnorm = euclidean_norm(x)
        history.append(rnorm)

        if rnorm <= config.btol * bnorm + config.atol * anorm * xnorm:
            return LsqrResult(x, itn, rnorm, Termination.CONVERGED, history, anorm)
        if rnorm > 0.0 and arnorm <= config.atol * anorm * rnorm:
            return LsqrResult(x, itn, rnorm, Termination.CONVERGED, history, anorm)
        if alpha == 0.0 or beta == 0.0:
            return LsqrResult(x, itn, rnorm, Termination.BREAKDOWN, history, anorm)

    return LsqrResult(x, cap, history[-1], Termination.MAX_ITERATIONS, history, math.sqrt(anorm2))
