"""Lower bounds on reconstructing a network's input from dithered features."""
from .dct import dct2, idct2, lowpass_filter
from .hcr import (
    BoundReport,
    CustomNoise,
    GaussianIid,
    PerturbationOutcome,
    algorithm1,
    cramer_rao_bounds,
    gaussian_denominator,
    hcr_std_bound,
    mc_denominator,
    mse_bound,
    per_mode_bounds,
)
from .lsqr import LinearOperator, LsqrConfig, lsqr_solve
from .nn import Model, Network, classify, jvp, load_weights, mnist_mlp, save_weights, vjp
from .tensor import RngStream, euclidean_norm, sample_normal, sample_rademacher

__version__ = "0.1.0"
