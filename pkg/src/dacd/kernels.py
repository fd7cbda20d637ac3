"""Gaussian kernels and their convex combinations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MultiKernel:
    """Convex combination ``sum_u beta_u * k_u`` of Gaussian kernels.

    ``bandwidths`` holds the sigma of each kernel and ``coefficients`` the
    weights beta, which must lie on the probability simplex.
    """

    bandwidths: tuple
    coefficients: tuple

    def __post_init__(self):
        sig = np.asarray(self.bandwidths, dtype=np.float64)
        beta = np.asarray(self.coefficients, dtype=np.float64)
        object.__setattr__(self, "bandwidths", tuple(float(s) for s in sig))
        object.__setattr__(self, "coefficients", tuple(float(b) for b in beta))
        if sig.ndim != 1 or sig.size < 1:
            raise ValueError("a multi-kernel needs at least one bandwidth")
        if beta.shape != sig.shape:
            raise ValueError(f"{sig.size} bandwidths but {beta.size} coefficients")
        if not np.all(np.isfinite(sig)) or np.any(sig <= 0):
            raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")
        if np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise ValueError(f"coefficients must lie on the simplex, got {self.coefficients}")

    def __len__(self):
        return len(self.bandwidths)

    @property
    def sigma(self):
        return np.asarray(self.bandwidths)

    @property
    def beta(self):
        return np.asarray(self.coefficients)

    def with_coefficients(self, beta):
        return MultiKernel(self.bandwidths, tuple(beta))


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"vector shapes differ: {x.shape} vs {y.shape}")
    return x, y


def gaussian_eval(x, y, sigma):
    """``exp(-||x - y||^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, y = _check_pair(x, y)
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def gaussian_from_sqdist(sqdist, sigma):
    """Per-kernel values for precomputed squared distances.

    ``sigma`` may be an array of bandwidths; the kernel axis is prepended.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    sqdist = np.asarray(sqdist, dtype=np.float64)
    scale = -0.5 / sigma**2
    return np.exp(scale.reshape(sigma.shape + (1,) * sqdist.ndim) * sqdist)


def multi_kernel_eval(x, y, mk):
    x, y = _check_pair(x, y)
    d2 = np.sum((x - y) ** 2)
    return float(mk.beta @ gaussian_from_sqdist(d2, mk.sigma))


def sqdist_matrix(a, b):
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def gram(a, b, mk):
    """Multi-kernel Gram matrix between rows of ``a`` and ``b``."""
    d = sqdist_matrix(a, b)
    return np.tensordot(mk.beta, gaussian_from_sqdist(d, mk.sigma), axes=1)


def median_heuristic(samples):
    """Bandwidth with ``2 sigma^2`` equal to the median pairwise squared distance.

    Falls back to 1.0 when that median is zero.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 samples")
    iu = np.triu_indices(x.shape[0], k=1)
    med = float(np.median(sqdist_matrix(x, x)[iu]))
    if med <= 0:
        return 1.0
    return float(np.sqrt(med / 2.0))


def make_kernel_family(reference_samples, n=5, spread=2.0):
    """Geometric ladder of ``n`` bandwidths centred on the median heuristic."""
    if n < 1:
        raise ValueError("kernel family needs n >= 1")
    center = median_heuristic(reference_samples)
    powers = np.arange(n) - (n - 1) / 2.0
    sigmas = center * float(spread) ** powers
    return MultiKernel(tuple(sigmas), tuple(np.full(n, 1.0 / n)))
