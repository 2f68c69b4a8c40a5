"""Distribution and similarity metrics over feature vectors.

Kernel Inception Distance is the mean of the unbiased polynomial-kernel MMD^2
estimator over seeded subsamples; cosine scores cover both image-image and
image-text similarity. All operations are pure functions over plain arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

KID_DEFAULT_SUBSET_SIZE = 100
KID_DEFAULT_N_SUBSETS = 100
POLY_KERNEL_DEGREE = 3


@dataclass(frozen=True)
class FeatureSet:
    """Non-empty list of equal-length feature vectors plus extractor identity."""

    vectors: np.ndarray
    dim: int
    source_tag: str = ""

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"vectors must be 2-D (n, dim), got ndim={arr.ndim}")
        if arr.shape[0] == 0:
            raise ValueError("feature set must be non-empty")
        if arr.shape[1] != self.dim:
            raise ValueError(f"vectors have length {arr.shape[1]}, declared dim {self.dim}")
        object.__setattr__(self, "vectors", arr)

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class KidEstimate:
    """Subsampled KID value with its spread across subsets."""

    value: float
    subset_size: int
    n_subsets: int
    std_error: float
    seed: int


def poly_kernel(x: np.ndarray, y: np.ndarray, dim: int, degree: int = POLY_KERNEL_DEGREE) -> float:
    """Polynomial kernel ((x . y) / dim + 1) ** degree."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (dim,) or y.shape != (dim,):
        raise ValueError(f"expected two length-{dim} vectors, got {x.shape} and {y.shape}")
    return float((float(np.dot(x, y)) / dim + 1.0) ** degree)


def _gram(a: np.ndarray, b: np.ndarray, dim: int, degree: int) -> np.ndarray:
    return ((a @ b.T) / dim + 1.0) ** degree


def mmd2_unbiased(X: FeatureSet, Y: FeatureSet, degree: int = POLY_KERNEL_DEGREE) -> float:
    """Unbiased squared-MMD estimator under the polynomial kernel.

    (1/(m(m-1))) sum_{i!=j} k(x_i, x_j) + (1/(n(n-1))) sum_{i!=j} k(y_i, y_j)
    - (2/(mn)) sum_{i,j} k(x_i, y_j), with m, n >= 2.
    """
    if X.dim != Y.dim:
        raise ValueError(f"feature dims differ: {X.dim} vs {Y.dim}")
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ValueError(f"both sets need at least 2 vectors, got {m} and {n}")
    k_xx = _gram(X.vectors, X.vectors, X.dim, degree)
    k_yy = _gram(Y.vectors, Y.vectors, Y.dim, degree)
    k_xy = _gram(X.vectors, Y.vectors, X.dim, degree)
    term_x = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_y = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    term_xy = 2.0 * k_xy.sum() / (m * n)
    return float(term_x + term_y - term_xy)


def kid(
    X: FeatureSet,
    Y: FeatureSet,
    subset_size: int = KID_DEFAULT_SUBSET_SIZE,
    n_subsets: int = KID_DEFAULT_N_SUBSETS,
    seed: int = 0,
    degree: int = POLY_KERNEL_DEGREE,
) -> KidEstimate:
    """Mean unbiased MMD^2 over seeded without-replacement subsamples.

    subset_size clamps to min(|X|, |Y|) when the sets are smaller than asked.
    """
    if subset_size < 2:
        raise ValueError(f"subset_size must be >= 2, got {subset_size}")
    if n_subsets < 1:
        raise ValueError(f"n_subsets must be >= 1, got {n_subsets}")
    effective = min(subset_size, len(X), len(Y))
    if effective != subset_size:
        log.info("kid: clamping subset_size %d to %d (set sizes %d, %d)",
                 subset_size, effective, len(X), len(Y))
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_subsets):
        xi = rng.choice(len(X), size=effective, replace=False)
        yi = rng.choice(len(Y), size=effective, replace=False)
        values.append(
            mmd2_unbiased(
                FeatureSet(X.vectors[xi], X.dim, X.source_tag),
                FeatureSet(Y.vectors[yi], Y.dim, Y.source_tag),
                degree=degree,
            )
        )
    values = np.asarray(values)
    std_error = 0.0
    if n_subsets > 1:
        std_error = float(values.std(ddof=1) / np.sqrt(n_subsets))
    return KidEstimate(
        value=float(values.mean()),
        subset_size=effective,
        n_subsets=n_subsets,
        std_error=std_error,
        seed=seed,
    )


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; raises on zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
