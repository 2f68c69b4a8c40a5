"""Metric contracts against brute-force oracles: scalar kernel arithmetic,
double-loop MMD, statistical sanity of KID, and cosine bounds."""

from __future__ import annotations

import numpy as np
import pytest

from styledistill.metrics import (
    FeatureSet,
    KidEstimate,
    cosine_score,
    kid,
    mmd2_unbiased,
    poly_kernel,
)


def naive_mmd2(X: np.ndarray, Y: np.ndarray, dim: int) -> float:
    """Double-loop oracle, scalar arithmetic only."""

    def k(a, b):
        return (sum(float(x) * float(y) for x, y in zip(a, b)) / dim + 1.0) ** 3

    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j)
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j)
    xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n))
    return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2.0 * xy / (m * n)


class TestPolyKernel:
    def test_orthogonal_unit_vectors(self):
        assert poly_kernel(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 2) == 1.0

    def test_self_kernel(self):
        assert poly_kernel(np.array([1.0, 0.0]), np.array([1.0, 0.0]), 2) == 3.375

    def test_matches_direct_formula_on_random_vectors(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x, y = rng.standard_normal(8), rng.standard_normal(8)
            direct = (sum(float(a) * float(b) for a, b in zip(x, y)) / 8 + 1.0) ** 3
            assert poly_kernel(x, y, 8) == pytest.approx(direct, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            poly_kernel(np.ones(3), np.ones(4), 3)


class TestMmd2Unbiased:
    def test_hand_case_identical_basis_sets(self):
        e = np.eye(2)
        fs = FeatureSet(e, 2)
        assert mmd2_unbiased(fs, fs) == -2.375

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            m, n = rng.integers(2, 65, size=2)
            dim = int(rng.integers(2, 33))
            X = rng.standard_normal((m, dim))
            Y = rng.standard_normal((n, dim)) + rng.uniform(-1, 1)
            value = mmd2_unbiased(FeatureSet(X, dim), FeatureSet(Y, dim))
            assert value == pytest.approx(naive_mmd2(X, Y, dim), abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(3)
        X = FeatureSet(rng.standard_normal((10, 4)), 4)
        Y = FeatureSet(rng.standard_normal((12, 4)) + 0.5, 4)
        assert mmd2_unbiased(X, Y) == pytest.approx(mmd2_unbiased(Y, X), abs=1e-12)

    def test_near_zero_for_same_distribution(self):
        rng = np.random.default_rng(11)
        X = FeatureSet(rng.standard_normal((10**4, 4)), 4)
        Y = FeatureSet(rng.standard_normal((10**4, 4)), 4)
        estimate = kid(X, Y, subset_size=100, n_subsets=100, seed=0)
        assert abs(estimate.value) <= 3 * estimate.std_error

    def test_size_preconditions(self):
        one = FeatureSet(np.ones((1, 3)), 3)
        two = FeatureSet(np.ones((2, 3)), 3)
        with pytest.raises(ValueError):
            mmd2_unbiased(one, two)
        with pytest.raises(ValueError):
            mmd2_unbiased(two, FeatureSet(np.ones((2, 4)), 4))


class TestKid:
    def test_degenerate_subsetting_equals_mmd2(self):
        rng = np.random.default_rng(2)
        X = FeatureSet(rng.standard_normal((8, 3)), 3)
        Y = FeatureSet(rng.standard_normal((8, 3)), 3)
        estimate = kid(X, Y, subset_size=8, n_subsets=1, seed=0)
        assert estimate.value == pytest.approx(mmd2_unbiased(X, Y), abs=1e-12)
        assert estimate.std_error == 0.0

    def test_same_seed_reproduces(self):
        rng = np.random.default_rng(9)
        X = FeatureSet(rng.standard_normal((50, 4)), 4)
        Y = FeatureSet(rng.standard_normal((50, 4)), 4)
        a = kid(X, Y, subset_size=20, n_subsets=10, seed=7)
        b = kid(X, Y, subset_size=20, n_subsets=10, seed=7)
        assert a == b

    def test_separated_clouds_score_higher(self):
        rng = np.random.default_rng(4)
        base = rng.standard_normal((200, 4))
        overlapping = FeatureSet(rng.standard_normal((200, 4)) + 0.1, 4)
        separated = FeatureSet(rng.standard_normal((200, 4)) + 4.0, 4)
        ref = FeatureSet(base, 4)
        near = kid(ref, overlapping, subset_size=100, n_subsets=20, seed=1)
        far = kid(ref, separated, subset_size=100, n_subsets=20, seed=1)
        assert far.value > near.value

    def test_clamps_subset_size(self):
        rng = np.random.default_rng(6)
        X = FeatureSet(rng.standard_normal((12, 3)), 3)
        Y = FeatureSet(rng.standard_normal((30, 3)), 3)
        estimate = kid(X, Y, subset_size=100, n_subsets=5, seed=0)
        assert estimate.subset_size == 12

    def test_order_invariance_within_sets(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((20, 4))
        Y = rng.standard_normal((20, 4))
        perm = rng.permutation(20)
        a = kid(FeatureSet(X, 4), FeatureSet(Y, 4), subset_size=20, n_subsets=1, seed=0)
        b = kid(FeatureSet(X[perm], 4), FeatureSet(Y[perm], 4),
                subset_size=20, n_subsets=1, seed=0)
        assert a.value == pytest.approx(b.value, abs=1e-12)


class TestCosineScore:
    def test_identical_unit_vectors(self):
        assert cosine_score(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_antipodal(self):
        v = np.array([0.3, -0.4, 0.5])
        assert cosine_score(v, -v) == -1.0

    def test_bounded_on_random_vectors(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            a = rng.standard_normal(int(rng.integers(2, 40))) * rng.uniform(0.01, 100)
            b = rng.standard_normal(a.shape[0]) * rng.uniform(0.01, 100)
            assert -1.0 <= cosine_score(a, b) <= 1.0

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_score(np.zeros(3), np.ones(3))
