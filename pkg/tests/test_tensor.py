"""Tensor kernel tests: matmul/svd/norm against independent oracles, RNG
reproducibility, and the binary container format."""

import numpy as np
import pytest

from occomp.errors import DimensionError, FormatError, ParameterError
from occomp.tensor import (
    RngStream,
    frobenius_norm,
    load_tensor,
    matmul,
    random_normal,
    save_tensor,
    svd,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_hand_arithmetic(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = rng.standard_normal((5, 4))
            b = rng.standard_normal((4, 6))
            c = rng.standard_normal((6, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert frobenius_norm(left - right) < 1e-10 * frobenius_norm(left)


class TestSvd:
    def test_diagonal(self):
        res = svd(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(res.singular_values, [3.0, 1.0], atol=1e-12)

    def test_rank_one(self):
        u = np.array([1.0, 2.0, 2.0])
        v = np.array([3.0, 4.0])
        res = svd(np.outer(u, v))
        expected = np.linalg.norm(u) * np.linalg.norm(v)
        np.testing.assert_allclose(res.singular_values, [expected, 0.0], atol=1e-12)

    def test_reconstruction_and_eigen_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((16, 8))
        res = svd(a)
        recon = res.reconstruct()
        assert frobenius_norm(a - recon) < 1e-8 * frobenius_norm(a)
        # singular values^2 == eigenvalues of a^T a from the symmetric-eigen path
        eigvals = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
        np.testing.assert_allclose(res.singular_values**2, eigvals, atol=1e-8)

    def test_orthonormal_factors(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((12, 7))
        res = svd(a)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(7), atol=1e-8)
        np.testing.assert_allclose(res.v.T @ res.v, np.eye(7), atol=1e-8)

    def test_singular_values_sorted_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            s = svd(rng.standard_normal((9, 6))).singular_values
            assert np.all(s >= 0)
            assert np.all(np.diff(s) <= 0)

    def test_truncation_identity(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((10, 10))
        res = svd(a)
        for r in (1, 3, 7):
            err_sq = frobenius_norm(a - res.reconstruct(r)) ** 2
            tail = float(np.sum(res.singular_values[r:] ** 2))
            assert abs(err_sq - tail) < 1e-8 * max(tail, 1.0)

    def test_non_2d_rejected(self):
        with pytest.raises(DimensionError):
            svd(np.zeros(3))


class TestRandomNormal:
    def test_identical_seed_identical_stream(self):
        a = random_normal(RngStream(1), [4])
        b = random_normal(RngStream(1), [4])
        np.testing.assert_array_equal(a, b)

    def test_moments(self):
        x = random_normal(RngStream(7), [1_000_000])
        assert abs(x.mean()) < 0.01
        assert abs(x.var() - 1.0) < 0.02

    def test_degenerate_spread(self):
        x = random_normal(RngStream(8), [100], mu=5.0, sigma=1e-9)
        assert np.all(x >= 5 - 1e-7) and np.all(x <= 5 + 1e-7)

    def test_sigma_validation(self):
        with pytest.raises(ParameterError):
            random_normal(RngStream(9), [4], sigma=0.0)

    def test_derived_streams_differ(self):
        base = RngStream(10)
        a = base.derive(0).standard_normal(8)
        b = base.derive(1).standard_normal(8)
        assert not np.array_equal(a, b)
        # same derivation key reproduces the child exactly
        c = RngStream(10).derive(0).standard_normal(8)
        np.testing.assert_array_equal(a, c)


class TestFrobeniusNorm:
    def test_hand_value(self):
        assert frobenius_norm(np.array([[3.0, 4.0]])) == pytest.approx(5.0)

    def test_zero(self):
        assert frobenius_norm(np.zeros((4, 5))) == 0.0

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((6, 7, 2))
        direct = np.sqrt(sum(x * x for x in a.ravel()))
        assert abs(frobenius_norm(a) - direct) < 1e-12


class TestContainer:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        for shape in [(3,), (4, 5), (2, 3, 4)]:
            a = rng.standard_normal(shape)
            path = tmp_path / "t.tsr"
            save_tensor(path, a)
            b = load_tensor(path)
            assert b.shape == a.shape
            assert np.array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tsr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.tsr"
        save_tensor(path, np.ones((4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError):
            load_tensor(path)
