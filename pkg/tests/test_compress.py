"""Operator-suite tests: every transform against an independent oracle
(full sort, exhaustive codeword search, singular spectra, converged ALS)."""

from itertools import product

import numpy as np
import pytest

from occomp.compress import (
    CompressionSpec,
    apply,
    compression_ratio,
    prune_magnitude,
    quantize_binary,
    svd_truncate,
    tiled_svd,
    tiled_svd_param_count,
    tucker2_decompose,
)
from occomp.errors import ParameterError
from occomp.tensor import RngStream, frobenius_norm, svd


class TestPruneMagnitude:
    def test_zero_rate_identity(self):
        w = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(prune_magnitude(w, 0.0), w)

    def test_order_statistics_by_hand(self):
        out = prune_magnitude(np.array([1.0, -3.0, 2.0, 0.5]), 0.5)
        np.testing.assert_array_equal(out, [0.0, -3.0, 2.0, 0.0])

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = rng.standard_normal(10)
            p = rng.uniform(0, 1)
            out = prune_magnitude(w, p)
            k = int(np.floor(p * 10))
            assert (out == 0).sum() >= k
            oracle = w.copy()
            oracle[np.argsort(np.abs(w), kind="stable")[:k]] = 0.0
            np.testing.assert_array_equal(out, oracle)

    def test_tie_break_lowest_index_first(self):
        w = np.array([1.0, -1.0, 1.0, 2.0])
        out = prune_magnitude(w, 0.5)
        np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 2.0])

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal(37)
        once = prune_magnitude(w, 0.4)
        np.testing.assert_array_equal(prune_magnitude(once, 0.4), once)

    def test_epsilon_support(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(64) + 0.1  # keep |w| away from 0
        out = prune_magnitude(w, 0.25)
        eps = out / w - 1.0
        assert set(np.round(eps, 12)) <= {-1.0, 0.0}


def exhaustive_quantize(w, q):
    """Global optimum over all sign matrices with least-squares scales."""
    best = np.inf
    for bits in product([-1.0, 1.0], repeat=q * w.size):
        binaries = np.array(bits).reshape(q, w.size)
        alphas, *_ = np.linalg.lstsq(binaries.T, w, rcond=None)
        best = min(best, float(np.sum((w - alphas @ binaries) ** 2)))
    return best


class TestQuantizeBinary:
    def test_q1_closed_form_small(self):
        form = quantize_binary(np.array([1.0, -2.0, 3.0]), 1)
        np.testing.assert_allclose(form.alphas, [2.0])
        np.testing.assert_array_equal(form.binaries[0], [1.0, -1.0, 1.0])
        np.testing.assert_allclose(form.reconstruct(), [2.0, -2.0, 2.0])

    def test_q1_closed_form_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 17))
            w = rng.standard_normal(n)
            form = quantize_binary(w, 1)
            assert form.alphas[0] == pytest.approx(np.abs(w).mean(), abs=1e-14)
            np.testing.assert_array_equal(form.binaries[0], np.where(w >= 0, 1.0, -1.0))

    def test_q1_matches_exhaustive_sign_search(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = rng.standard_normal(8)
            form = quantize_binary(w, 1)
            assert form.objective <= exhaustive_quantize(w, 1) + 1e-12

    def test_q2_against_exhaustive(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            w = rng.standard_normal(4)
            form = quantize_binary(w, 2)
            best = exhaustive_quantize(w, 2)
            assert form.objective <= 1.05 * best + 1e-12

    def test_q2_beats_greedy_only(self):
        w = np.array([0.5, 1.5, -2.0, 1.0])
        form = quantize_binary(w, 2)
        # independent greedy-only objective
        r = w.copy()
        greedy = np.zeros_like(w)
        for _ in range(2):
            b = np.where(r >= 0, 1.0, -1.0)
            a = np.abs(r).mean()
            greedy += a * b
            r = w - greedy
        greedy_obj = float(np.sum((w - greedy) ** 2))
        assert form.objective <= greedy_obj + 1e-12
        assert form.objective <= 1.05 * exhaustive_quantize(w, 2)

    def test_objective_monotone_per_iteration(self):
        rng = np.random.default_rng(6)
        for q in (1, 2, 3, 4):
            w = rng.standard_normal(200)
            hist = quantize_binary(w, q).objective_history
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_reconstruction_shape_and_objective_decreases_with_q(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((8, 16))
        objs = []
        for q in (1, 2, 3):
            form = quantize_binary(w, q)
            assert form.reconstruct().shape == (8, 16)
            objs.append(form.objective)
        assert objs[0] > objs[1] > objs[2]

    def test_bit_bound(self):
        with pytest.raises(ParameterError):
            quantize_binary(np.ones(4), 17)


class TestSvdTruncate:
    def test_diagonal(self):
        out = svd_truncate(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(out, np.diag([3.0, 0.0]), atol=1e-12)
        assert frobenius_norm(np.diag([3.0, 1.0]) - out) == pytest.approx(1.0)

    def test_full_rank_identity(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((6, 9))
        assert frobenius_norm(w - svd_truncate(w, 6)) < 1e-8 * frobenius_norm(w)

    def test_residual_matches_singular_spectrum(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((16, 8))
        err_sq = frobenius_norm(w - svd_truncate(w, 3)) ** 2
        tail = float(np.sum(svd(w).singular_values[3:] ** 2))
        assert abs(err_sq - tail) < 1e-8 * tail

    def test_idempotent(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((10, 7))
        once = svd_truncate(w, 3)
        twice = svd_truncate(once, 3)
        assert frobenius_norm(once - twice) < 1e-8 * frobenius_norm(once)

    def test_eckart_young_dominance(self):
        # no other rank-R matrix in reach beats the truncation error
        rng = np.random.default_rng(11)
        w = rng.standard_normal((12, 9))
        best = frobenius_norm(w - svd_truncate(w, 3))
        res = svd(w)
        for trial in range(20):
            u = res.u[:, :3] + 0.1 * rng.standard_normal((12, 3))
            v = res.v[:, :3] * res.singular_values[:3] + 0.1 * rng.standard_normal((9, 3))
            rival = u @ v.T
            assert frobenius_norm(w - rival) >= best - 1e-10

    def test_rank_validation(self):
        with pytest.raises(ParameterError):
            svd_truncate(np.eye(4), 0)
        with pytest.raises(ParameterError):
            svd_truncate(np.eye(4), 5)


class TestTiledSvd:
    def test_single_tile_equals_global(self):
        rng = np.random.default_rng(12)
        w = rng.standard_normal((8, 6))
        np.testing.assert_allclose(tiled_svd(w, 8, 6, 2), svd_truncate(w, 2), atol=1e-10)

    def test_blockwise_structure_beats_global_at_equal_budget(self):
        # four independent rank-1 tiles: tiling at r=1 is exact, while a
        # global truncation spending the same parameter count cannot be
        rng = np.random.default_rng(13)
        m = n = 8
        w = np.zeros((m, n))
        for bi in range(2):
            for bj in range(2):
                u = rng.standard_normal(4)
                v = rng.standard_normal(4)
                w[bi * 4 : bi * 4 + 4, bj * 4 : bj * 4 + 4] = np.outer(u, v)
        tiled = tiled_svd(w, 4, 4, 1)
        assert frobenius_norm(w - tiled) < 1e-10
        tiled_params = tiled_svd_param_count(m, n, 4, 4, 1)
        global_rank = tiled_params // (m + n)
        assert global_rank < np.linalg.matrix_rank(w)
        assert frobenius_norm(w - svd_truncate(w, global_rank)) > 1e-3

    def test_param_accounting(self):
        assert tiled_svd_param_count(8, 8, 4, 4, 1) == 4 * 1 * (4 + 4)

    def test_variance_grows_with_tile_count(self):
        # same overall 4x ratio, more tiles -> more extreme values
        rng = RngStream(14)
        w = rng.standard_normal((256, 256))
        configs = [(256, 256, 32), (64, 64, 8), (8, 8, 1)]  # all n_tile/(2r) = 4
        variances = []
        for tr, tc, r in configs:
            out = tiled_svd(np.asarray(w), tr, tc, r)
            variances.append(out.var())
        assert variances[0] < variances[1] < variances[2]

    def test_non_dividing_tiles_rejected(self):
        with pytest.raises(ParameterError):
            tiled_svd(np.ones((8, 8)), 3, 4, 1)


def als_oracle(k, rank_s, rank_t, iters=300, tol=1e-13):
    """Independent alternating solver on the gram matrices, run to convergence."""
    d1, d2, s, t = k.shape

    def leading(mat, r):
        _, vecs = np.linalg.eigh(mat @ mat.T)
        return vecs[:, ::-1][:, :r]

    ps = leading(k.transpose(2, 0, 1, 3).reshape(s, -1), rank_s)
    pt = leading(k.transpose(3, 0, 1, 2).reshape(t, -1), rank_t)
    prev = np.inf
    err = prev
    for _ in range(iters):
        kt = np.einsum("ijst,tv->ijsv", k, pt)
        ps = leading(kt.transpose(2, 0, 1, 3).reshape(s, -1), rank_s)
        ks = np.einsum("ijst,su->ijut", k, ps)
        pt = leading(ks.transpose(3, 0, 1, 2).reshape(t, -1), rank_t)
        core = np.einsum("ijst,su,tv->ijuv", k, ps, pt)
        recon = np.einsum("ijuv,su,tv->ijst", core, ps, pt)
        err = frobenius_norm(k - recon)
        if prev - err < tol * max(prev, 1.0):
            break
        prev = err
    return err


class TestTucker2:
    def test_full_ranks_exact(self):
        rng = np.random.default_rng(15)
        k = rng.standard_normal((3, 3, 5, 6))
        form = tucker2_decompose(k, 5, 6)
        assert frobenius_norm(k - form.reconstruct()) < 1e-8 * frobenius_norm(k)

    def test_separable_kernel_rank_one_recovery(self):
        rng = np.random.default_rng(16)
        core = rng.standard_normal((3, 3, 1, 1))
        p = rng.standard_normal((5, 1))
        q = rng.standard_normal((7, 1))
        k = np.einsum("ijuv,su,tv->ijst", core, p, q)
        form = tucker2_decompose(k, 1, 1)
        assert frobenius_norm(k - form.reconstruct()) < 1e-8 * frobenius_norm(k)

    def test_orthonormal_projections(self):
        rng = np.random.default_rng(17)
        k = rng.standard_normal((3, 3, 8, 8))
        form = tucker2_decompose(k, 4, 3)
        np.testing.assert_allclose(form.ps.T @ form.ps, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(form.pt.T @ form.pt, np.eye(3), atol=1e-8)
        assert form.core.shape == (3, 3, 4, 3)

    def test_refinement_beats_projection_and_matches_als_oracle(self):
        rng = np.random.default_rng(18)
        for _ in range(3):
            k = rng.standard_normal((3, 3, 8, 8))
            form = tucker2_decompose(k, 4, 4)
            err_default = frobenius_norm(k - form.reconstruct())
            err_projection_init = form.error_history[0]
            assert err_default <= err_projection_init + 1e-12
            # run to convergence: must land on the oracle's fixed point
            converged = tucker2_decompose(k, 4, 4, sweeps=300, tol=1e-13)
            err_converged = frobenius_norm(k - converged.reconstruct())
            assert err_converged <= err_default + 1e-12
            oracle = als_oracle(k, 4, 4)
            assert abs(err_converged - oracle) <= 1e-6 * oracle

    def test_error_history_monotone(self):
        rng = np.random.default_rng(19)
        k = rng.standard_normal((3, 3, 10, 6))
        hist = tucker2_decompose(k, 5, 3).error_history
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_rank_validation(self):
        with pytest.raises(ParameterError):
            tucker2_decompose(np.ones((3, 3, 4, 4)), 5, 2)


class TestCompressionRatio:
    def test_tucker2_paper_configuration(self):
        spec = CompressionSpec(variant="tucker2", rank_s=32, rank_t=32)
        ratio = compression_ratio(spec, (3, 3, 64, 64))
        assert ratio == pytest.approx(36864 / 13312, abs=1e-12)
        assert ratio == pytest.approx(2.77, abs=0.01)

    def test_svd_expansion_warns(self):
        spec = CompressionSpec(variant="svd", rank=8)
        with pytest.warns(UserWarning, match="expands"):
            ratio = compression_ratio(spec, (8, 8))
        assert ratio == pytest.approx(0.5)

    def test_prune_rate(self):
        spec = CompressionSpec(variant="prune", rate=0.9)
        assert compression_ratio(spec, (100,)) == pytest.approx(10.0)

    def test_quantize_bit_convention(self):
        spec = CompressionSpec(variant="quantize", bits=4)
        assert compression_ratio(spec, (32, 32)) == pytest.approx(8.0)

    def test_tiled_aggregate(self):
        spec = CompressionSpec(variant="tiled_svd", tile_rows=64, tile_cols=64, tile_rank=8)
        ratio = compression_ratio(spec, (64, 576))
        assert ratio == pytest.approx(64 * 576 / (9 * 8 * 128))


class TestApply:
    def test_weight_decay_closed_form(self):
        spec = CompressionSpec(variant="weight_decay", theta=0.05)
        params = {"a.w": np.array([[2.0, -4.0]])}
        out, stats = apply(spec, params, lr=0.1)
        np.testing.assert_allclose(out["a.w"], (1 - 0.1 * 0.05) * params["a.w"])
        assert stats.e_w == pytest.approx(0.005 * 3.0)

    def test_uniform_noise_zero_bound_identity(self):
        spec = CompressionSpec(variant="uniform_noise", theta=0.0)
        params = {"a.w": np.arange(6.0).reshape(2, 3)}
        out, stats = apply(spec, params, lr=0.1, rng=RngStream(1))
        np.testing.assert_array_equal(out["a.w"], params["a.w"])
        assert stats.e_w == 0.0

    def test_prune_e_w_definition(self):
        spec = CompressionSpec(variant="prune", rate=0.5)
        out, stats = apply(spec, {"a.w": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(out["a.w"], [0.0, 2.0])
        assert stats.e_w == pytest.approx(0.5)

    def test_per_layer_rates_and_fraction(self):
        spec = CompressionSpec(
            variant="prune", rate={"a.w": 1.0, "b.w": 0.0}, layers=["a.w", "b.w"]
        )
        params = {"a.w": np.arange(1.0, 5.0), "b.w": np.arange(1.0, 5.0)}
        out, _ = apply(spec, params, fraction=0.5)
        assert (out["a.w"] == 0).sum() == 2  # 1.0 * 0.5 ramp
        assert (out["b.w"] == 0).sum() == 0

    def test_delta_w_matches_independent_recompute(self):
        rng = np.random.default_rng(20)
        params = {"a.w": rng.standard_normal((6, 6)), "b.w": rng.standard_normal((4, 4))}
        spec = CompressionSpec(variant="svd", rank=2)
        out, stats = apply(spec, params)
        diff_sq = sum(float(np.sum((out[k] - params[k]) ** 2)) for k in params)
        n = sum(v.size for v in params.values())
        assert stats.delta_w == pytest.approx(diff_sq / n, rel=1e-12)

    def test_missing_layer_selection(self):
        spec = CompressionSpec(variant="prune", rate=0.5, layers=["missing.w"])
        with pytest.raises(ParameterError):
            apply(spec, {"a.w": np.ones(4)})

    def test_conv_kernel_through_lowered_view(self):
        rng = np.random.default_rng(21)
        k = rng.standard_normal((3, 3, 4, 8))
        spec = CompressionSpec(variant="svd", rank=2)
        out, _ = apply(spec, {"conv.k": k})
        lowered = out["conv.k"].transpose(3, 2, 0, 1).reshape(8, 36)
        s = svd(lowered).singular_values
        assert s[2] < 1e-8 * s[0]  # rank <= 2 after truncation

    def test_weighted_eps_is_negative_and_orders_by_strength(self):
        rng = RngStream(22)
        w = {"m.w": rng.standard_normal((128, 128))}
        means = []
        for q in (1, 2):
            _, stats = apply(CompressionSpec(variant="quantize", bits=q), dict(w))
            means.append(stats.eps_weighted_mean)
        assert means[0] < means[1] < 0

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            CompressionSpec(variant="prune", rate=1.5)
        with pytest.raises(ParameterError):
            CompressionSpec(variant="unknown")
        with pytest.raises(ParameterError):
            CompressionSpec(variant="tucker2", rank_s=0, rank_t=2)
