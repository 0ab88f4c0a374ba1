import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnvae.rpca import (
    MaskConfig, RpcaConfig, apply_mask, enhance, hard_mask, mask_threshold, rpca, rpca_lambda,
    rpca_objective, soft_mask,
)


def planted(seed=0):
    g = np.random.default_rng(seed)
    u = np.abs(g.standard_normal(50))
    v = np.abs(g.standard_normal(50))
    low = 10.0 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    sparse = np.zeros((50, 50))
    sparse.flat[g.choice(2500, 5, replace=False)] = 25.0
    return low, sparse


class TestRpca:
    @pytest.mark.parametrize("seed", range(3))
    def test_planted_recovery(self, seed):
        low, sparse = planted(seed)
        dec = rpca(low + sparse, RpcaConfig(lambda_scale=1.0))
        assert dec.converged and dec.iterations <= 500
        assert np.linalg.norm(dec.l - low) / np.linalg.norm(low) <= 1e-3
        assert dec.residual <= 1e-7

    def test_zero(self):
        dec = rpca(np.zeros((4, 3)))
        assert np.all(dec.l == 0) and np.all(dec.s == 0) and dec.iterations == 0

    def test_lambda_formula(self):
        assert rpca_lambda((513, 100), 0.3) == pytest.approx(0.013245, abs=1e-6)
        assert rpca_lambda((100, 513), 0.3) == 0.3 / np.sqrt(513)

    def test_non_convergence_flagged(self):
        low, sparse = planted(1)
        dec = rpca(low + sparse, RpcaConfig(lambda_scale=1.0, max_iter=3))
        assert not dec.converged and dec.iterations == 3

    def test_objective_settles(self):
        # once the constraint is (nearly) met, accepted iterates do not increase the objective
        low, sparse = planted(2)
        m = low + sparse
        lam = rpca_lambda(m.shape, 1.0)
        objs = []
        for it in range(8, 20):
            d = rpca(m, RpcaConfig(lambda_scale=1.0, max_iter=it, tol=1e-14))
            objs.append(rpca_objective(d.l, d.s, lam))
        assert all(b <= a + 1e-8 * abs(a) for a, b in zip(objs, objs[1:]))

    def test_homogeneity(self):
        m = np.abs(np.random.default_rng(3).standard_normal((30, 20)))
        a = enhance(m)
        b = enhance(4.0 * m)
        np.testing.assert_allclose(b[2].l, 4.0 * a[2].l, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(b[1], a[1], atol=1e-6)
        np.testing.assert_allclose(b[0], 4.0 * a[0], rtol=1e-5, atol=1e-7)


class TestMask:
    def test_threshold_values(self):
        assert abs(mask_threshold(1.0) - np.sqrt(0.5)) <= 1e-12
        assert mask_threshold(0.0) == 0.0
        assert mask_threshold(2.0) == pytest.approx(np.sqrt(0.8))
        vals = [mask_threshold(g) for g in np.linspace(0, 100, 200)]
        assert all(b > a for a, b in zip(vals, vals[1:])) and vals[-1] < 1

    def test_negative_gain(self):
        with pytest.raises(ValueError):
            mask_threshold(-0.1)

    def test_half_at_threshold(self):
        m = np.array([[2.0]])
        s = m * mask_threshold(1.0)
        assert soft_mask(s, m)[0, 0] == 0.5

    def test_reference_point(self):
        w = soft_mask(np.array([[0.9]]), np.array([[1.0]]), MaskConfig(1.0, 20.0))
        assert w[0, 0] == pytest.approx(0.979324, abs=1e-6)

    def test_zero_magnitude_bins_suppressed(self):
        w = soft_mask(np.array([[0.3]]), np.array([[0.0]]))
        assert w[0, 0] == pytest.approx(1 / (1 + np.exp(20 * np.sqrt(0.5))))

    def test_sharp_limit_matches_hard_mask(self):
        g = np.random.default_rng(4)
        low = np.abs(g.standard_normal((40, 40)))
        sp = np.abs(g.standard_normal((40, 40))) * (g.random((40, 40)) < 0.4)
        m = np.sqrt(low ** 2 + sp ** 2)
        ratio = sp / m
        off = np.abs(ratio - mask_threshold(1.0)) > 1e-3
        w = soft_mask(sp, m, MaskConfig(1.0, 1e4))
        hard = hard_mask(sp, low, 1.0)
        agree = np.abs(w - hard)[off] <= 1e-3
        assert agree.mean() >= 0.999

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_mask(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            apply_mask(np.ones((2, 2)), np.ones((3, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 10))
    def test_monotone_and_open_interval(self, r1, r2, g):
        m = np.ones((1, 2))
        s = np.array([[min(r1, r2), max(r1, r2)]])
        w = soft_mask(s, m, MaskConfig(g, 20.0))
        assert w[0, 0] <= w[0, 1]
        assert np.all((w >= 0) & (w <= 1))
        w_hi = soft_mask(s, m, MaskConfig(g + 1.0, 20.0))
        assert np.all(w_hi <= w)


class TestApplyMask:
    def test_ones_zeros(self):
        m = np.abs(np.random.default_rng(5).standard_normal((3, 4)))
        np.testing.assert_array_equal(apply_mask(np.ones_like(m), m), m)
        assert np.all(apply_mask(np.zeros_like(m), m) == 0)

    def test_elementwise_product_bounded(self):
        g = np.random.default_rng(6)
        m = np.abs(g.standard_normal((5, 5)))
        w = soft_mask(g.standard_normal((5, 5)), m)
        out = apply_mask(w, m)
        np.testing.assert_array_equal(out, w * m)
        assert np.all(out <= m) and np.all(out >= 0)
