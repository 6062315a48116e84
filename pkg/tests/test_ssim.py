import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from texseg.ssim import (
    PatchStats,
    SsimParams,
    l2_loss,
    l2_residual,
    patch_stats,
    ssim_components,
    ssim_loss,
    ssim_map,
    ssim_patch,
    ssim_residual,
)

from component_pairs import PAIRS

P = SsimParams()


def closed_form_ssim(p, q, c1=0.01, c2=0.03):
    """Closed-form SSIM written out term by term with plain loops."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    n = len(p)
    mp = sum(p) / n
    mq = sum(q) / n
    vp = sum((a - mp) ** 2 for a in p) / n
    vq = sum((b - mq) ** 2 for b in q) / n
    cov = sum((a - mp) * (b - mq) for a, b in zip(p, q)) / n
    return ((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp ** 2 + mq ** 2 + c1) * (vp + vq + c2))


def test_params_defaults_and_validation():
    assert (P.window_size, P.c1, P.c2, P.alpha, P.beta, P.gamma) == (11, 0.01, 0.03, 1, 1, 1)
    for bad in (dict(window_size=10), dict(window_size=1), dict(c1=0), dict(c2=-1)):
        with pytest.raises(ValueError):
            SsimParams(**bad)


class TestPatchStats:
    def test_constant(self):
        s = patch_stats(np.full((3, 3), 0.5), np.full((3, 3), 0.5))
        assert (s.mu_p, s.mu_q, s.var_p, s.var_q, s.cov_pq) == (0.5, 0.5, 0.0, 0.0, 0.0)

    def test_zero_one(self):
        s = patch_stats(np.zeros((3, 3)), np.ones((3, 3)))
        assert (s.mu_p, s.mu_q, s.var_p, s.var_q, s.cov_pq) == (0.0, 1.0, 0.0, 0.0, 0.0)

    def test_hand_summed(self):
        s = patch_stats([[0, 1], [1, 0]], [[1, 0], [0, 1]])
        # mu = 2/4; var = 4 * 0.25 / 4; cov = 4 * (-0.25) / 4
        assert s == PatchStats(0.5, 0.5, 0.25, 0.25, -0.25)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            patch_stats(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=50)
    @given(arrays(float, (5, 5), elements=st.floats(0, 1)), arrays(float, (5, 5), elements=st.floats(0, 1)))
    def test_invariants(self, p, q):
        s = patch_stats(p, q)
        assert s.var_p >= 0 and s.var_q >= 0
        assert abs(s.cov_pq) <= np.sqrt(s.var_p * s.var_q) + 1e-9


class TestComponents:
    def test_identical(self, rng):
        p = rng.random((11, 11))
        l, c, s = ssim_components(patch_stats(p, p))
        assert l == pytest.approx(1, abs=1e-12) and c == pytest.approx(1, abs=1e-12)
        assert s == pytest.approx(1, abs=1e-12)

    def test_luminance_only(self):
        l, c, s = ssim_components(patch_stats(*PAIRS["l"]))
        expected_l = (2 * 0.25 * 0.75 + 0.01) / (0.25 ** 2 + 0.75 ** 2 + 0.01)
        assert l == pytest.approx(expected_l, rel=1e-12)
        assert l == pytest.approx(0.6063, abs=1e-4)
        assert c == 1.0 and s == 1.0

    def test_structure_only(self):
        l, c, s = ssim_components(patch_stats(*PAIRS["s"]))
        assert l == pytest.approx(1.0, abs=1e-12) and c == pytest.approx(1.0, abs=1e-12)
        var = 0.0625
        assert s == pytest.approx((-2 * var + 0.03) / (2 * var + 0.03), rel=1e-12)
        assert s < 0

    @pytest.mark.parametrize("which", ["l", "c", "s"])
    def test_pair_minimises_its_component(self, which):
        p, q = PAIRS[which]
        np.testing.assert_array_equal(l2_residual(p, q), 0.25)
        comps = dict(zip("lcs", ssim_components(patch_stats(p, q))))
        assert min(comps, key=comps.get) == which


class TestSsimPatch:
    def test_identity(self, rng):
        p = rng.random((11, 11))
        assert ssim_patch(p, p) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self, rng):
        for _ in range(20):
            p, q = rng.random((11, 11)), rng.random((11, 11))
            assert ssim_patch(p, q) == pytest.approx(ssim_patch(q, p), abs=1e-12)

    def test_luminance_value(self):
        assert ssim_patch(*PAIRS["l"]) == pytest.approx(closed_form_ssim(*PAIRS["l"]), abs=1e-12)

    def test_matches_closed_form(self, rng):
        for _ in range(50):
            p, q = rng.random((11, 11)), rng.random((11, 11))
            assert ssim_patch(p, q) == pytest.approx(closed_form_ssim(p, q), abs=1e-9)

    def test_exponents(self, rng):
        p = rng.random((7, 7))
        q = rng.random((7, 7)) * 0.3 + 0.5 * p
        prm = SsimParams(alpha=2.0, beta=0.5, gamma=1.0)
        l, c, s = ssim_components(patch_stats(p, q), prm)
        assert ssim_patch(p, q, prm) == pytest.approx(l ** 2 * c ** 0.5 * s, rel=1e-12)

    def test_fractional_gamma_negative_structure_rejected(self):
        with pytest.raises(ValueError):
            ssim_patch(*PAIRS["s"], SsimParams(gamma=0.5))

    @settings(max_examples=60)
    @given(arrays(float, (6, 6), elements=st.floats(0, 1)), arrays(float, (6, 6), elements=st.floats(0, 1)))
    def test_range_and_symmetry(self, p, q):
        v = ssim_patch(p, q)
        assert -1.0 <= v <= 1.0 + 1e-9
        assert v == pytest.approx(ssim_patch(q, p), abs=1e-12)
        assert ssim_patch(p, p) == pytest.approx(1.0, abs=1e-9)


class TestSsimMap:
    def test_identical_images(self, rng):
        x = rng.random((40, 33))
        m = ssim_map(x, x)
        np.testing.assert_allclose(m.ssim_map, 1.0, atol=1e-9)

    def test_single_pixel_support(self, rng):
        x = rng.random((40, 40))
        y = x.copy()
        y[20, 17] = 1.0 - y[20, 17]
        k, r = 11, 5
        changed = ssim_map(x, y).ssim_map < 1 - 1e-12
        expected = np.zeros_like(changed)
        expected[20 - r:20 + r + 1, 17 - r:17 + r + 1] = True
        np.testing.assert_array_equal(changed, expected)

    @pytest.mark.parametrize("k", [3, 7, 11])
    def test_interior_matches_patches(self, rng, k):
        x, y = rng.random((32, 32)), rng.random((32, 32))
        prm = SsimParams(window_size=k)
        maps = ssim_map(x, y, prm)
        r = k // 2
        for i in range(r, 32 - r):
            for j in range(r, 32 - r):
                px, py = x[i - r:i + r + 1, j - r:j + r + 1], y[i - r:i + r + 1, j - r:j + r + 1]
                assert maps.ssim_map[i, j] == pytest.approx(ssim_patch(px, py, prm), abs=1e-9)
                l, c, s = ssim_components(patch_stats(px, py), prm)
                assert maps.l_map[i, j] == pytest.approx(l, abs=1e-9)
                assert maps.s_map[i, j] == pytest.approx(s, abs=1e-9)

    def test_border_is_one_and_decomposition(self, rng):
        x, y = rng.random((30, 30)), rng.random((30, 30))
        m = ssim_map(x, y)
        for arr in (m.l_map, m.c_map, m.s_map, m.ssim_map):
            assert arr.shape == (30, 30)
            assert np.all(arr[:5] == 1) and np.all(arr[:, -5:] == 1)
        np.testing.assert_allclose(m.ssim_map, m.l_map * m.c_map * m.s_map, atol=1e-6)
        assert m.ssim_map.min() >= -1 and m.ssim_map.max() <= 1 + 1e-9

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim_map(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_map(np.zeros((20, 20)), np.zeros((20, 21)))


class TestResiduals:
    def test_ssim_identical(self, rng):
        x = rng.random((24, 24))
        np.testing.assert_allclose(ssim_residual(x, x), 0.0, atol=1e-9)

    def test_ssim_symmetric_and_bounded(self, rng):
        x, y = rng.random((24, 24)), rng.random((24, 24))
        a, b = ssim_residual(x, y), ssim_residual(y, x)
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert a.min() >= 0 and a.max() <= 1
        assert np.all(a[:5] == 0)

    def test_anticorrelated_center(self):
        x = (np.indices((31, 31)).sum(0) % 2).astype(float)
        res = ssim_residual(x, 1.0 - x)
        # window statistics: mu 0.5 both, var 0.25 both, cov -0.25
        k2 = 121
        mu = 61 / k2
        var = mu * (1 - mu)
        ssim = (2 * mu * (1 - mu) + 0.01) * (-2 * var + 0.03) / ((mu ** 2 + (1 - mu) ** 2 + 0.01) * (2 * var + 0.03))
        assert res[15, 15] == pytest.approx((1 - ssim) / 2, abs=1e-9)
        assert res[15, 15] > 0.9

    def test_l2(self, rng):
        x, y = rng.random((9, 9)), rng.random((9, 9))
        np.testing.assert_allclose(l2_residual(x, y), [[(a - b) ** 2 for a, b in zip(r1, r2)] for r1, r2 in zip(x, y)])
        np.testing.assert_array_equal(l2_residual(x, y), l2_residual(y, x))
        np.testing.assert_array_equal(l2_residual(x, x), 0)


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)[None, None]


class TestLosses:
    def test_l2_closed_form(self):
        x, y = torch.zeros(1, 1, 128, 128), torch.full((1, 1, 128, 128), 0.5)
        assert l2_loss(x, y).item() == pytest.approx(4096.0)
        assert l2_loss(x, x).item() == 0.0

    def test_l2_batch_average(self, rng):
        x = torch.rand(3, 1, 8, 8, dtype=torch.float64)
        y = torch.rand(3, 1, 8, 8, dtype=torch.float64)
        per = [((x[i] - y[i]) ** 2).sum().item() for i in range(3)]
        assert l2_loss(x, y).item() == pytest.approx(sum(per) / 3)

    def test_l2_gradient(self, rng):
        x = _t(rng.random((8, 8)))
        y = _t(rng.random((8, 8))).requires_grad_()
        l2_loss(x, y).backward()
        np.testing.assert_allclose(y.grad.numpy(), 2 * (y - x).detach().numpy(), atol=1e-12)

    def test_ssim_loss_zero_on_identity(self, rng):
        x = _t(rng.random((16, 16)))
        assert ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)

    def test_ssim_loss_matches_numpy_map(self, rng):
        x, y = rng.random((20, 20)), rng.random((20, 20))
        sm = ssim_map(x, y).ssim_map[5:-5, 5:-5]
        assert ssim_loss(_t(x), _t(y)).item() == pytest.approx(np.mean(1 - sm), abs=1e-12)

    @pytest.mark.parametrize("prm", [SsimParams(), SsimParams(window_size=7, alpha=2.0, beta=1.0, gamma=3.0)])
    def test_ssim_gradient_finite_differences(self, rng, prm):
        x = _t(rng.random((16, 16)))
        y = _t(rng.random((16, 16))).requires_grad_()
        ssim_loss(x, y, prm).backward()
        grad = y.grad.numpy()[0, 0]
        eps = 1e-3
        fd = np.zeros((16, 16))
        base = y.detach().clone()
        for i in range(16):
            for j in range(16):
                up, dn = base.clone(), base.clone()
                up[0, 0, i, j] += eps
                dn[0, 0, i, j] -= eps
                fd[i, j] = (ssim_loss(x, up, prm).item() - ssim_loss(x, dn, prm).item()) / (2 * eps)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        assert rel < 1e-2

    def test_ssim_loss_decreases_toward_target(self, rng):
        x = _t(rng.random((16, 16)))
        y0 = _t(rng.random((16, 16)))
        losses = [ssim_loss(x, (1 - a) * y0 + a * x).item() for a in np.linspace(0, 1, 5)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_loss(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 16, 17))
        with pytest.raises(ValueError):
            l2_loss(torch.zeros(2, 1, 4, 4), torch.zeros(1, 1, 4, 4))
