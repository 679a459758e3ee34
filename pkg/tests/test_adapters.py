import numpy as np
import pytest
from fractions import Fraction

from resadapt import adapters as ad
from resadapt.errors import ConfigError
from resadapt.gradcheck import finite_diff_check
from resadapt.tensor_core import BatchNormState, conv1x1, conv2d

from conftest import rel


def test_embed_diag_L1_is_identity_embedding():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    bank = ad.embed_diag(A, 1)
    assert bank.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(bank[0, 0], A)


def test_embed_diag_L3_centre_only():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    bank = ad.embed_diag(A, 3)
    assert bank.shape == (3, 3, 2, 2)
    np.testing.assert_array_equal(bank[1, 1], A)
    bank[1, 1] = 0
    assert np.all(bank == 0)


def test_embed_diag_rejects_even():
    with pytest.raises(ConfigError):
        ad.embed_diag(np.eye(2), 2)


def test_embedded_conv_equals_1x1(rng):
    x = rng.normal(size=(2, 5, 5, 3))
    A = rng.normal(size=(3, 4))
    assert rel(conv2d(x, ad.embed_diag(A, 3), 1, 1), conv1x1(x, A)) < 1e-14


class TestSeries:
    def test_zero_alpha_identity_bn(self, rng):
        x = rng.normal(size=(2, 4, 4, 3))
        f = rng.normal(size=(3, 3, 3, 5))
        out, _ = ad.series_forward(x, f, np.zeros((5, 5)), BatchNormState.fresh(5), train=False)
        np.testing.assert_array_equal(out, conv2d(x, f, 1, 1))

    def test_zero_alpha_train_mode_bn(self, rng):
        x = rng.normal(size=(2, 4, 4, 3))
        f = rng.normal(size=(3, 3, 3, 5))
        out, _ = ad.series_forward(x, f, np.zeros((5, 5)), BatchNormState.fresh(5), train=True)
        np.testing.assert_array_equal(out, conv2d(x, f, 1, 1))

    def test_doubling(self, rng):
        x = rng.normal(size=(1, 3, 3, 2))
        out, _ = ad.series_forward(x, np.eye(2)[None, None], np.eye(2))
        np.testing.assert_array_equal(out, 2 * x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_fusion(self, rng, stride):
        x = rng.normal(size=(2, 6, 6, 4))
        f = rng.normal(size=(3, 3, 4, 4))
        a = rng.normal(size=(4, 4))
        out, _ = ad.series_forward(x, f, a, None, stride=stride)
        assert rel(out, conv2d(x, ad.fuse_series(f, a), stride, 1)) <= 1e-6

    def test_fuse_zero(self, rng):
        f = rng.normal(size=(3, 3, 4, 4))
        np.testing.assert_array_equal(ad.fuse_series(f, np.zeros((4, 4))), f)

    def test_fuse_scalar_doubling(self):
        g = ad.fuse_series(np.eye(3)[None, None], np.eye(3))
        np.testing.assert_array_equal(g, 2 * np.eye(3)[None, None])

    def test_singular_fusion_is_lossy(self, rng):
        # I + alpha singular: two different hosts fuse to the same bank
        alpha = -np.diag([1.0, 0.0, 0.0])
        f1 = rng.normal(size=(3, 3, 2, 3))
        f2 = f1.copy()
        f2[..., 0] += 1.0
        np.testing.assert_array_equal(ad.fuse_series(f1, alpha), ad.fuse_series(f2, alpha))
        with pytest.raises(ConfigError):
            ad.unfuse_series(ad.fuse_series(f1, alpha), alpha)

    def test_invertible_fusion_recovers(self, rng):
        f = rng.normal(size=(3, 3, 4, 4))
        a = 0.3 * rng.normal(size=(4, 4))
        assert rel(ad.unfuse_series(ad.fuse_series(f, a), a), f) <= 1e-8

    def test_gradient_with_bn_and_mask(self, rng):
        st = BatchNormState.fresh(3)
        mask = (rng.uniform(size=(2, 4, 4, 3)) > 0.3) / 0.7

        def fwd(x, f, a):
            return ad.series_forward(x, f, a, st.copy(), train=True, branch_mask=mask)[0]

        def bwd(d, x, f, a):
            _, cache = ad.series_forward(x, f, a, st.copy(), train=True, branch_mask=mask)
            return ad.series_backward(d, cache)[:3]

        rep = finite_diff_check(fwd, bwd, [rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3)),
                                           rng.normal(size=(3, 3))])
        assert rep.max_rel_error <= 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            ad.series_forward(rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(3, 3, 2, 4)), np.eye(2))


class TestParallel:
    def test_zero_alpha(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        f = rng.normal(size=(3, 3, 3, 4))
        out, _ = ad.parallel_forward(x, f, np.zeros((3, 4)))
        np.testing.assert_array_equal(out, conv2d(x, f, 1, 1))

    def test_pure_skip(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        out, _ = ad.parallel_forward(x, np.zeros((3, 3, 3, 3)), np.eye(3))
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_fusion(self, rng, stride, pad):
        x = rng.normal(size=(2, 7, 6, 3))
        f = rng.normal(size=(3, 3, 3, 4))
        a = rng.normal(size=(3, 4))
        out, _ = ad.parallel_forward(x, f, a, stride=stride, pad=pad)
        assert rel(out, conv2d(x, ad.fuse_parallel(f, a), stride, pad)) <= 1e-6

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradient(self, rng, stride, pad):
        def fwd(x, f, a):
            return ad.parallel_forward(x, f, a, stride=stride, pad=pad)[0]

        def bwd(d, x, f, a):
            dx, dxa, df, da = ad.parallel_backward(d, ad.parallel_forward(x, f, a, stride=stride, pad=pad)[1])
            return dx + dxa, df, da

        rep = finite_diff_check(fwd, bwd, [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)),
                                           rng.normal(size=(2, 3))])
        assert rep.max_rel_error <= 1e-6

    def test_fuse_zero(self, rng):
        f = rng.normal(size=(3, 3, 2, 5))
        np.testing.assert_array_equal(ad.fuse_parallel(f, np.zeros((2, 5))), f)

    def test_fuse_unfuse_dyadic_bit_exact(self, rng):
        # values on a coarse binary grid: every sum and difference is exact
        f = np.round(rng.normal(size=(3, 3, 4, 4)) * 64) / 64
        a = np.round(rng.normal(size=(4, 4)) * 64) / 64
        np.testing.assert_array_equal(ad.unfuse_parallel(ad.fuse_parallel(f, a), a), f)

    def test_fuse_unfuse_random_within_rounding(self, rng):
        f = rng.normal(size=(3, 3, 8, 8))
        a = rng.normal(size=(8, 8))
        back = ad.unfuse_parallel(ad.fuse_parallel(f, a), a)
        # only the centre taps are touched, and there by at most one rounding of f + a
        centre = np.zeros((3, 3), bool)
        centre[1, 1] = True
        np.testing.assert_array_equal(back[~centre], f[~centre])
        ulp = np.spacing(np.abs(f[1, 1]) + np.abs(a))
        assert np.all(np.abs(back[1, 1] - f[1, 1]) <= ulp)

    def test_float_addition_is_not_always_invertible(self):
        # why bitwise round-trips are guaranteed at checkpoint level, not for arbitrary floats
        f = np.full((1, 1, 1, 1), 1e-20)
        a = np.ones((1, 1))
        assert ad.unfuse_parallel(ad.fuse_parallel(f, a), a)[0, 0, 0, 0] != 1e-20

    def test_shape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            ad.parallel_forward(rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(3, 3, 2, 4)), np.eye(2))


@pytest.mark.parametrize("L,expected", [(3, Fraction(1, 9)), (1, Fraction(1)), (5, Fraction(1, 25))])
def test_param_fraction(L, expected):
    assert ad.adapter_param_fraction(L) == expected


def test_param_fraction_matches_counts():
    C = 16
    assert Fraction(C * C, 3 * 3 * C * C) == ad.adapter_param_fraction(3)


def test_series_and_parallel_same_size_for_square():
    assert ad.adapter_shape("series", 8, 8) == ad.adapter_shape("parallel", 8, 8) == (8, 8)
