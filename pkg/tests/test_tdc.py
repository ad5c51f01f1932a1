import numpy as np
import pytest

from tdconv import tdc
from tdconv import tensor as T
from tdconv.tensor import Tensor


def scalar_branch(variant, bases, kt=5):
    """Branch with 1x1x1x1 base kernels set to the given scalars."""
    weights = [Tensor(np.full((1, 1, 1, 1), float(v)), requires_grad=True) for v in bases]
    return tdc.TdcBranchParams(variant=variant, kt=kt, base_weights=weights, bn=T.BatchNormState(1))


def random_branch(variant, c_in, c_out, kt=5, seed=0):
    rng = np.random.default_rng(seed)
    n = tdc.base_count(variant, kt)
    weights = [Tensor(rng.normal(size=(c_out, c_in, 3, 3)), requires_grad=True) for _ in range(n)]
    return tdc.TdcBranchParams(variant=variant, kt=kt, base_weights=weights, bn=T.BatchNormState(c_out))


class TestTapConstruction:
    def test_long_term_scalar(self):
        br = scalar_branch(tdc.LONG_TERM, [1, 1, 1, 1])
        taps = tdc.build_tdc_taps(br).data.reshape(5)
        np.testing.assert_allclose(taps, [-1, -1, -1, -1, 4])

    def test_short_term_scalar(self):
        a, b, c, d = 2.0, -1.5, 0.5, 3.0
        br = scalar_branch(tdc.SHORT_TERM, [a, b, c, d])
        taps = tdc.build_tdc_taps(br).data.reshape(5)
        np.testing.assert_allclose(taps, [-a, a - b, b - c, c - d, d])

    def test_mid_term_scalar(self):
        a, b, c = 1.0, 2.0, 3.0
        br = scalar_branch(tdc.MID_TERM, [a, b, c])
        taps = tdc.build_tdc_taps(br).data.reshape(5)
        np.testing.assert_allclose(taps, [-a, -b, a - c, b, c])

    @pytest.mark.parametrize("variant", tdc.VARIANTS)
    @pytest.mark.parametrize("kt", tdc.SUPPORTED_KT)
    def test_temporal_sum_is_zero(self, variant, kt):
        br = random_branch(variant, 2, 3, kt=kt, seed=hash((variant, kt)) % 2**31)
        taps = tdc.build_tdc_taps(br).data
        assert np.max(np.abs(taps.sum(axis=2))) < 1e-10

    def test_wrong_base_count_raises(self):
        weights = [Tensor(np.zeros((1, 1, 3, 3)))] * 3
        with pytest.raises(T.ConfigurationError):
            tdc.TdcBranchParams(variant=tdc.LONG_TERM, kt=5, base_weights=weights, bn=T.BatchNormState(1))

    def test_unsupported_kt_raises(self):
        with pytest.raises(T.ConfigurationError):
            tdc.base_count(tdc.LONG_TERM, 4)


class TestForward:
    @pytest.mark.parametrize("variant", tdc.VARIANTS)
    def test_zero_response_on_constant_sequence(self, variant):
        br = random_branch(variant, 2, 3, seed=1)
        frame = np.random.default_rng(2).normal(size=(1, 2, 1, 8, 8))
        x = Tensor(np.repeat(frame, 5, axis=2))
        out = tdc.tdc_forward_unified(x, br)
        assert np.max(np.abs(out.data)) < 1e-10

    @pytest.mark.parametrize("mode", ["causal_replicate", "valid", "same_zero"])
    @pytest.mark.parametrize("variant", tdc.VARIANTS)
    def test_unified_matches_explicit(self, variant, mode):
        rng = np.random.default_rng(3)
        for trial in range(6):
            kt = [3, 5, 7][trial % 3]
            br = random_branch(variant, 2, 2, kt=kt, seed=100 + trial)
            t = kt + int(rng.integers(0, 3))
            x = Tensor(rng.normal(size=(1, 2, t, 6, 6)))
            uni = tdc.tdc_forward_unified(x, br, temporal_mode=mode).data
            exp = tdc.tdc_forward_explicit(x, br, temporal_mode=mode)
            assert np.max(np.abs(uni - exp)) < 1e-10

    def test_single_nonzero_last_frame_long_term(self):
        br = scalar_branch(tdc.LONG_TERM, [1, 1, 1, 1])
        rng = np.random.default_rng(4)
        f5 = rng.normal(size=(1, 1, 1, 6, 6))
        x = np.zeros((1, 1, 5, 6, 6))
        x[:, :, 4:] = f5
        out = tdc.tdc_forward_unified(Tensor(x), br, temporal_mode="valid")
        np.testing.assert_allclose(out.data, 4.0 * f5, atol=1e-12)

    def test_mid_term_linear_ramp(self):
        # F_t = t * ones: every lag-2 difference is 2, so output = 2(a+b+c)
        a, b, c = 0.7, -1.2, 2.5
        br = scalar_branch(tdc.MID_TERM, [a, b, c])
        x = np.stack([t * np.ones((4, 4)) for t in range(1, 6)])[None, None]
        out = tdc.tdc_forward_unified(Tensor(x), br, temporal_mode="valid")
        np.testing.assert_allclose(out.data, 2 * (a + b + c), atol=1e-12)

    def test_gradients_through_tap_construction(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 2, 5, 4, 4)))
        for variant in tdc.VARIANTS:
            br = random_branch(variant, 2, 2, seed=6)
            probe = rng.normal(size=(1, 2, 5, 4, 4))

            def loss():
                out = tdc.tdc_forward_unified(x, br)
                return T.tsum(T.mul(out, probe))

            assert T.grad_check(loss, br.base_weights, step=1e-5, max_entries=10) < 1e-6


class TestTdcrModule:
    def test_zero_weights_identity_bn_gives_zero(self):
        mod = tdc.TdcrModule.init(2, 3, rng=np.random.default_rng(7))
        for br in mod.branches.values():
            for w in br.base_weights:
                w.data[:] = 0.0
        x = Tensor(np.random.default_rng(8).normal(size=(1, 2, 5, 6, 6)))
        out = tdc.tdcr_forward_train(x, mod, bn_mode="infer")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-14)

    def test_identity_bn_equals_branch_sum(self):
        mod = tdc.TdcrModule.init(2, 3, rng=np.random.default_rng(9))
        x = Tensor(np.random.default_rng(10).normal(size=(1, 2, 5, 6, 6)))
        out = tdc.tdcr_forward_train(x, mod, bn_mode="infer").data
        parts = sum(
            tdc.tdc_forward_unified(x, mod.branches[v]).data for v in tdc.VARIANTS
        )
        # identity BN still divides by sqrt(1 + eps)
        np.testing.assert_allclose(out, parts / np.sqrt(1 + 1e-5), atol=1e-12)

    def test_duplicate_variant_rejected(self):
        with pytest.raises(T.ConfigurationError):
            tdc.TdcrModule(2, 2, branches={tdc.SHORT_TERM: None, tdc.MID_TERM: None})

    def test_state_roundtrip(self):
        mod = tdc.TdcrModule.init(2, 3, rng=np.random.default_rng(11))
        arrays = mod.state_arrays("layer0.")
        other = tdc.TdcrModule.init(2, 3, rng=np.random.default_rng(99))
        other.load_state_arrays(arrays, "layer0.")
        x = Tensor(np.random.default_rng(12).normal(size=(1, 2, 5, 4, 4)))
        a = tdc.tdcr_forward_train(x, mod, bn_mode="infer").data
        b = tdc.tdcr_forward_train(x, other, bn_mode="infer").data
        np.testing.assert_array_equal(a, b)


def _randomize_bn(bn, rng):
    bn.gamma.data = rng.uniform(0.5, 2.0, size=bn.channels)
    bn.beta.data = rng.normal(size=bn.channels)
    bn.running_mu = rng.normal(size=bn.channels)
    bn.running_var = rng.uniform(0.3, 2.0, size=bn.channels)


class TestReparameterization:
    def test_fuse_conv_bn_identity(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(3, 2, 5, 3, 3))
        bn = T.BatchNormState(3, eps=0.0)
        w_hat, b_hat = tdc.fuse_conv_bn(w, None, bn)
        np.testing.assert_allclose(w_hat, w)
        np.testing.assert_allclose(b_hat, 0.0)

    def test_fuse_conv_bn_scale(self):
        w = np.ones((2, 1, 3, 3, 3))
        bn = T.BatchNormState(2, eps=0.0)
        bn.gamma.data = np.array([2.0, 2.0])
        w_hat, b_hat = tdc.fuse_conv_bn(w, None, bn)
        np.testing.assert_allclose(w_hat, 2.0 * w)
        np.testing.assert_allclose(b_hat, 0.0)

    def test_fuse_conv_bn_compositional(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(3, 2, 3, 3, 3))
        bn = T.BatchNormState(3)
        _randomize_bn(bn, rng)
        x = Tensor(rng.normal(size=(2, 2, 5, 6, 6)))
        ref = T.batch_norm(T.conv3d(x, Tensor(w), spatial_pad=1), bn, mode="infer").data
        w_hat, b_hat = tdc.fuse_conv_bn(w, None, bn)
        fused = T.conv3d(x, Tensor(w_hat), bias=Tensor(b_hat), spatial_pad=1).data
        assert np.max(np.abs(ref - fused)) < 1e-10

    def test_zero_module_fuses_to_zero(self):
        mod = tdc.TdcrModule.init(1, 1, rng=np.random.default_rng(15))
        for br in mod.branches.values():
            for w in br.base_weights:
                w.data[:] = 0.0
        fused = tdc.reparameterize(mod)
        np.testing.assert_allclose(fused.weight, 0.0)
        np.testing.assert_allclose(fused.bias, 0.0)

    @pytest.mark.parametrize("kt", tdc.SUPPORTED_KT)
    def test_fused_matches_branched(self, kt):
        rng = np.random.default_rng(16 + kt)
        mod = tdc.TdcrModule.init(2, 3, kt=kt, rng=rng)
        for br in mod.branches.values():
            _randomize_bn(br.bn, rng)
        fused = tdc.reparameterize(mod)
        for _ in range(20):
            x = Tensor(rng.normal(size=(1, 2, max(kt, 5), 6, 6)))
            a = tdc.tdcr_forward_train(x, mod, bn_mode="infer").data
            b = fused.forward(x).data
            assert np.max(np.abs(a - b)) < 1e-9

    def test_fused_temporal_tap_sum_zero(self):
        rng = np.random.default_rng(17)
        mod = tdc.TdcrModule.init(3, 4, rng=rng)
        for br in mod.branches.values():
            _randomize_bn(br.bn, rng)
        fused = tdc.reparameterize(mod)
        assert np.max(np.abs(fused.weight.sum(axis=2))) < 1e-10

    def test_parameter_counts(self):
        mod = tdc.TdcrModule.init(8, 8, rng=np.random.default_rng(18))
        assert mod.learnable_param_count() == (4 + 4 + 3) * (8 * 8 * 3 * 3) + 3 * (2 * 8)
        assert mod.learnable_param_count() == 6384
        fused = tdc.reparameterize(mod)
        assert fused.param_count() == 8 * 8 * 5 * 3 * 3 + 8 == 2888

    def test_flop_monotonicity(self):
        for c_in, c_out in [(1, 1), (2, 5), (8, 8), (16, 3)]:
            mod = tdc.TdcrModule.init(c_in, c_out, rng=np.random.default_rng(19))
            branched, fused = tdc.tdcr_macs(mod, (1, c_in, 5, 16, 16))
            assert fused < branched

    def test_mutation_hook_breaks_equivalence(self):
        rng = np.random.default_rng(20)
        mod = tdc.TdcrModule.init(1, 1, rng=rng)
        x = Tensor(rng.normal(size=(1, 1, 5, 4, 4)))
        clean = tdc.tdcr_forward_train(x, mod, bn_mode="infer").data

        def flip(variant, taps):
            if variant == tdc.SHORT_TERM:
                taps = [T.mul(taps[0], -1.0)] + taps[1:]
            return taps

        tdc._TAP_MUTATOR = flip
        try:
            mutated = tdc.tdcr_forward_train(x, mod, bn_mode="infer").data
        finally:
            tdc._TAP_MUTATOR = None
        assert np.max(np.abs(clean - mutated)) > 1e-6
