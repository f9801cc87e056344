import numpy as np
import numpy.testing as npt
import pytest

from metanorm import autodiff as ad
from metanorm.autodiff import Variable, finite_diff_check
from metanorm.errors import PartitionError, ShapeError
from metanorm.ilm import (EMBED_DIM_RULES, IlmParams, KeyFeatures, align,
                          count_ilm_params, decode, encode,
                          extract_key_features, ilm_forward, init_ilm_params)
from metanorm.norms import AffineParams, PartitionScheme, standardize


def _params(w1, w2, w3, omega, beta, **kw):
    return IlmParams(
        w1=Variable(np.asarray(w1, dtype=np.float64), requires_grad=True),
        w2=Variable(np.asarray(w2, dtype=np.float64), requires_grad=True),
        w3=Variable(np.asarray(w3, dtype=np.float64), requires_grad=True),
        base=AffineParams(omega=Variable(np.asarray(omega, dtype=np.float64),
                                         requires_grad=True),
                          beta=Variable(np.asarray(beta, dtype=np.float64),
                                        requires_grad=True)),
        embed_dim=np.asarray(w1).shape[0],
        **kw,
    )


def _zero_params(channels, n, m=1, **kw):
    return _params(np.zeros((m, n)), np.zeros((n, m)), np.zeros((n, m)),
                   np.ones(channels), np.zeros(channels), **kw)


class TestKeyFeatures:
    def test_grouped_input_moments(self):
        x = np.array([1.0, 3.0, 5.0, 9.0]).reshape(1, 4, 1, 1)
        kf = extract_key_features(x, 2)
        npt.assert_array_equal(kf.mu.value, [[2.0, 7.0]])
        npt.assert_array_equal(kf.gamma.value, [[1.0, 4.0]])

    def test_population_variance(self):
        # denominator is the element count, not count - 1
        x = np.array([0.0, 2.0]).reshape(1, 2, 1, 1)
        kf = extract_key_features(x, 2)
        npt.assert_array_equal(kf.gamma.value, [[1.0]])

    def test_group_size_c_is_whole_instance(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 3, 3))
        kf = extract_key_features(x, 4)
        npt.assert_allclose(kf.mu.value, x.mean(axis=(1, 2, 3), keepdims=True)
                            .reshape(2, 1), atol=1e-12)
        npt.assert_allclose(kf.gamma.value, x.var(axis=(1, 2, 3)).reshape(2, 1),
                            atol=1e-12)

    def test_group_size_one_is_per_channel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 3, 3))
        kf = extract_key_features(x, 1)
        npt.assert_allclose(kf.mu.value, x.mean(axis=(2, 3)), atol=1e-12)
        npt.assert_allclose(kf.gamma.value, x.var(axis=(2, 3)), atol=1e-12)

    def test_indivisible_group(self):
        with pytest.raises(PartitionError):
            extract_key_features(np.ones((1, 6, 2, 2)), 4)

    def test_non_nchw_rejected(self):
        with pytest.raises(ShapeError):
            extract_key_features(np.ones((6, 2, 2)), 2)


class TestEncodeDecode:
    def test_encoder_is_shared_and_rectified(self):
        kf = extract_key_features(
            np.array([1.0, 3.0, 5.0, 9.0]).reshape(1, 4, 1, 1), 2)
        params = _params([[1.0, 1.0]], [[0.0], [0.0]], [[0.0], [0.0]],
                         np.ones(4), np.zeros(4))
        e_mu, e_gamma = encode(kf, params)
        npt.assert_array_equal(e_mu.value, [[9.0]])  # 2 + 7
        npt.assert_array_equal(e_gamma.value, [[5.0]])  # 1 + 4
        params.w1.value = np.array([[-1.0, -1.0]])
        e_mu, _ = encode(kf, params)
        npt.assert_array_equal(e_mu.value, [[0.0]])

    def test_identity_encoder_rectifies(self):
        kf = KeyFeatures(mu=Variable(np.array([[2.0, -3.0]])),
                         gamma=Variable(np.array([[1.0, 1.0]])), group_size=2)
        params = _params(np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)),
                         np.ones(4), np.zeros(4))
        e_mu, _ = encode(kf, params)
        npt.assert_array_equal(e_mu.value, [[2.0, 0.0]])

    def test_identity_decoder_applies_activations(self):
        params = _params(np.eye(2), np.eye(2), np.eye(2),
                         np.ones(4), np.zeros(4))
        e = Variable(np.array([[0.5, 0.0]]))
        d_mu, d_gamma = decode(e, e, params)
        npt.assert_allclose(d_mu.value, [[0.4621171572600098, 0.0]], rtol=1e-12)
        npt.assert_allclose(d_gamma.value,
                            [[1 / (1 + np.exp(-0.5)), 0.5]], rtol=1e-12)

    def test_decode_at_zero_embedding(self):
        params = _zero_params(4, 2)
        zero = Variable(np.zeros((1, 1)))
        d_mu, d_gamma = decode(zero, zero, params)
        npt.assert_array_equal(d_mu.value, [[0.0, 0.0]])  # tanh(0)
        npt.assert_array_equal(d_gamma.value, [[0.5, 0.5]])  # sigmoid(0)

    def test_key_group_count_mismatch(self):
        kf = extract_key_features(np.ones((1, 6, 2, 2)), 2)
        with pytest.raises(ShapeError):
            encode(kf, _zero_params(4, 2))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            _zero_params(4, 2, act_mu="softplus")


class TestAlign:
    def test_duplicates_group_values_contiguously(self):
        base = AffineParams(omega=Variable(np.ones(4)), beta=Variable(np.zeros(4)))
        d_mu = Variable(np.array([[0.1, -0.3]]))
        d_gamma = Variable(np.array([[0.2, 0.9]]))
        omega, beta = align(d_mu, d_gamma, base)
        npt.assert_allclose(omega.value, [[1.2, 1.2, 1.9, 1.9]], atol=1e-12)
        npt.assert_allclose(beta.value, [[0.1, 0.1, -0.3, -0.3]], atol=1e-12)

    def test_per_instance_rows(self):
        base = AffineParams(omega=Variable(np.zeros(2)), beta=Variable(np.zeros(2)))
        d = Variable(np.array([[1.0], [2.0]]))
        omega, _ = align(d, d, base)
        npt.assert_array_equal(omega.value, [[1.0, 1.0], [2.0, 2.0]])

    def test_indivisible(self):
        base = AffineParams(omega=Variable(np.ones(5)), beta=Variable(np.zeros(5)))
        d = Variable(np.ones((1, 2)))
        with pytest.raises(PartitionError):
            align(d, d, base)


class TestIlmForward:
    def test_zero_weight_reduction(self):
        # W1 = W2 = W3 = 0 makes omega = 1.5 and beta = 0 exactly
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 3, 3))
        params = _zero_params(4, 2)
        out = ilm_forward(x, PartitionScheme.group(2), params, key_group_size=2)
        xs, _ = standardize(x, PartitionScheme.group(2), 1e-5)
        npt.assert_allclose(out.value, 1.5 * xs.value, atol=1e-12)

    def test_batch_independence(self):
        rng = np.random.default_rng(4)
        single = rng.standard_normal((1, 8, 3, 3))
        params = init_ilm_params(8, 4, np.random.default_rng(0))
        for scheme in (PartitionScheme.layer(), PartitionScheme.instance(),
                       PartitionScheme.group(2)):
            alone = ilm_forward(single, scheme, params, key_group_size=4)
            for batch in (2, 8):
                padded = np.concatenate(
                    [single, rng.standard_normal((batch - 1, 8, 3, 3))])
                together = ilm_forward(padded, scheme, params, key_group_size=4)
                npt.assert_allclose(together.value[0], alone.value[0], atol=1e-12)

    def test_batch_standardizer_rejected(self):
        params = init_ilm_params(4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            ilm_forward(np.ones((2, 4, 3, 3)), PartitionScheme.batch(), params, 2)

    def test_predicted_weight_stays_in_unit_band_above_base(self):
        # sigmoid decoder keeps omega strictly inside (B_omega, B_omega + 1)
        rng = np.random.default_rng(5)
        params = init_ilm_params(8, 2, rng)
        x = rng.standard_normal((4, 8, 5, 5)) * 3.0
        kf = extract_key_features(x, 2)
        d_mu, d_gamma = decode(*encode(kf, params), params)
        omega, beta = align(d_mu, d_gamma, params.base)
        assert np.all(omega.value > 1.0) and np.all(omega.value < 2.0)
        assert np.all(beta.value > -1.0) and np.all(beta.value < 1.0)

    def test_key_features_respond_to_instance_shift(self):
        # shifting one instance changes its own output only
        rng = np.random.default_rng(6)
        params = init_ilm_params(4, 2, rng)
        x = rng.standard_normal((2, 4, 3, 3))
        base = ilm_forward(x, PartitionScheme.group(2), params, 2)
        shifted = x.copy()
        shifted[1] += 2.0
        out = ilm_forward(shifted, PartitionScheme.group(2), params, 2)
        npt.assert_allclose(out.value[0], base.value[0], atol=1e-12)
        assert np.abs(out.value[1] - base.value[1]).max() > 1e-4

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Variable(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
        params = init_ilm_params(8, 4, rng)
        targets = [x] + list(params.variables.values())
        names = ["x"] + list(params.variables)
        # random projection; symmetric losses are nearly x-invariant here
        coeff = Variable(rng.standard_normal((2, 8, 4, 4)))

        def f():
            out = ilm_forward(x, PartitionScheme.group(2), params, 4)
            return ad.vsum(out * coeff)

        report = finite_diff_check(f, targets, names=names)
        assert report.passed, [(e.name, e.max_rel_err) for e in report.entries]


class TestParamCounting:
    def test_embed_dim_rules(self):
        assert EMBED_DIM_RULES["n_over_16_min_1"](2) == 1
        assert EMBED_DIM_RULES["n_over_16_min_1"](64) == 4
        assert EMBED_DIM_RULES["same_as_n"](8) == 8
        assert EMBED_DIM_RULES["half_n_min_1"](1) == 1

    def test_small_layer_counts(self):
        # C=32, group size 16: N=2, M=1 -> extra 3*1*2, base 2*32
        assert count_ilm_params(32, 16) == (6, 64)
        # C=256, group size 16: N=16, M=1 -> extra 48
        assert count_ilm_params(256, 16) == (48, 512)
        # per-channel keys: N=256, M=16 -> extra 3*16*256
        assert count_ilm_params(256, 1) == (12288, 512)

    def test_counts_match_live_parameters(self):
        params = init_ilm_params(64, 16, np.random.default_rng(0))
        extra, base = count_ilm_params(64, 16)
        live = params.variables
        assert extra == sum(live[k].value.size for k in ("w1", "w2", "w3"))
        assert base == live["b_omega"].value.size + live["b_beta"].value.size

    def test_indivisible(self):
        with pytest.raises(PartitionError):
            count_ilm_params(24, 16)
