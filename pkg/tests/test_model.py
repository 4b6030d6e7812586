import numpy as np
import pytest

from tbvi import model as M
from tbvi import tensor as T

TOY = M.ModelConfig(input_dim=4, hidden_dim=3, latent_dim=2)


def _zero_params(config):
    params = M.init_params(config, seed=0)
    for _, t in params.items():
        t.values = np.zeros_like(t.values)
    return params


class TestParamCount:
    def test_referential(self):
        assert M.param_count(M.REFERENTIAL) == 425284

    def test_larger(self):
        assert M.param_count(M.LARGER) == 973624

    def test_tiny_by_hand(self):
        # 784*1+1 + 1*1+1 + 2*(1+1) + (1+1) + (1+1) + 784+784
        cfg = M.ModelConfig(input_dim=784, hidden_dim=1, latent_dim=1)
        assert M.param_count(cfg) == 785 + 2 + 4 + 2 + 2 + 1568

    def test_matches_tensor_enumeration(self, rng):
        for _ in range(20):
            cfg = M.ModelConfig(
                input_dim=int(rng.integers(2, 900)),
                hidden_dim=int(rng.integers(1, 300)),
                latent_dim=int(rng.integers(1, 80)),
            )
            params = M.init_params(cfg, seed=1)
            enumerated = sum(t.values.size for _, t in params.items())
            assert enumerated == M.param_count(cfg)

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            M.ModelConfig(input_dim=0, hidden_dim=3, latent_dim=2)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = M.init_params(TOY, seed=5)
        b = M.init_params(TOY, seed=5)
        for (_, ta), (_, tb) in zip(a.items(), b.items()):
            np.testing.assert_array_equal(ta.values, tb.values)

    def test_different_seeds_differ(self):
        a = M.init_params(TOY, seed=5)
        b = M.init_params(TOY, seed=6)
        assert any(not np.array_equal(ta.values, tb.values) for (_, ta), (_, tb) in zip(a.items(), b.items()))

    def test_uniform_fan_in_std(self):
        params = M.init_params(M.REFERENTIAL, seed=7)
        w = params.phi["enc_w1"].values  # fan_in 784
        expected = (1.0 / np.sqrt(784)) / np.sqrt(3.0)
        assert abs(w.std() - expected) / expected < 0.05

    def test_biases_zero(self):
        params = M.init_params(TOY, seed=8)
        assert (params.phi["enc_b1"].values == 0).all()
        assert (params.theta["dec_b_out"].values == 0).all()

    def test_groups_disjoint(self):
        params = M.init_params(TOY, seed=9)
        assert set(params.phi) & set(params.theta) == set()
        assert params.group_of("enc_w1") == "phi"
        assert params.group_of("dec_w1") == "theta"


class TestEncodeDecode:
    def test_zero_network_gives_unit_gaussian(self):
        params = _zero_params(TOY)
        q = M.encode(params, np.ones((3, 4)))
        np.testing.assert_array_equal(q.mu.values, 0.0)
        np.testing.assert_array_equal(q.log_var.values, 0.0)

    def test_zero_network_decodes_to_half(self):
        params = _zero_params(TOY)
        z = T.Tensor(np.ones((2, 1, 1, 2)))
        logits = M.decode(params, z)
        np.testing.assert_array_equal(logits.values, 0.0)

    def test_deterministic(self, rng):
        params = M.init_params(TOY, seed=3)
        x = rng.integers(0, 2, size=(5, 4)).astype(float)
        a = M.encode(params, x)
        b = M.encode(params, x)
        np.testing.assert_array_equal(a.mu.values, b.mu.values)
        np.testing.assert_array_equal(a.log_var.values, b.log_var.values)

    def test_encode_finite_on_random_binary_inputs(self, rng):
        params = M.init_params(M.ModelConfig(784, 32, 8), seed=4)
        x = (rng.random((1000, 784)) < rng.random((1000, 1))).astype(float)
        q = M.encode(params, x)
        assert np.isfinite(q.mu.values).all() and np.isfinite(q.log_var.values).all()

    def test_decode_finite_for_bounded_latents(self, rng):
        params = M.init_params(M.ModelConfig(784, 32, 8), seed=5)
        z = T.Tensor(rng.uniform(-6, 6, size=(100, 1, 1, 8)))
        assert np.isfinite(M.decode(params, z).values).all()


class TestReparameterize:
    def test_zero_noise_returns_mu(self, rng):
        params = M.init_params(TOY, seed=1)
        x = rng.integers(0, 2, size=(3, 4)).astype(float)
        q = M.encode(params, x)
        z = M.reparameterize(q, np.zeros((3, 2, 2, 2)))
        np.testing.assert_allclose(z.values, np.broadcast_to(q.mu.values[:, None, None, :], (3, 2, 2, 2)))

    def test_unit_sigma_adds_noise(self):
        params = _zero_params(TOY)
        q = M.encode(params, np.zeros((2, 4)))
        noise = np.arange(2 * 1 * 1 * 2, dtype=float).reshape(2, 1, 1, 2)
        z = M.reparameterize(q, noise)
        np.testing.assert_array_equal(z.values, noise)

    def test_gradient_wrt_mu_is_identity(self, rng):
        params = M.init_params(TOY, seed=2)
        x = rng.integers(0, 2, size=(1, 4)).astype(float)
        noise = rng.standard_normal((1, 1, 1, 2))
        probe = rng.standard_normal(2)

        def f():
            q = M.encode(params, x)
            z = M.reparameterize(q, noise)
            return T.tsum(z * T.Tensor(probe))

        leaves = [t for _, t in params.items()]
        assert T.finite_diff_check(f, leaves, step=1e-6) < 1e-5

    def test_shape_mismatch(self):
        params = _zero_params(TOY)
        q = M.encode(params, np.zeros((2, 4)))
        with pytest.raises(T.ShapeMismatchError):
            M.reparameterize(q, np.zeros((2, 1, 1, 3)))


class TestLogJointParts:
    def test_log_q_at_mode_1d(self):
        cfg = M.ModelConfig(input_dim=4, hidden_dim=3, latent_dim=1)
        params = _zero_params(cfg)
        q = M.encode(params, np.zeros((1, 4)))  # mu 0, logvar 0
        z = M.reparameterize(q, np.zeros((1, 1, 1, 1)))
        lq = M.gaussian_log_prob(z, q)
        np.testing.assert_allclose(float(lq), -0.918939, atol=1e-6)

    def test_standard_normal_at_origin_2d(self):
        z = T.Tensor(np.zeros((1, 1, 1, 2)))
        np.testing.assert_allclose(float(M.standard_normal_log_prob(z)), -1.837877, atol=1e-6)

    def test_bernoulli_all_ones_zero_logits(self):
        params = _zero_params(M.ModelConfig(input_dim=784, hidden_dim=3, latent_dim=2))
        x = np.ones((1, 784))
        z = T.Tensor(np.zeros((1, 1, 1, 2)))
        lpx, _, _ = M.log_joint_parts(params, x, z, M.encode(params, x))
        np.testing.assert_allclose(float(lpx), 784.0 * np.log(0.5), rtol=1e-12)

    def test_bernoulli_fused_form_extreme_logits(self):
        # direct sigmoid-then-log would be -inf past |logit| ~ 37
        logits = T.Tensor(np.full((1, 1, 1, 4), 45.0))
        x = np.ones((1, 4))
        val = float(M.bernoulli_log_prob(logits, x))
        assert np.isfinite(val)
        np.testing.assert_allclose(val, -4 * np.exp(-45.0), rtol=1e-6)

    def test_log_weight_constant_when_q_matches_prior(self):
        params = _zero_params(M.ModelConfig(input_dim=4, hidden_dim=3, latent_dim=2))
        x = np.ones((2, 4))
        q = M.encode(params, x)
        z = M.reparameterize(q, np.random.default_rng(0).standard_normal((2, 2, 3, 2)))
        lw = M.log_weight(params, x, z, q)
        np.testing.assert_allclose(lw.values, 4.0 * np.log(0.5), rtol=1e-12)

    def test_parts_sum_to_log_weight(self, rng):
        params = M.init_params(TOY, seed=11)
        x = rng.integers(0, 2, size=(2, 4)).astype(float)
        q = M.encode(params, x)
        z = M.reparameterize(q, rng.standard_normal((2, 1, 2, 2)))
        lpx, lpz, lqz = M.log_joint_parts(params, x, z, q)
        lw = M.log_weight(params, x, z, q)
        np.testing.assert_allclose(lw.values, lpx.values + lpz.values - lqz.values, atol=1e-12)

    def test_log_weight_gradients_match_finite_differences(self, rng):
        params = M.init_params(TOY, seed=12)
        x = rng.integers(0, 2, size=(2, 4)).astype(float)
        noise = rng.standard_normal((2, 1, 2, 2))

        def f():
            q = M.encode(params, x)
            z = M.reparameterize(q, noise)
            return T.tmean(M.log_weight(params, x, z, q))

        leaves = [t for _, t in params.items()]
        assert T.finite_diff_check(f, leaves, step=1e-5) < 1e-4


class TestPosteriorNormalization:
    def test_density_integrates_to_one_1d(self, rng):
        cfg = M.ModelConfig(input_dim=4, hidden_dim=3, latent_dim=1)
        params = M.init_params(cfg, seed=13)
        x = rng.integers(0, 2, size=(1, 4)).astype(float)
        q = M.encode(params, x)
        mu = float(q.mu.values[0, 0])
        sigma = float(np.exp(q.log_var.values[0, 0] / 2.0))
        grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 4001)
        z = T.Tensor(grid.reshape(1, 1, grid.size, 1))
        dens = np.exp(M.gaussian_log_prob(z, q).values[0, 0])
        integral = np.trapezoid(dens, grid)
        np.testing.assert_allclose(integral, 1.0, atol=1e-3)
