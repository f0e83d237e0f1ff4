import math

import numpy as np
import pytest

from certismooth import nn
from certismooth.data import make_gmm_world, normalize, sample_dataset
from certismooth.denoiser import (ADAPT, EMPTY, AnalyticDenoiser, Conditioning, IdentityDenoiser, NeuralDenoiser,
                                  blur, denoise_one_step, denoise_vjp, eps_estimate, forward_diffuse,
                                  gmm_posterior_mean, gmm_posterior_mean_vjp, pretrain_denoiser, sidecar_path)
from certismooth.errors import DomainError
from certismooth.schedule import NoiseSchedule, corrected_timestep, sigma_to_alpha, sigma_to_timestep

from oracles import quadrature_posterior_mean


class TestConditioning:
    def test_token_ids(self):
        assert EMPTY.token_id(3) == 0 and ADAPT.token_id(3) == 1
        assert Conditioning("class", 2).token_id(3) == 4

    def test_exactly_one_variant(self):
        with pytest.raises(ValueError):
            Conditioning("class")
        with pytest.raises(ValueError):
            Conditioning("empty", 1)

    def test_unknown_class_token(self):
        with pytest.raises(ValueError):
            Conditioning("class", 5).token_id(3)

    @pytest.mark.parametrize("text,cond", [("empty", EMPTY), ("adapt", ADAPT), ("class:1", Conditioning("class", 1))])
    def test_parse(self, text, cond):
        assert Conditioning.parse(text) == cond


class TestForwardDiffuse:
    def test_clean_endpoint(self, schedule, rng):
        x = rng.uniform(-1, 1, size=5)
        np.testing.assert_array_equal(forward_diffuse(x, 0, rng.normal(size=5), schedule), x)

    def test_half_signal(self):
        sched = NoiseSchedule(np.array([1.0, 0.5, 0.1]))
        out = forward_diffuse(np.ones(3), 1, np.ones(3), sched)
        np.testing.assert_allclose(out, 2 * math.sqrt(0.5), rtol=1e-15)

    def test_tail(self, schedule, rng):
        x, noise = rng.uniform(-1, 1, size=8), rng.normal(size=8)
        a = schedule.alpha_bar[-1]
        assert np.linalg.norm(forward_diffuse(x, schedule.T, noise, schedule) - noise) <= math.sqrt(a) * np.linalg.norm(x) + 1e-12

    def test_per_row_timesteps(self, schedule, rng):
        X, N = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        t = np.array([1, 400, 999])
        out = forward_diffuse(X, t, N, schedule)
        for i in range(3):
            np.testing.assert_allclose(out[i], forward_diffuse(X[i], t[i], N[i], schedule), rtol=1e-15)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ValueError):
            forward_diffuse(np.ones(3), 1, np.ones(4), schedule)


class TestIdentity:
    def test_zero_eps(self, schedule, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(eps_estimate(IdentityDenoiser(schedule), x, 10, EMPTY, x, 18), 0.0)

    def test_one_step_is_identity(self, schedule, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(denoise_one_step(IdentityDenoiser(schedule), x, 0.5, schedule), x)


class _OracleEps:
    """Returns the exact noise that produced x_hat from a known clean x."""

    def __init__(self, clean, sigma, schedule):
        self.clean, self.sigma, self.schedule = clean, sigma, schedule

    def eps(self, x_t, t, cond, x_bar, t_prime):
        x_hat = x_t / math.sqrt(sigma_to_alpha(self.sigma))
        return (x_hat - self.clean) / self.sigma


class TestDenoiseOneStep:
    def test_perfect_oracle_recovers_clean(self, schedule, rng):
        x = rng.uniform(-1, 1, size=(10, 6))
        x_hat = x + 0.5 * rng.normal(size=x.shape)
        out = denoise_one_step(_OracleEps(x, 0.5, schedule), x_hat, 0.5, schedule)
        np.testing.assert_allclose(out, x, atol=1e-14)

    @pytest.mark.parametrize("sigma", [0.25, 0.5])
    def test_x0_estimate_identity(self, schedule, sigma):
        rng = np.random.default_rng(int(sigma * 100))
        den = NeuralDenoiser.init(6, 3, schedule, hidden=(16,), seed=1)
        x_hat = rng.normal(size=(1000, 6))
        a = sigma_to_alpha(sigma)
        x_t = math.sqrt(a) * x_hat
        t_hat = sigma_to_timestep(schedule, sigma).t_hat
        eps = den.eps(x_t, t_hat, EMPTY, x_t, corrected_timestep(t_hat, 1.8, schedule.T))
        x0 = (x_t - math.sqrt(1 - a) * eps) / math.sqrt(a)
        assert np.max(np.abs(denoise_one_step(den, x_hat, sigma, schedule) - x0)) < 1e-10

    def test_passes_corrected_timestep(self, schedule):
        seen = {}

        class Spy(IdentityDenoiser):
            def eps(self, x_t, t, cond, x_bar, t_prime):
                seen.update(t=t, t_prime=t_prime, same=x_bar is x_t, cond=cond)
                return super().eps(x_t, t, cond, x_bar, t_prime)

        denoise_one_step(Spy(schedule), np.zeros(3), 0.5, schedule, k=1.8, cond=ADAPT)
        t_hat = sigma_to_timestep(schedule, 0.5).t_hat
        assert seen == {"t": t_hat, "t_prime": corrected_timestep(t_hat, 1.8, schedule.T), "same": True, "cond": ADAPT}

    def test_no_clamping(self, schedule):
        out = denoise_one_step(IdentityDenoiser(schedule), np.array([3.0, -4.0]), 0.5, schedule)
        np.testing.assert_array_equal(out, [3.0, -4.0])

    @pytest.mark.parametrize("sigma", [0.0, -0.5])
    def test_needs_positive_sigma(self, schedule, sigma):
        with pytest.raises(DomainError):
            denoise_one_step(IdentityDenoiser(schedule), np.zeros(2), sigma, schedule)


class TestGmmPosteriorMean:
    def test_conjugate_average(self):
        assert gmm_posterior_mean(np.zeros(1), 1.0, 1.0, np.array([2.0])) == pytest.approx([1.0])

    def test_small_noise_limit(self, rng):
        x = rng.normal(size=3)
        np.testing.assert_allclose(gmm_posterior_mean(np.zeros(3), 1.0, 1e-6, x), x, atol=1e-10)

    @pytest.mark.parametrize("x_hat", [[0.1, 0.2], [0.9, -0.4], [0.5, 0.5], [-0.3, 1.2]])
    def test_quadrature_oracle(self, x_hat):
        mu = np.array([[0.0, 0.2], [0.8, 0.5]])
        priors = np.array([0.3, 0.7])
        x_hat = np.array(x_hat)
        got = gmm_posterior_mean(mu, 0.15, 0.4, x_hat, priors)
        ref = quadrature_posterior_mean(mu, 0.15, 0.4, x_hat, priors)
        assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-6

    def test_far_point_no_underflow(self):
        mu = np.array([[0.0, 0.0], [1.0, 1.0]])
        out = gmm_posterior_mean(mu, 0.05, 0.1, np.array([50.0, 50.0]))
        assert np.all(np.isfinite(out))

    def test_beats_identity(self, world, rng):
        wm = world.in_model_space()
        x = normalize(sample_dataset(world, 250, 0).X)
        x_hat = x + 1.0 * rng.normal(size=x.shape)
        pm = gmm_posterior_mean(wm.means, wm.gamma, 1.0, x_hat, wm.priors)
        assert np.mean((pm - x) ** 2) < np.mean((x_hat - x) ** 2)

    def test_vjp_finite_differences(self, rng):
        mu, gamma, sigma = rng.normal(size=(3, 4)), 0.3, 0.5
        x, u = rng.normal(size=4), rng.normal(size=4)

        def f():
            return float(gmm_posterior_mean(mu, gamma, sigma, x) @ u)

        np.testing.assert_allclose(gmm_posterior_mean_vjp(mu, gamma, sigma, x, u), nn.numeric_gradient(f, x),
                                   rtol=1e-7, atol=1e-10)

    @pytest.mark.parametrize("gamma,sigma", [(0.0, 1.0), (1.0, 0.0)])
    def test_domain(self, gamma, sigma):
        with pytest.raises(DomainError):
            gmm_posterior_mean(np.zeros(2), gamma, sigma, np.zeros(2))


class TestAnalyticDenoiser:
    def test_roundtrip_through_eps(self, small_world, schedule, rng):
        wm = small_world.in_model_space()
        den = AnalyticDenoiser(wm, schedule)
        t = 300
        s = float(schedule.sigma_at(t))
        x_hat = rng.normal(size=(5, small_world.d))
        x_t = math.sqrt(schedule.alpha_bar[t]) * x_hat
        eps = den.eps(x_t, t, EMPTY, x_t, t)
        np.testing.assert_allclose(x_hat - s * eps, gmm_posterior_mean(wm.means, wm.gamma, s, x_hat, wm.priors),
                                   rtol=1e-12, atol=1e-12)

    def test_mse_below_identity(self, world, schedule, rng):
        wm = world.in_model_space()
        x = normalize(sample_dataset(world, 250, 1).X)
        s = 1.0  # sigma 0.5 in [0, 1] units
        x_hat = x + s * rng.normal(size=x.shape)
        out = denoise_one_step(AnalyticDenoiser(wm, schedule), x_hat, s, schedule)
        assert np.mean((out - x) ** 2) < np.mean((x_hat - x) ** 2)

    def test_vjp(self, small_world, schedule, rng):
        den = AnalyticDenoiser(small_world.in_model_space(), schedule)
        x, u = rng.normal(size=small_world.d), rng.normal(size=small_world.d)
        g = denoise_vjp(den, x, 0.5, schedule, 1.8, EMPTY, u)

        def f():
            return float(denoise_one_step(den, x, 0.5, schedule) @ u)

        np.testing.assert_allclose(g, nn.numeric_gradient(f, x), rtol=1e-6, atol=1e-9)


class TestNeuralDenoiser:
    def test_bit_identical_calls(self, schedule, rng):
        den = NeuralDenoiser.init(5, 2, schedule, hidden=(8,), seed=3)
        x = rng.normal(size=(4, 5))
        assert den.eps(x, 10, EMPTY, x, 18).tobytes() == den.eps(x, 10, EMPTY, x, 18).tobytes()

    def test_adapt_token_starts_as_empty(self, schedule):
        den = NeuralDenoiser.init(5, 2, schedule, hidden=(8,), seed=3)
        np.testing.assert_array_equal(den.tokens[1], den.tokens[0])

    def test_conditioning_changes_output(self, schedule, rng):
        den = NeuralDenoiser.init(5, 2, schedule, hidden=(8,), seed=3)
        x = rng.normal(size=5)
        assert not np.allclose(den.eps(x, 10, EMPTY, x, 18), den.eps(x, 10, Conditioning("class", 1), x, 18))

    @pytest.mark.parametrize("seed", range(10))
    def test_input_gradients(self, schedule, seed):
        rng = np.random.default_rng(seed)
        den = NeuralDenoiser.init(4, 2, schedule, hidden=(12, 12), seed=seed)
        x_t, x_bar, u = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
        gx, gb = den.eps_vjp(x_t, 200, EMPTY, x_bar, 360, u)
        fx = nn.numeric_gradient(lambda: float(den.eps(x_t, 200, EMPTY, x_bar, 360) @ u), x_t)
        fb = nn.numeric_gradient(lambda: float(den.eps(x_t, 200, EMPTY, x_bar, 360) @ u), x_bar)
        for a, b in ((gx, fx), (gb, fb)):
            assert np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)) < 1e-4

    def test_param_gradients(self, schedule, rng):
        den = NeuralDenoiser.init(3, 2, schedule, hidden=(6,), seed=0)
        x, u = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        grads = den.param_grads(x, 50, ADAPT, x, 90, u)

        def f():
            return float(np.sum(den.eps(x, 50, ADAPT, x, 90) * u))

        for arr, g in zip(den.parameters(), grads):
            np.testing.assert_allclose(g, nn.numeric_gradient(f, arr), rtol=1e-6, atol=1e-9)

    def test_save_load(self, tmp_path, schedule, rng):
        den = NeuralDenoiser.init(5, 2, schedule, hidden=(8,), seed=3, k=1.5)
        den.save(tmp_path / "d.bin")
        meta = sidecar_path(tmp_path / "d.bin").read_text()
        assert "schedule.kind = cosine" in meta and "k = 1.5" in meta
        back = NeuralDenoiser.load(tmp_path / "d.bin")
        x = rng.normal(size=5)
        np.testing.assert_array_equal(back.eps(x, 7, ADAPT, x, 12), den.eps(x, 7, ADAPT, x, 12))
        assert back.k == 1.5 and back.schedule.T == schedule.T

    def test_width_mismatch(self, schedule):
        den = NeuralDenoiser.init(5, 2, schedule, hidden=(8,), seed=3)
        with pytest.raises(ValueError):
            den.eps(np.zeros(4), 1, EMPTY, np.zeros(4), 1)


@pytest.fixture(scope="module")
def pretrained(schedule):
    world = make_gmm_world(3, 8, 0.08, seed=3)
    x = normalize(sample_dataset(world, 300, 0, "train").X)
    return world, pretrain_denoiser(x, 3, schedule, steps=800, hidden=(32, 32), seed=0)


class TestPretraining:
    def test_beats_identity_above_analytic(self, pretrained, schedule, rng):
        world, den = pretrained
        x = normalize(sample_dataset(world, 200, 0, "eval").X)
        analytic = AnalyticDenoiser(world.in_model_space(), schedule)
        for s in (0.5, 1.0):
            x_hat = x + s * rng.normal(size=x.shape)
            mse = {name: np.mean((denoise_one_step(d, x_hat, s, schedule) - x) ** 2)
                   for name, d in (("neural", den), ("identity", IdentityDenoiser(schedule)), ("analytic", analytic))}
            assert mse["analytic"] <= mse["neural"] < mse["identity"]

    def test_deterministic(self, schedule):
        x = np.random.default_rng(0).uniform(-1, 1, size=(50, 4))
        a = pretrain_denoiser(x, 2, schedule, steps=30, hidden=(8,), seed=5)
        b = pretrain_denoiser(x, 2, schedule, steps=30, hidden=(8,), seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)


def test_blur_constant_and_shape(rng):
    np.testing.assert_allclose(blur(np.full(10, 0.3)), 0.3)
    x = rng.normal(size=(3, 10))
    out = blur(x, 5)
    assert out.shape == x.shape
    np.testing.assert_allclose(out[:, 4], x[:, 2:7].mean(1))
