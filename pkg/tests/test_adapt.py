import csv

import numpy as np
import pytest

from certismooth import nn
from certismooth.adapt import (AdaptConfig, ReferenceSet, adaptation_terms, finetune_classifier, loss_clf, loss_diff,
                               personalize, run_adaptation, synthesize_reference_set, write_curve)
from certismooth.classifier import NeuralClassifier
from certismooth.data import denormalize
from certismooth.denoiser import ADAPT, EMPTY, IdentityDenoiser, NeuralDenoiser, forward_diffuse
from certismooth.errors import TrainingDivergence
from certismooth.smoothing import substream


@pytest.fixture
def parts(small_world, schedule):
    den = NeuralDenoiser.init(small_world.d, small_world.K, schedule, hidden=(16,), seed=0)
    clf = NeuralClassifier(nn.ModelParams.init([small_world.d, 12, small_world.K], np.random.default_rng(1)))
    refset = synthesize_reference_set(small_world, range(small_world.K), 2, seed=0)
    return den, clf, refset


class NoiseOracle(IdentityDenoiser):
    """Knows the clean reference points and so recovers the exact noise."""

    def __init__(self, clean, schedule):
        super().__init__(schedule)
        self.clean = clean

    def eps(self, x_t, t, cond, x_bar, t_prime):
        a = self.schedule.alpha_bar[np.asarray(t)][:, None]
        return (x_t - np.sqrt(a) * self.clean) / np.sqrt(1 - a)


class NearestReference(IdentityDenoiser):
    """Perfect denoiser for inputs built from a known finite set: snaps to the closest member."""

    def __init__(self, members, schedule):
        super().__init__(schedule)
        self.members = members

    def eps(self, x_t, t, cond, x_bar, t_prime):
        a = self.schedule.alpha_bar[np.asarray(t)][:, None]
        dist = ((x_t[:, None, :] / np.sqrt(a)[:, :, None] - self.members[None]) ** 2).sum(-1)
        clean = self.members[np.argmin(dist, axis=1)]
        return (x_t - np.sqrt(a) * clean) / np.sqrt(1 - a)


def snapshot(arrays):
    return [a.copy() for a in arrays]


class TestReferenceSet:
    def test_one_shot(self, small_world):
        ref = synthesize_reference_set(small_world, range(3), 1, seed=0)
        assert len(ref) == 3 and sorted(ref.y.tolist()) == [0, 1, 2]
        assert ref.X.min() >= -1 and ref.X.max() <= 1

    def test_four_shots(self, small_world):
        ref = synthesize_reference_set(small_world, range(3), 4, seed=0)
        assert np.bincount(ref.y).tolist() == [4, 4, 4]

    def test_deterministic(self, small_world):
        a = synthesize_reference_set(small_world, range(3), 2, seed=7)
        b = synthesize_reference_set(small_world, range(3), 2, seed=7)
        np.testing.assert_array_equal(a.X, b.X)

    def test_unknown_class(self, small_world):
        with pytest.raises(ValueError):
            synthesize_reference_set(small_world, [0, 5], 1, seed=0)

    def test_config_defaults(self):
        cfg = AdaptConfig()
        assert (cfg.lam, cfg.mode) == (0.01, "staged")
        with pytest.raises(ValueError):
            AdaptConfig(lam=-1)
        with pytest.raises(ValueError):
            AdaptConfig(mode="both")


class TestLosses:
    def test_diff_oracle_is_zero(self, schedule, rng):
        x = rng.uniform(-1, 1, size=(4, 5))
        noise = rng.normal(size=x.shape)
        t = np.array([1, 10, 500, 999])
        assert loss_diff(NoiseOracle(x, schedule), x, t, noise) == pytest.approx(0.0, abs=1e-20)

    def test_diff_zero_output(self, schedule, rng):
        x, noise = rng.uniform(-1, 1, size=(3, 5)), rng.normal(size=(3, 5))
        assert loss_diff(IdentityDenoiser(schedule), x, 200, noise) == pytest.approx((noise ** 2).sum(1).mean())

    def test_clf_perfect_denoiser(self, schedule, parts, rng):
        _, clf, ref = parts
        noise = rng.normal(size=ref.X.shape)
        t = np.full(len(ref), 400)
        got = loss_clf(NoiseOracle(ref.X, schedule), clf, ref.X, ref.y, t, noise)
        clean, _ = nn.cross_entropy(clf.logits(np.clip(denormalize(ref.X), 0, 1)), ref.y)
        assert got == pytest.approx(clean.mean(), rel=1e-10)

    def test_clf_t_zero(self, parts, rng):
        den, clf, ref = parts
        noise = rng.normal(size=ref.X.shape)
        clean, _ = nn.cross_entropy(clf.logits(np.clip(denormalize(ref.X), 0, 1)), ref.y)
        assert loss_clf(den, clf, ref.X, ref.y, 0, noise) == pytest.approx(clean.mean(), rel=1e-12)

    def test_loss_values_match_terms(self, parts, rng):
        den, clf, ref = parts
        noise, t = rng.normal(size=ref.X.shape), rng.integers(1, 1001, size=len(ref))
        terms = adaptation_terms(den, clf, ref.X, ref.y, t, noise)
        assert terms.l_diff == loss_diff(den, ref.X, t, noise)
        assert terms.l_clf == loss_clf(den, clf, ref.X, ref.y, t, noise)


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_theta(self, small_world, schedule, seed):
        rng = np.random.default_rng(seed)
        den = NeuralDenoiser.init(small_world.d, small_world.K, schedule, hidden=(8,), seed=seed)
        clf = NeuralClassifier(nn.ModelParams.init([small_world.d, 6, small_world.K], rng))
        ref = synthesize_reference_set(small_world, range(3), 1, seed)
        noise, t = rng.normal(size=ref.X.shape), rng.integers(1, 150, size=3)
        terms = adaptation_terms(den, clf, ref.X, ref.y, t, noise, lam=0.5, theta=True)

        def f():
            tr = adaptation_terms(den, clf, ref.X, ref.y, t, noise)
            return tr.l_diff + 0.5 * tr.l_clf

        for arr, g in zip(den.parameters(), terms.grad_theta):
            assert _rel(g, nn.numeric_gradient(f, arr)) < 1e-4

    def test_psi(self, parts, rng):
        den, clf, ref = parts
        noise, t = rng.normal(size=ref.X.shape), rng.integers(1, 150, size=len(ref))
        terms = adaptation_terms(den, clf, ref.X, ref.y, t, noise, psi=True)
        for arr, g in zip(clf.parameters(), terms.grad_psi):
            assert _rel(g, nn.numeric_gradient(lambda: adaptation_terms(den, clf, ref.X, ref.y, t, noise).l_clf, arr)) < 1e-4

    def test_combined_gradient_is_linear(self, parts, rng):
        den, clf, ref = parts
        noise, t = rng.normal(size=ref.X.shape), rng.integers(1, 1001, size=len(ref))
        g0 = adaptation_terms(den, clf, ref.X, ref.y, t, noise, lam=0.0, theta=True).grad_theta
        g1 = adaptation_terms(den, clf, ref.X, ref.y, t, noise, lam=1.0, theta=True).grad_theta
        gl = adaptation_terms(den, clf, ref.X, ref.y, t, noise, lam=0.01, theta=True).grad_theta
        for a, b, c in zip(g0, g1, gl):
            np.testing.assert_allclose(c, a + 0.01 * (b - a), rtol=0, atol=1e-10)


class TestTraining:
    def test_personalize_freezes_classifier(self, parts):
        den, clf, ref = parts
        before = snapshot(clf.parameters())
        out = personalize(den, clf, ref, AdaptConfig(steps=5, batch=4))
        for a, b in zip(before, clf.parameters()):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(out.tokens[1], den.tokens[1])  # the adaptation token is trained

    def test_finetune_freezes_denoiser(self, parts):
        den, clf, ref = parts
        before = snapshot(den.parameters())
        finetune_classifier(den, clf, ref, AdaptConfig(steps=5, batch=4))
        for a, b in zip(before, den.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_zero_steps_identity(self, parts):
        den, clf, ref = parts
        res = run_adaptation(den, clf, ref, AdaptConfig(steps=0, classifier_steps=0))
        for a, b in zip(den.parameters(), res.denoiser.parameters()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(clf.parameters(), res.classifier.parameters()):
            np.testing.assert_array_equal(a, b)
        assert res.curve == []

    def test_diffusion_loss_decreases(self, small_world, schedule):
        drops = []
        for seed in range(5):
            den = NeuralDenoiser.init(small_world.d, small_world.K, schedule, hidden=(16,), seed=seed)
            clf = NeuralClassifier(nn.ModelParams.init([small_world.d, 8, small_world.K], np.random.default_rng(seed)))
            ref = synthesize_reference_set(small_world, range(3), 1, seed)
            rng = substream(seed, 99)
            t = rng.integers(1, 1001, size=(64,))
            X = ref.X[rng.integers(0, 3, size=64)]
            noise = rng.standard_normal(X.shape)
            before = loss_diff(den, X, t, noise, ADAPT)
            after = loss_diff(personalize(den, clf, ref, AdaptConfig(lam=0.0, steps=150, seed=seed)), X, t, noise, ADAPT)
            drops.append(before - after)
        assert np.mean(drops) > 0

    def test_classifier_learns_on_denoised_refset(self, small_world, schedule):
        gains = []
        for seed in range(5):
            ref = synthesize_reference_set(small_world, range(3), 2, seed)
            clf = NeuralClassifier(nn.ModelParams.init([small_world.d, 8, small_world.K], np.random.default_rng(seed)))
            cfg = AdaptConfig(steps=200, lr_classifier=0.1, batch=8, seed=seed)
            tuned = finetune_classifier(NearestReference(ref.X, schedule), clf, ref, cfg)
            clean = np.clip(denormalize(ref.X), 0, 1)
            gains.append(np.mean(tuned.predict(clean) == ref.y) - np.mean(clf.predict(clean) == ref.y))
        assert min(gains) >= 0 and np.mean(gains) > 0

    def test_joint_mode_stays_finite(self, parts):
        den, clf, ref = parts
        res = run_adaptation(den, clf, ref, AdaptConfig(steps=40, mode="joint", batch=8))
        assert len(res.curve) == 40
        assert all(np.isfinite(row[2:]).all() for row in res.curve)

    def test_divergence_surfaces(self, parts):
        den, clf, ref = parts
        with pytest.raises(TrainingDivergence), np.errstate(all="ignore"):
            personalize(den, clf, ref, AdaptConfig(steps=200, lr_denoiser=1e6, momentum=0.0, batch=4))

    def test_staged_curve_csv(self, parts, tmp_path):
        den, clf, ref = parts
        res = run_adaptation(den, clf, ref, AdaptConfig(steps=3, classifier_steps=2, batch=4))
        write_curve(res.curve, tmp_path / "c.csv")
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["stage", "step", "L_diff", "L_clf", "total"]
        assert [r[0] for r in rows[1:]] == ["personalize"] * 3 + ["classifier"] * 2
