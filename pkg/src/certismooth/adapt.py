"""
Self-adaptation from a synthetic reference set.

Personalization fine-tunes the neural noise estimator under the adaptation
token with ``L_diff + lam * L_clf`` while the classifier stays frozen; the
classifier is then fine-tuned on denoised reference samples with the
denoiser frozen. ``mode="joint"`` instead updates both in the same step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .classifier import NeuralClassifier
from .data import GmmWorld, denormalize, normalize
from .denoiser import ADAPT, Conditioning, NeuralDenoiser, forward_diffuse
from .errors import TrainingDivergence
from .smoothing import substream


@dataclass
class ReferenceSet:
    X: np.ndarray  # (N, d) in [-1, 1] model space
    y: np.ndarray
    shots_per_class: int

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class AdaptConfig:
    lam: float = 0.01
    steps: int = 500
    classifier_steps: int | None = None
    lr_denoiser: float = 1e-2
    lr_classifier: float = 1e-3
    momentum: float = 0.9
    batch: int = 32
    mode: str = "staged"
    k: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam!r}")
        if self.steps < 0 or (self.classifier_steps is not None and self.classifier_steps < 0):
            raise ValueError("step counts must be nonnegative")
        if self.mode not in ("staged", "joint"):
            raise ValueError(f"unknown adaptation mode {self.mode!r}")


@dataclass
class StepTerms:
    l_diff: float
    l_clf: float
    grad_theta: list[np.ndarray] | None = None
    grad_psi: list[np.ndarray] | None = None


@dataclass
class AdaptResult:
    denoiser: NeuralDenoiser
    classifier: NeuralClassifier
    curve: list[tuple] = field(default_factory=list)


def synthesize_reference_set(generator: GmmWorld, classes, shots: int, seed: int) -> ReferenceSet:
    """``shots`` draws per class from the class-conditional generator, mapped to model space."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    X, y = [], []
    for c in classes:
        if not 0 <= c < generator.K:
            raise ValueError(f"unknown class {c}")
        for j in range(shots):
            X.append(normalize(generator.sample_class(c, substream(seed, 0xAEF, c, j))))
            y.append(c)
    return ReferenceSet(np.array(X), np.array(y, dtype=np.int64), shots)


def _t_prime(t, k, T):
    return np.clip(np.floor(k * np.asarray(t, dtype=np.float64) + 0.5), 0, T).astype(np.int64)


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def adaptation_terms(denoiser, classifier, X, y, t, noise, k: float = 1.8, cond: Conditioning = ADAPT,
                     lam: float = 0.0, theta: bool = False, psi: bool = False) -> StepTerms:
    """
    Batch-mean ``L_diff`` and ``L_clf`` with optional gradients.

    ``grad_theta`` is the gradient of ``L_diff + lam * L_clf`` w.r.t. the
    denoiser parameters; ``grad_psi`` that of ``L_clf`` w.r.t. the classifier.
    """
    X, noise = _rows(X), _rows(noise)
    y = np.atleast_1d(y)
    B = X.shape[0]
    schedule = denoiser.schedule
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    tp = _t_prime(t, k, schedule.T)
    x_t = forward_diffuse(X, t, noise, schedule)
    eps = denoiser.eps(x_t, t, cond, x_t, tp)
    a = schedule.alpha_bar[t][:, None]
    sig = np.sqrt((1.0 - a) / a)
    x_tilde = x_t / np.sqrt(a) - sig * eps
    u = denormalize(x_tilde)
    c = np.clip(u, 0.0, 1.0)
    ce, g_logits = nn.cross_entropy(classifier.logits(c), y)
    terms = StepTerms(float(((noise - eps) ** 2).sum(1).mean()), float(ce.mean()))
    g_logits = g_logits / B
    if theta:
        up_diff = 2.0 * (eps - noise) / B
        g_c = classifier.vjp(c, g_logits) * ((u > 0.0) & (u < 1.0))
        up_clf = -sig * (0.5 * g_c)
        terms.grad_theta = denoiser.param_grads(x_t, t, cond, x_t, tp, up_diff + lam * up_clf)
    if psi:
        terms.grad_psi = classifier.param_grads(c, g_logits)
    return terms


def loss_diff(denoiser, x_g, t, noise, cond: Conditioning = ADAPT, k: float = 1.8) -> float:
    """Self-conditioned noise-prediction error ``||eps - eps_hat||^2`` (batch mean)."""
    X, noise = _rows(x_g), _rows(noise)
    B = X.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    x_t = forward_diffuse(X, t, noise, denoiser.schedule)
    eps = denoiser.eps(x_t, t, cond, x_t, _t_prime(t, k, denoiser.schedule.T))
    return float(((noise - eps) ** 2).sum(1).mean())


def loss_clf(denoiser, classifier, x_g, label, t, noise, k: float = 1.8, cond: Conditioning = ADAPT) -> float:
    """Cross-entropy of the classifier on the one-step reconstruction of ``x_g`` (batch mean)."""
    return adaptation_terms(denoiser, classifier, x_g, label, t, noise, k, cond).l_clf


def _check(terms: StepTerms, step: int):
    if not (math.isfinite(terms.l_diff) and math.isfinite(terms.l_clf)):
        raise TrainingDivergence(f"non-finite adaptation loss at step {step}")


def _batches(refset: ReferenceSet, cfg: AdaptConfig, T: int, stage: int, steps: int):
    for step in range(steps):
        rng = substream(cfg.seed, 0xADA, stage, step)
        idx = rng.integers(0, len(refset), size=cfg.batch)
        t = rng.integers(1, T + 1, size=cfg.batch)
        noise = rng.standard_normal((cfg.batch, refset.X.shape[1]))
        yield step, refset.X[idx], refset.y[idx], t, noise


def personalize(denoiser: NeuralDenoiser, classifier, refset: ReferenceSet, cfg: AdaptConfig,
                curve: list | None = None) -> NeuralDenoiser:
    """Minimize ``L_diff + lam * L_clf`` over the denoiser; returns an adapted copy."""
    if len(refset) == 0:
        raise ValueError("reference set is empty")
    den = denoiser.copy()
    arrays = den.parameters()
    velocity = None
    for step, X, y, t, noise in _batches(refset, cfg, den.schedule.T, 0, cfg.steps):
        terms = adaptation_terms(den, classifier, X, y, t, noise, cfg.k, ADAPT, cfg.lam, theta=True)
        _check(terms, step)
        if curve is not None:
            curve.append(("personalize", step, terms.l_diff, terms.l_clf, terms.l_diff + cfg.lam * terms.l_clf))
        velocity = nn.sgd_step(arrays, terms.grad_theta, cfg.lr_denoiser, cfg.momentum, velocity)
    return den


def finetune_classifier(denoiser: NeuralDenoiser, classifier: NeuralClassifier, refset: ReferenceSet,
                        cfg: AdaptConfig, curve: list | None = None) -> NeuralClassifier:
    """Minimize ``L_clf`` over the classifier with the denoiser frozen; returns an adapted copy."""
    if len(refset) == 0:
        raise ValueError("reference set is empty")
    clf = classifier.copy()
    arrays = clf.parameters()
    velocity = None
    steps = cfg.steps if cfg.classifier_steps is None else cfg.classifier_steps
    for step, X, y, t, noise in _batches(refset, cfg, denoiser.schedule.T, 1, steps):
        terms = adaptation_terms(denoiser, clf, X, y, t, noise, cfg.k, ADAPT, psi=True)
        _check(terms, step)
        if curve is not None:
            curve.append(("classifier", step, terms.l_diff, terms.l_clf, terms.l_clf))
        velocity = nn.sgd_step(arrays, terms.grad_psi, cfg.lr_classifier, cfg.momentum, velocity)
    return clf


def run_adaptation(denoiser: NeuralDenoiser, classifier: NeuralClassifier, refset: ReferenceSet,
                   cfg: AdaptConfig) -> AdaptResult:
    curve: list[tuple] = []
    if cfg.mode == "staged":
        den = personalize(denoiser, classifier, refset, cfg, curve)
        clf = finetune_classifier(den, classifier, refset, cfg, curve)
        return AdaptResult(den, clf, curve)
    den, clf = denoiser.copy(), classifier.copy()
    theta, psi = den.parameters(), clf.parameters()
    v_theta = v_psi = None
    for step, X, y, t, noise in _batches(refset, cfg, den.schedule.T, 2, cfg.steps):
        terms = adaptation_terms(den, clf, X, y, t, noise, cfg.k, ADAPT, cfg.lam, theta=True, psi=True)
        _check(terms, step)
        curve.append(("joint", step, terms.l_diff, terms.l_clf, terms.l_diff + cfg.lam * terms.l_clf))
        v_theta = nn.sgd_step(theta, terms.grad_theta, cfg.lr_denoiser, cfg.momentum, v_theta)
        v_psi = nn.sgd_step(psi, terms.grad_psi, cfg.lr_classifier, cfg.momentum, v_psi)
    return AdaptResult(den, clf, curve)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "step", "L_diff", "L_clf", "total"])
        for row in curve:
            writer.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
