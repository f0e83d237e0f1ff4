"""
Randomized smoothing: denoise-and-classify base function, Monte-Carlo
PREDICT / CERTIFY, and certified radii.

Noise for example ``i`` is drawn from counter-based Philox substreams keyed
by ``(seed, i, phase, block)``, where a block is a fixed run of
:data:`BLOCK` consecutive draws. Counts therefore depend only on the seed
and example index, never on ``batch`` or on how examples are spread over
workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ABSTAIN
from .classifier import Classifier
from .data import denormalize, normalize
from .denoiser import EMPTY, Conditioning, Denoiser, denoise_one_step, denoise_vjp
from .errors import DomainError
from .nn import cross_entropy
from .schedule import NoiseSchedule, effective_sigma
from .stats import binom_p_value_two_sided, clopper_pearson_lower, normal_cdf, normal_quantile

BLOCK = 1000

# substream phases
SELECT, ESTIMATE, PREDICT, ATTACK = 0, 1, 2, 3


def substream(*path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(p) for p in path])))


@dataclass(frozen=True)
class NoiseKey:
    """Root of the noise substreams for one example."""

    seed: int
    index: int = 0

    def stream(self, phase: int, block: int = 0) -> np.random.Generator:
        return substream(self.seed, self.index, phase, block)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    batch: int = 1000
    n_predict: int = 100

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma!r}")
        if not (1 <= self.n0 <= self.n):
            raise DomainError(f"need 1 <= n0 <= n, got n0={self.n0}, n={self.n}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.batch < 1 or self.n_predict < 1:
            raise DomainError("batch and n_predict must be positive")


@dataclass
class PredictOutcome:
    outcome: int
    nA: int
    nB: int
    p_value: float


@dataclass
class Certificate:
    outcome: int
    pA_lower: float
    radius: float
    counts_selection: np.ndarray = field(repr=False)
    counts_estimation: np.ndarray = field(repr=False)

    @property
    def abstained(self) -> bool:
        return self.outcome == ABSTAIN


class DenoisedClassifier:
    """
    Base function ``f(x_noisy) = classifier(clamp(denorm(denoise(norm(x_noisy)))))``.

    ``sigma`` is the smoothing level in [0, 1] input space; the denoiser sees
    the doubled level of model space.
    """

    def __init__(self, denoiser: Denoiser, classifier: Classifier, sigma: float,
                 schedule: NoiseSchedule | None = None, k: float = 1.8, cond: Conditioning = EMPTY):
        self.denoiser = denoiser
        self.classifier = classifier
        self.sigma = sigma
        self.schedule = schedule if schedule is not None else denoiser.schedule
        self.k = k
        self.cond = cond
        self.num_classes = classifier.num_classes

    def denoised(self, x_noisy) -> np.ndarray:
        """Pre-clamp reconstruction in [0, 1] units."""
        m = normalize(x_noisy)
        if self.sigma == 0:
            return denormalize(m)
        out = denoise_one_step(self.denoiser, m, effective_sigma(self.sigma), self.schedule, self.k, self.cond)
        return denormalize(out)

    def __call__(self, x_noisy) -> np.ndarray:
        return self.classifier.predict(np.clip(self.denoised(x_noisy), 0.0, 1.0))

    def loss_and_grad(self, x_noisy, y):
        """Per-row CE of the pipeline and its gradient w.r.t. ``x_noisy``."""
        u = self.denoised(x_noisy)
        c = np.clip(u, 0.0, 1.0)
        loss, g_logits = cross_entropy(self.classifier.logits(c), y)
        g = self.classifier.vjp(c, g_logits) * ((u > 0.0) & (u < 1.0))
        g = 0.5 * g  # denormalize
        if self.sigma > 0:
            m = normalize(x_noisy)
            g = denoise_vjp(self.denoiser, m, effective_sigma(self.sigma), self.schedule, self.k, self.cond, g)
        return loss, 2.0 * g  # normalize


def base_classify(denoiser: Denoiser, classifier: Classifier, x_noisy, sigma: float,
                  schedule: NoiseSchedule | None = None, k: float = 1.8, cond: Conditioning = EMPTY):
    """Denoise-and-classify one input (or a batch) under smoothing level ``sigma``."""
    out = DenoisedClassifier(denoiser, classifier, sigma, schedule, k, cond)(np.atleast_2d(x_noisy))
    return int(out[0]) if np.ndim(x_noisy) == 1 else out


def sample_under_noise(base_fn, x, m: int, sigma: float, key: NoiseKey, phase: int,
                       num_classes: int, batch: int = 1000) -> np.ndarray:
    """Class counts of ``base_fn(x + N(0, sigma^2 I))`` over ``m`` draws."""
    if m < 1:
        raise DomainError("need at least one draw")
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    for block, start in enumerate(range(0, m, BLOCK)):
        size = min(BLOCK, m - start)
        noise = key.stream(phase, block).standard_normal((size, x.size))
        noise *= sigma
        for s in range(0, size, batch):
            labels = np.asarray(base_fn(x + noise[s:s + batch]))
            counts += np.bincount(labels, minlength=num_classes)
    return counts


def _top_two(counts: np.ndarray) -> tuple[int, int]:
    order = np.argsort(-counts, kind="stable")
    return int(order[0]), int(order[1])


def predict(base_fn, x, cfg: SmoothingConfig, key: NoiseKey, num_classes: int) -> PredictOutcome:
    counts = sample_under_noise(base_fn, x, cfg.n_predict, cfg.sigma, key, PREDICT, num_classes, cfg.batch)
    return predict_from_counts(counts, cfg.alpha)


def predict_from_counts(counts, alpha: float) -> PredictOutcome:
    counts = np.asarray(counts)
    cA, cB = _top_two(counts)
    nA, nB = int(counts[cA]), int(counts[cB])
    p = binom_p_value_two_sided(nA, nB)
    return PredictOutcome(cA if p <= alpha else ABSTAIN, nA, nB, p)


def certify(base_fn, x, cfg: SmoothingConfig, key: NoiseKey, num_classes: int) -> Certificate:
    counts0 = sample_under_noise(base_fn, x, cfg.n0, cfg.sigma, key, SELECT, num_classes, cfg.batch)
    counts = sample_under_noise(base_fn, x, cfg.n, cfg.sigma, key, ESTIMATE, num_classes, cfg.batch)
    return certify_from_counts(counts0, counts, cfg)


def certify_from_counts(counts0, counts, cfg: SmoothingConfig) -> Certificate:
    cA = int(np.argmax(counts0))
    pA = clopper_pearson_lower(int(counts[cA]), cfg.n, cfg.alpha)
    if pA > 0.5:
        return Certificate(cA, pA, certified_radius(cfg.sigma, pA), np.asarray(counts0), np.asarray(counts))
    return Certificate(ABSTAIN, pA, 0.0, np.asarray(counts0), np.asarray(counts))


def certified_radius(sigma: float, pA_lower: float) -> float:
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    if not 0.0 <= pA_lower <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {pA_lower!r}")
    if pA_lower <= 0.5:
        return 0.0
    if pA_lower == 1.0:
        return math.inf
    return sigma * normal_quantile(pA_lower)


def analytic_linear_pA(w, b: float, x, sigma: float) -> float:
    """Exact ``P(w.(x + delta) + b > 0)`` for ``delta ~ N(0, sigma^2 I)``."""
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0:
        raise DomainError("weight vector must be nonzero")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    return normal_cdf((float(w @ np.asarray(x, dtype=np.float64)) + b) / (sigma * norm))


def certify_many(base_fn, X, cfg: SmoothingConfig, seed: int, num_classes: int,
                 workers: int = 1) -> list[Certificate]:
    """Certify every row of ``X``; row ``i`` uses ``NoiseKey(seed, i)``."""
    def job(i):
        return certify(base_fn, X[i], cfg, NoiseKey(seed, i), num_classes)

    if workers <= 1:
        return [job(i) for i in range(len(X))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(len(X))))
