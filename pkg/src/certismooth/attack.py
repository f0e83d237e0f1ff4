"""
L2 PGD against smoothed denoise-and-classify pipelines.

The attack ascends the noise-averaged cross-entropy (SmoothAdv style), with
gradients propagated through the one-step denoiser. Success is judged with
PREDICT on the adversarial input; an abstention there counts as a success
for the attacker.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import ABSTAIN
from .smoothing import ATTACK, DenoisedClassifier, NoiseKey, SmoothingConfig, predict, substream


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 100
    m_test: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon!r}")
        if self.steps < 1 or self.m_test < 1:
            raise ValueError("steps and m_test must be at least 1")


@dataclass
class EvalRecord:
    index: int
    label: int
    epsilon: float
    clean_outcome: int
    clean_fallback: int | None
    clean_correct: bool
    adv_outcome: int
    robust: bool
    perturbation_norm: float
    certified_radius: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def pgd_step_size(epsilon: float, steps: int) -> float:
    return 4.0 / 3.0 * epsilon / steps


def project_l2(x_adv, x, epsilon: float) -> np.ndarray:
    delta = np.asarray(x_adv, dtype=np.float64) - x
    norm = float(np.linalg.norm(delta))
    if norm <= epsilon:
        return x + delta
    return x + delta * (epsilon / norm)


def _within_budget(x_adv, x, epsilon: float) -> np.ndarray:
    # pull rounding overshoot back inside the ball; shrinking toward x stays in the box
    while float(np.linalg.norm(x_adv - x)) > epsilon:
        x_adv = np.clip(x + (x_adv - x) * (1.0 - 2.0 ** -40), 0.0, 1.0)
    return x_adv


def smoothadv_grad(pipeline: DenoisedClassifier, x, y: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Mean over ``m`` Gaussian draws of the input gradient of CE(pipeline(x + delta), y)."""
    x = np.asarray(x, dtype=np.float64)
    noisy = x + pipeline.sigma * rng.standard_normal((m, x.size))
    _, g = pipeline.loss_and_grad(noisy, np.full(m, y))
    return g.mean(axis=0)


def pgd_l2(pipeline: DenoisedClassifier, x, y: int, atk: AttackConfig, index: int = 0) -> np.ndarray:
    """
    ``steps`` iterations of ``x <- clip01(project(x + step * g / ||g||))``.

    A zero gradient skips the step. Noise inside each gradient estimate is
    fresh per step, drawn from ``(seed, index, ATTACK, step)``.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    if atk.epsilon == 0:
        return x_adv
    step = pgd_step_size(atk.epsilon, atk.steps)
    for s in range(atk.steps):
        g = smoothadv_grad(pipeline, x_adv, y, atk.m_test, substream(atk.seed, index, ATTACK, s))
        norm = float(np.linalg.norm(g))
        if norm == 0.0 or not np.isfinite(norm):
            continue
        x_adv = _within_budget(np.clip(project_l2(x_adv + step * g / norm, x, atk.epsilon), 0.0, 1.0),
                               x, atk.epsilon)
    return x_adv


def evaluate_point(pipeline: DenoisedClassifier, x, y: int, index: int, cfg: SmoothingConfig,
                   atk: AttackConfig) -> EvalRecord:
    key = NoiseKey(atk.seed, index)
    K = pipeline.num_classes
    clean = predict(pipeline, x, cfg, key, K)
    fallback = None
    if clean.outcome == ABSTAIN:
        fallback = int(pipeline(np.atleast_2d(x))[0])
        clean_correct = fallback == y
    else:
        clean_correct = clean.outcome == y
    x_adv = pgd_l2(pipeline, x, y, atk, index)
    # same PREDICT substream as the clean query: at epsilon 0 both agree
    adv = predict(pipeline, x_adv, cfg, key, K)
    return EvalRecord(index, int(y), atk.epsilon, clean.outcome, fallback, bool(clean_correct),
                      adv.outcome, adv.outcome == y, float(np.linalg.norm(x_adv - x)))


def empirical_eval(pipeline: DenoisedClassifier, X, y, cfg: SmoothingConfig, atk: AttackConfig,
                   workers: int = 1) -> tuple[list[EvalRecord], dict]:
    """Per-point records plus clean (abstain-fallback) and robust accuracy."""
    def job(i):
        return evaluate_point(pipeline, X[i], int(y[i]), i, cfg, atk)

    if workers <= 1:
        records = [job(i) for i in range(len(X))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, range(len(X))))
    return records, summarize(records)


def summarize(records: list[EvalRecord]) -> dict:
    n = len(records)
    return {
        "epsilon": records[0].epsilon if records else None,
        "n": n,
        "clean_accuracy": sum(r.clean_correct for r in records) / n if n else 0.0,
        "clean_predict_accuracy": sum(r.clean_outcome == r.label for r in records) / n if n else 0.0,
        "robust_accuracy": sum(r.robust for r in records) / n if n else 0.0,
        "abstain_rate": sum(r.clean_outcome == ABSTAIN for r in records) / n if n else 0.0,
        "max_perturbation_norm": max((r.perturbation_norm for r in records), default=0.0),
    }
