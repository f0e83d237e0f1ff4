"""Discrete diffusion noise schedules and the noise-level/timestep mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_K = 1.8


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` for ``t = 0..T``."""

    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        a = np.array(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise DomainError("alpha_bar must be a 1-D table with at least two entries")
        if a[0] < 1.0 - 1e-9 or a[-1] <= 0.0 or np.any(a > 1.0):
            raise DomainError("alpha_bar must start at 1 and stay in (0, 1]")
        if np.any(np.diff(a) >= 0):
            raise DomainError("alpha_bar must be strictly decreasing")
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bar", a)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def sigma_at(self, t) -> np.ndarray | float:
        """Noise level ``sqrt((1 - a) / a)`` in x-hat units at timestep ``t``."""
        a = self.alpha_bar[t]
        return np.sqrt((1.0 - a) / a)


@dataclass(frozen=True)
class TimestepMatch:
    t_hat: int
    alpha_bar_t: float
    residual: float


def build_schedule(kind: str = "cosine", T: int = 1000) -> NoiseSchedule:
    """Cosine (s = 0.008) or linear (beta in [1e-4, 0.02]) schedule with T steps."""
    T = int(T)
    if T < 2:
        raise DomainError(f"schedule needs T >= 2, got {T}")
    if kind == "cosine":
        s = 0.008
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar = f / math.cos(s / (1 + s) * math.pi / 2) ** 2
        alpha_bar[0] = 1.0
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise DomainError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alpha_bar, kind)


def sigma_to_alpha(sigma: float) -> float:
    """Signal fraction whose noise-to-signal ratio equals sigma**2."""
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma!r}")
    return 1.0 / (1.0 + sigma * sigma)


def sigma_to_timestep(schedule: NoiseSchedule, sigma: float) -> TimestepMatch:
    """Nearest schedule entry to sigma**2 in noise-to-signal ratio; ties go to smaller t."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    a = schedule.alpha_bar
    gaps = np.abs((1.0 - a) / a - sigma * sigma)
    t_hat = int(np.argmin(gaps))
    return TimestepMatch(t_hat, float(a[t_hat]), float(gaps[t_hat]))


def corrected_timestep(t_hat: int, k: float, T: int) -> int:
    """``clamp(round(k * t_hat), 0, T)`` with halves rounded up."""
    if not 0 <= t_hat <= T:
        raise DomainError(f"t_hat must lie in [0, {T}], got {t_hat}")
    if not k > 0:
        raise DomainError(f"correction factor must be positive, got {k!r}")
    return int(min(max(math.floor(k * t_hat + 0.5), 0), T))


def effective_sigma(sigma_unit: float) -> float:
    """Noise level after mapping [0, 1] inputs onto [-1, 1]."""
    if sigma_unit < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma_unit!r}")
    return 2.0 * sigma_unit
