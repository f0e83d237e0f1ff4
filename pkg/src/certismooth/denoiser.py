"""
Noise estimators ``eps(x_t, t, cond | x_bar, t_prime)`` and one-step denoising.

All denoisers operate in [-1, 1] model space on row batches ``(N, d)``; a
single vector is accepted wherever a batch is. Timesteps may be a scalar or
a per-row integer array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import GmmWorld
from .errors import DataError, DomainError, TrainingDivergence
from .schedule import (NoiseSchedule, build_schedule, corrected_timestep, sigma_to_alpha,
                       sigma_to_timestep)

TIME_EMBED_DIM = 16
TOKEN_EMBED_DIM = 8


@dataclass(frozen=True)
class Conditioning:
    """Prompt stand-in: empty prompt, a class token, or the adaptation token."""

    kind: str = "empty"
    index: int | None = None

    def __post_init__(self):
        if self.kind not in ("empty", "class", "adapt"):
            raise ValueError(f"unknown conditioning kind {self.kind!r}")
        if (self.kind == "class") != (self.index is not None):
            raise ValueError("a class index is required for, and only for, class conditioning")

    def token_id(self, num_classes: int) -> int:
        if self.kind == "empty":
            return 0
        if self.kind == "adapt":
            return 1
        if not 0 <= self.index < num_classes:
            raise ValueError(f"class token {self.index} out of range for {num_classes} classes")
        return 2 + self.index

    @classmethod
    def parse(cls, text: str) -> "Conditioning":
        if text in ("empty", ""):
            return EMPTY
        if text == "adapt":
            return ADAPT
        if text.startswith("class:"):
            return cls("class", int(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse conditioning {text!r}")


EMPTY = Conditioning("empty")
ADAPT = Conditioning("adapt")


def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _per_row(t, n: int) -> np.ndarray:
    t = np.asarray(t)
    return np.full(n, int(t)) if t.ndim == 0 else t.astype(np.int64)


def forward_diffuse(x, t, noise, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(a_t) x + sqrt(1 - a_t) noise`` with per-row or shared timesteps."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValueError(f"signal {x.shape} and noise {noise.shape} differ in shape")
    a = schedule.alpha_bar[np.asarray(t)]
    if np.ndim(a) == 1 and x.ndim == 2:
        a = a[:, None]
    return np.sqrt(a) * x + np.sqrt(1.0 - a) * noise


class Denoiser:
    """Noise-estimator contract plus its input vector-Jacobian product."""

    schedule: NoiseSchedule

    def eps(self, x_t, t, cond: Conditioning, x_bar, t_prime) -> np.ndarray:
        raise NotImplementedError

    def eps_vjp(self, x_t, t, cond, x_bar, t_prime, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``<upstream, eps(...)>`` w.r.t. ``x_t`` and ``x_bar``."""
        raise NotImplementedError


def eps_estimate(denoiser: Denoiser, x_t, t, cond, x_bar, t_prime) -> np.ndarray:
    x_t = np.asarray(x_t)
    if x_t.shape != np.shape(x_bar):
        raise ValueError("x_t and x_bar must have the same shape")
    return denoiser.eps(x_t, t, cond, x_bar, t_prime)


class IdentityDenoiser(Denoiser):
    """Predicts zero noise, so one-step denoising returns its input."""

    def __init__(self, schedule: NoiseSchedule | None = None):
        self.schedule = schedule or build_schedule()

    def eps(self, x_t, t, cond, x_bar, t_prime):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))

    def eps_vjp(self, x_t, t, cond, x_bar, t_prime, upstream):
        z = np.zeros_like(np.asarray(upstream, dtype=np.float64))
        return z, z.copy()


def gmm_posterior_mean(mu, gamma: float, sigma: float, x_hat, priors=None) -> np.ndarray:
    """
    E[x | x_hat] for x ~ sum_c prior_c N(mu_c, gamma^2 I) and x_hat = x + N(0, sigma^2 I).

    ``mu`` is a single mean ``(d,)`` or a stack ``(K, d)``; responsibilities are
    computed in log-space.
    """
    if not (gamma > 0 and sigma > 0):
        raise DomainError(f"gamma and sigma must be positive, got ({gamma!r}, {sigma!r})")
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    x, single = _rows(x_hat)
    g2, s2 = gamma * gamma, sigma * sigma
    shrink = g2 / (g2 + s2)
    r = _responsibilities(mu, g2 + s2, x, priors)
    out = shrink * x + (1.0 - shrink) * (r @ mu)
    return out[0] if single else out


def _responsibilities(mu, var, x, priors):
    log_prior = np.log(np.full(mu.shape[0], 1.0 / mu.shape[0]) if priors is None else np.asarray(priors))
    logits = log_prior - ((x[:, None, :] - mu[None]) ** 2).sum(-1) / (2.0 * var)
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    return r / r.sum(axis=1, keepdims=True)


def gmm_posterior_mean_vjp(mu, gamma, sigma, x_hat, upstream, priors=None) -> np.ndarray:
    """``J^T u`` for the posterior-mean map; its Jacobian is symmetric."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    x, single = _rows(x_hat)
    u, _ = _rows(upstream)
    g2, s2 = gamma * gamma, sigma * sigma
    var = g2 + s2
    shrink = g2 / var
    r = _responsibilities(mu, var, x, priors)
    mean_mu = r @ mu
    proj = u @ mu.T  # (N, K): mu_c . u
    # J = shrink I + (1 - shrink)/var * sum_c r_c mu_c (mu_c - mean_mu)^T
    cov_u = (r * proj) @ mu - (r * proj).sum(1, keepdims=True) * mean_mu
    out = shrink * u + (1.0 - shrink) / var * cov_u
    return out[0] if single else out


class AnalyticDenoiser(Denoiser):
    """
    Exact posterior-mean denoiser for a model-space GmmWorld, expressed as a
    noise estimator through the schedule: ``eps = (x_hat - E[x|x_hat]) / sigma_t``
    with ``x_hat = x_t / sqrt(a_t)``. ``x_bar`` and ``t_prime`` are ignored.
    """

    def __init__(self, world: GmmWorld, schedule: NoiseSchedule | None = None):
        self.world = world
        self.schedule = schedule or build_schedule()

    def _prep(self, x_t, t):
        x, single = _rows(x_t)
        t = _per_row(t, x.shape[0])
        a = self.schedule.alpha_bar[t][:, None]
        sig = np.sqrt((1.0 - a) / a)
        return x, single, a, sig, t

    def eps(self, x_t, t, cond, x_bar, t_prime):
        x, single, a, sig, t = self._prep(x_t, t)
        out = np.zeros_like(x)
        live = t > 0
        if np.any(live):
            xh = x[live] / np.sqrt(a[live])
            for s in np.unique(sig[live, 0]):
                rows = sig[live, 0] == s
                pm = gmm_posterior_mean(self.world.means, self.world.gamma, s, xh[rows], self.world.priors)
                out[np.flatnonzero(live)[rows]] = (xh[rows] - pm) / s
        return out[0] if single else out

    def eps_vjp(self, x_t, t, cond, x_bar, t_prime, upstream):
        x, single, a, sig, t = self._prep(x_t, t)
        u, _ = _rows(upstream)
        g = np.zeros_like(x)
        live = t > 0
        if np.any(live):
            xh = x[live] / np.sqrt(a[live])
            for s in np.unique(sig[live, 0]):
                rows = sig[live, 0] == s
                idx = np.flatnonzero(live)[rows]
                ur = u[idx]
                jt = gmm_posterior_mean_vjp(self.world.means, self.world.gamma, s, xh[rows], ur,
                                            self.world.priors)
                g[idx] = (ur - jt) / (s * np.sqrt(a[idx]))
        z = np.zeros_like(g)
        return (g[0], z[0]) if single else (g, z)


def timestep_embedding(t, T: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at geometrically spaced frequencies 1..100."""
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = np.geomspace(1.0, 100.0, dim // 2)
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)], axis=1)


class NeuralDenoiser(Denoiser):
    """
    MLP noise estimator on ``[x_t, x_bar, emb(t), emb(t'), token]``.

    The token embedding table has rows ``[empty, adapt, class_0, ...]`` and is
    trained along with the network.
    """

    def __init__(self, params: nn.ModelParams, tokens: np.ndarray, schedule: NoiseSchedule,
                 num_classes: int, k: float = 1.8):
        self.params = params
        self.tokens = tokens
        self.schedule = schedule
        self.num_classes = num_classes
        self.k = k
        self.d = params.out_dim

    @classmethod
    def init(cls, d: int, num_classes: int, schedule: NoiseSchedule, hidden=(128, 128),
             seed: int = 0, k: float = 1.8) -> "NeuralDenoiser":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE0]))
        in_dim = 2 * d + 2 * TIME_EMBED_DIM + TOKEN_EMBED_DIM
        params = nn.ModelParams.init([in_dim, *hidden, d], rng)
        tokens = rng.normal(0.0, 0.5, size=(2 + num_classes, TOKEN_EMBED_DIM))
        tokens[1] = tokens[0]  # the adaptation token starts as the empty prompt
        return cls(params, tokens, schedule, num_classes, k)

    def _inputs(self, x_t, t, cond, x_bar, t_prime):
        x, single = _rows(x_t)
        xb, _ = _rows(x_bar)
        if x.shape[1] != self.d or xb.shape != x.shape:
            raise ValueError(f"expected inputs of width {self.d}")
        n = x.shape[0]
        T = self.schedule.T
        tok = np.broadcast_to(self.tokens[cond.token_id(self.num_classes)], (n, TOKEN_EMBED_DIM))
        feats = np.concatenate([x, xb, timestep_embedding(_per_row(t, n), T),
                                timestep_embedding(_per_row(t_prime, n), T), tok], axis=1)
        return feats, single

    def eps(self, x_t, t, cond, x_bar, t_prime):
        feats, single = self._inputs(x_t, t, cond, x_bar, t_prime)
        out = nn.forward(self.params, feats)
        return out[0] if single else out

    def eps_vjp(self, x_t, t, cond, x_bar, t_prime, upstream):
        feats, single = self._inputs(x_t, t, cond, x_bar, t_prime)
        u, _ = _rows(upstream)
        g = nn.backward(self.params, feats, u).input_grad
        gx, gb = g[:, :self.d], g[:, self.d:2 * self.d]
        return (gx[0], gb[0]) if single else (gx, gb)

    def parameters(self) -> list[np.ndarray]:
        return self.params.arrays() + [self.tokens]

    def param_grads(self, x_t, t, cond, x_bar, t_prime, upstream) -> list[np.ndarray]:
        """Gradients of ``<upstream, eps(...)>`` aligned with :meth:`parameters`."""
        feats, _ = self._inputs(x_t, t, cond, x_bar, t_prime)
        u, _ = _rows(upstream)
        bundle = nn.backward(self.params, feats, u)
        tok_grad = np.zeros_like(self.tokens)
        tok_grad[cond.token_id(self.num_classes)] = bundle.input_grad[:, -TOKEN_EMBED_DIM:].sum(0)
        return bundle.param_grads + [tok_grad]

    def copy(self) -> "NeuralDenoiser":
        return NeuralDenoiser(self.params.copy(), self.tokens.copy(), self.schedule, self.num_classes, self.k)

    def save(self, path) -> None:
        path = Path(path)
        nn.save_params(self.params, path, extra=[self.tokens])
        meta = {
            "schedule.kind": self.schedule.kind,
            "schedule.T": self.schedule.T,
            "k": self.k,
            "d": self.d,
            "num_classes": self.num_classes,
            "embed.time_dim": TIME_EMBED_DIM,
            "embed.token_dim": TOKEN_EMBED_DIM,
        }
        sidecar_path(path).write_text("".join(f"{key} = {val}\n" for key, val in meta.items()))

    @classmethod
    def load(cls, path) -> "NeuralDenoiser":
        path = Path(path)
        params, extra = nn.load_params(path)
        meta = {}
        for line in sidecar_path(path).read_text().splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                meta[key.strip()] = val.strip()
        if not extra:
            raise DataError(f"{path}: missing token embedding table")
        schedule = build_schedule(meta["schedule.kind"], int(meta["schedule.T"]))
        return cls(params, extra[0], schedule, int(meta["num_classes"]), float(meta["k"]))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def denoise_one_step(denoiser: Denoiser, x_hat, sigma: float, schedule: NoiseSchedule,
                     k: float = 1.8, cond: Conditioning = EMPTY) -> np.ndarray:
    """
    ``x_hat - sigma * eps(sqrt(a) x_hat, t_hat, cond | sqrt(a) x_hat, k t_hat)``.

    ``a = 1 / (1 + sigma^2)`` exactly; ``t_hat`` is the nearest schedule index.
    No clamping happens here.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    x_t, t_hat, t_prime = _query(x_hat, sigma, schedule, k)
    return np.asarray(x_hat, dtype=np.float64) - sigma * denoiser.eps(x_t, t_hat, cond, x_t, t_prime)


def denoise_vjp(denoiser: Denoiser, x_hat, sigma: float, schedule: NoiseSchedule, k: float,
                cond: Conditioning, upstream) -> np.ndarray:
    """Gradient of ``<upstream, denoise_one_step(x_hat)>`` w.r.t. ``x_hat``."""
    x_t, t_hat, t_prime = _query(x_hat, sigma, schedule, k)
    g_xt, g_bar = denoiser.eps_vjp(x_t, t_hat, cond, x_t, t_prime, upstream)
    scale = math.sqrt(sigma_to_alpha(sigma))
    return np.asarray(upstream, dtype=np.float64) - sigma * scale * (g_xt + g_bar)


def _query(x_hat, sigma, schedule, k):
    match = sigma_to_timestep(schedule, sigma)
    t_prime = corrected_timestep(match.t_hat, k, schedule.T)
    x_t = math.sqrt(sigma_to_alpha(sigma)) * np.asarray(x_hat, dtype=np.float64)
    return x_t, match.t_hat, t_prime


def blur(x, window: int = 5) -> np.ndarray:
    """Moving average along the feature axis with edge replication (the 'upsampled' look)."""
    x, single = _rows(x)
    pad = window // 2
    padded = np.pad(x, ((0, 0), (pad, window - 1 - pad)), mode="edge")
    c = np.cumsum(np.pad(padded, ((0, 0), (1, 0))), axis=1)
    out = (c[:, window:] - c[:, :-window]) / window
    return out[0] if single else out


def pretrain_denoiser(train_x: np.ndarray, num_classes: int, schedule: NoiseSchedule, steps: int = 4000,
                      lr: float = 0.01, momentum: float = 0.9, batch: int = 64, hidden=(128, 128),
                      seed: int = 0, k: float = 1.8, blur_window: int = 5, log=None) -> NeuralDenoiser:
    """
    Train a super-resolution-style noise estimator on model-space samples.

    The target is ``||eps - eps_hat||^2`` under the empty prompt with
    ``t ~ U{1..T}``. The conditioning input is a blurred copy of the clean
    sample diffused to an independent level ``t' ~ U{0..T}``.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    den = NeuralDenoiser.init(train_x.shape[1], num_classes, schedule, hidden, seed, k)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E7]))
    arrays = den.parameters()
    velocity = None
    T = schedule.T
    for step in range(steps):
        x0 = train_x[rng.integers(0, train_x.shape[0], size=batch)]
        t = rng.integers(1, T + 1, size=batch)
        t_prime = rng.integers(0, T + 1, size=batch)
        noise = rng.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, noise, schedule)
        x_bar = forward_diffuse(blur(x0, blur_window), t_prime, rng.standard_normal(x0.shape), schedule)
        pred = den.eps(x_t, t, EMPTY, x_bar, t_prime)
        loss = float(((pred - noise) ** 2).sum(1).mean())
        if not math.isfinite(loss):
            raise TrainingDivergence(f"pretraining loss became {loss} at step {step}")
        grads = den.param_grads(x_t, t, EMPTY, x_bar, t_prime, 2.0 * (pred - noise) / batch)
        velocity = nn.sgd_step(arrays, grads, lr, momentum, velocity)
        if log is not None:
            log(step, loss)
    # the adaptation token mirrors the empty prompt until personalization
    den.tokens[1] = den.tokens[0]
    return den
