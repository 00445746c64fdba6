"""DDPM noise schedule, forward noising, conditioned loss, and sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tensor


@dataclass
class NoiseSchedule:
    """Per-timestep beta/alpha tables for the linear forward process."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def snr(self, t):
        return self.alpha_bar[t] / (1.0 - self.alpha_bar[t])


def make_schedule(T, beta_start=1e-4, beta_end=0.05, require_destroyed=False):
    """Linear beta schedule with f64 cumulative products.

    require_destroyed additionally checks that the terminal alpha_bar is
    below 0.05, i.e. the forward process actually destroys the signal;
    generation configs enforce it, short hand-built test schedules may not.
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(
            f"betas must satisfy 0 < {beta_start} < {beta_end} < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if require_destroyed and alpha_bar[-1] >= 0.05:
        raise ConfigError(
            f"terminal alpha_bar {alpha_bar[-1]:.4f} >= 0.05; increase T "
            f"or beta_end so the forward process destroys the signal")
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(z0, t, eps, schedule):
    """Closed-form forward noising z_t = sqrt(ab)*z0 + sqrt(1-ab)*eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    if not 0 <= t < schedule.T:
        raise ContractError(f"timestep {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def denoise_loss(denoiser, batch, schedule):
    """Mean squared error between injected and predicted noise.

    batch: list of (z0, eps, t, streams) where streams maps
    {"text","layout","embedding"} to TokenStreams. Gradients flow into the
    denoiser's trainable parameters only; encoders are frozen numpy.
    """
    if not batch:
        raise ContractError("denoise_loss: empty batch")
    total = None
    for z0, eps, t, streams in batch:
        z_t = q_sample(z0, t, eps, schedule)
        eps_hat = denoiser.predict_epsilon(
            z_t, t, streams["text"], streams["layout"], streams["embedding"])
        err = nc.sub(eps_hat, Tensor(eps))
        term = nc.tmean(nc.square(err))
        total = term if total is None else nc.add(total, term)
    return nc.mul(total, 1.0 / len(batch))


def ddpm_step(z_t, t, eps_hat, schedule, rng):
    """One ancestral reverse step; t == 0 adds no noise."""
    if not 0 <= t < schedule.T:
        raise ContractError(f"timestep {t} outside [0, {schedule.T})")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta = schedule.beta[t]
    ab = schedule.alpha_bar[t]
    mu = (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(schedule.alpha[t])
    if t == 0:
        return mu
    ab_prev = schedule.alpha_bar[t - 1]
    var = (1.0 - ab_prev) / (1.0 - ab) * beta  # posterior variance
    return mu + np.sqrt(var) * rng.normal(z_t.shape)


def sample(denoiser, streams, schedule, rng, latent_shape):
    """Full reverse loop from z_T ~ N(0, I) to an estimated clean latent."""
    if tuple(latent_shape) != tuple(denoiser.params.latent_shape):
        raise ConfigError(
            f"requested latent {latent_shape} does not match configured "
            f"{denoiser.params.latent_shape}")
    z = rng.normal(tuple(latent_shape))
    with nc.no_grad():
        for t in range(schedule.T - 1, -1, -1):
            eps_hat = denoiser.predict_epsilon(
                z, t, streams["text"], streams["layout"],
                streams["embedding"]).data
            z = ddpm_step(z, t, eps_hat, schedule, rng)
    return z


class Adam:
    """Adaptive moment estimation with global gradient-norm clipping."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm=1.0):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        grads = {name: (p.grad if p.grad is not None
                        else np.zeros_like(p.data))
                 for name, p in self.params}
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g ** 2).sum())
                                for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        for name, p in self.params:
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mh = self.m[name] / (1 - self.b1 ** self.t)
            vh = self.v[name] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()
