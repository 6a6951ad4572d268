"""Gaussian noising schedule, forward/reverse steps, and ancestral sampling.

Timesteps are 1-based: t in [1, T]. Schedule coefficients are kept in
float64 (the cumulative product over hundreds of steps would lose digits
in float32) and cast to float32 only when they enter tensor arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .rng import make_rng
from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """Per-step noise fractions and the derived cumulative quantities.

    beta[t-1] is the step-t noise fraction; alpha = 1 - beta;
    alpha_bar is the running product of alpha; posterior_var is the
    reverse-conditional variance (first entry pinned to beta[0]).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T,):
            raise ValueError(f"beta must have shape ({self.T},)")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        post = (1.0 - prev) / (1.0 - alpha_bar) * beta
        post[0] = beta[0]
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_var", post)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def beta_t(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_t(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def posterior_var_t(self, t: int) -> float:
        return float(self.posterior_var[self._check_t(t) - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Linearly spaced beta schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return Schedule(T=T, beta=beta)


def forward_step(x_prev: Tensor, t: int, schedule: Schedule, noise: Tensor) -> Tensor:
    """One noising step: sqrt(alpha_t) x_{t-1} + sqrt(1-alpha_t) noise."""
    a = schedule.alpha_t(t)
    return x_prev * math.sqrt(a) + noise * math.sqrt(1.0 - a)


def forward_marginal(x0: Tensor, t: int, schedule: Schedule, noise: Tensor) -> Tensor:
    """Jump straight from clean data to step t via the closed-form marginal."""
    ab = schedule.alpha_bar_t(t)
    return x0 * math.sqrt(ab) + noise * math.sqrt(1.0 - ab)


def reverse_step(x_t: Tensor, t: int, eps_hat: Tensor, schedule: Schedule,
                 noise: Tensor | None = None) -> Tensor:
    """One denoising step from the noise-prediction parameterization.

    mean = (x_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_t);
    adds posterior-variance noise except at t=1.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    t = schedule._check_t(t)
    a = schedule.alpha_t(t)
    ab = schedule.alpha_bar_t(t)
    coef = schedule.beta_t(t) / math.sqrt(1.0 - ab)
    mean = (x_t - eps_hat * coef) * (1.0 / math.sqrt(a))
    if t == 1:
        return mean
    if noise is None:
        raise ValueError("noise required for t > 1")
    sigma = math.sqrt(schedule.posterior_var_t(t))
    return mean + noise * sigma


def denoising_loss(eps: Tensor, eps_hat: Tensor) -> Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    from .tensor import mean_, square
    return mean_(square(eps_hat - eps))


def sample(denoiser, shape, schedule: Schedule, seed: int,
           rng: np.random.Generator | None = None) -> Tensor:
    """Ancestral sampling: x_T ~ N(0, I), then reverse_step for t = T..1.

    `denoiser(x_t, t) -> eps_hat` carries its own conditioning closure.
    Deterministic for a fixed seed (or caller-supplied generator).
    """
    from .tensor import gaussian, no_grad
    gen = rng if rng is not None else make_rng(seed, 0xD1F)
    with no_grad():
        x = gaussian(shape, gen)
        for t in range(schedule.T, 0, -1):
            eps_hat = denoiser(x, t)
            noise = gaussian(shape, gen) if t > 1 else None
            x = reverse_step(x, t, eps_hat, schedule, noise)
    return x
