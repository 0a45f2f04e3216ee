"""Noise schedule, forward noising, x0-prediction loss and the few-step sampler.

Steps are 1-based: ``alpha_bar(n)`` for n in 1..N, with ``alpha_bar(0) == 1``.
Diffusion runs on images mapped from [0, 1] to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nm
from .numerics import RngStream, Tensor

# denoiser(x_n, condition, t_norm) -> predicted x0, all in [-1, 1] space
Denoiser = Callable[[Tensor, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def abar(self, n) -> np.ndarray:
        """alpha_bar at (possibly array-valued) step n, with abar(0) = 1."""
        n = np.asarray(n)
        if np.any(n < 0) or np.any(n > self.n_steps):
            raise ValueError(f"step outside 0..{self.n_steps}")
        return np.where(n == 0, 1.0, self.alpha_bar[np.maximum(n, 1) - 1])


def build_schedule(n_steps: int = 64, beta_start: float = 1e-4, beta_end: float = 0.1) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("schedule needs at least one step")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, n_steps)
    return NoiseSchedule(beta, np.cumprod(1.0 - beta))


def to_signed(img):
    return img * 2.0 - 1.0


def to_unit(x):
    return (x + 1.0) * 0.5


def _bcast(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=nm.get_dtype())
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim)) if coef.ndim else coef


def forward_noise(x0: Tensor, n, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps; ``n`` scalar or per-sample."""
    x0, eps = nm.as_tensor(x0), nm.as_tensor(eps)
    if x0.shape != eps.shape:
        raise nm.ShapeError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    if np.any(np.asarray(n) < 1):
        raise ValueError("forward_noise needs n >= 1")
    a = sched.abar(n)
    return x0 * Tensor(_bcast(np.sqrt(a), x0.ndim)) + eps * Tensor(_bcast(np.sqrt(1.0 - a), x0.ndim))


def epsilon_from_xpred(x_n: Tensor, x0_hat: Tensor, n, sched: NoiseSchedule) -> Tensor:
    a = sched.abar(n)
    if np.any(1.0 - a < 1e-12):
        raise ZeroDivisionError("1 - alpha_bar is below 1e-12; noise is not identifiable")
    x_n, x0_hat = nm.as_tensor(x_n), nm.as_tensor(x0_hat)
    return (x_n - x0_hat * Tensor(_bcast(np.sqrt(a), x_n.ndim))) * Tensor(_bcast(1.0 / np.sqrt(1.0 - a), x_n.ndim))


def ancestral_step(x_n: Tensor, x0_hat: Tensor, eps_hat: Tensor, n, sched: NoiseSchedule,
                   n_prev=None) -> Tensor:
    """Deterministic x0-form update from step n to ``n_prev`` (default n - 1).

    x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps_hat; at
    ``n_prev == 0`` this returns ``x0_hat``.
    """
    n = np.asarray(n)
    n_prev = n - 1 if n_prev is None else np.asarray(n_prev)
    if np.any(n < 1) or np.any(n > sched.n_steps) or np.any(n_prev >= n) or np.any(n_prev < 0):
        raise ValueError(f"invalid step transition {n} -> {n_prev}")
    a = sched.abar(n_prev)
    x0_hat, eps_hat = nm.as_tensor(x0_hat), nm.as_tensor(eps_hat)
    return x0_hat * Tensor(_bcast(np.sqrt(a), x0_hat.ndim)) + eps_hat * Tensor(_bcast(np.sqrt(1.0 - a), x0_hat.ndim))


def draw_steps(rng: RngStream, batch: int, sched: NoiseSchedule) -> np.ndarray:
    return rng.integers(1, sched.n_steps + 1, size=batch)


def xpred_training_loss(denoiser: Denoiser, x0: Tensor, cond: Tensor, rng: RngStream,
                        sched: NoiseSchedule) -> tuple[Tensor, Tensor]:
    """Single-sample estimate of E_{n,eps} ||x0 - X(x_n, cond, n/N)||^2.

    ``x0`` is in [0, 1]; the loss is measured in [-1, 1] space.  Returns the
    loss and the prediction (in [-1, 1]).
    """
    x0s = to_signed(nm.as_tensor(x0))
    n = draw_steps(rng, x0s.shape[0], sched)
    eps = Tensor(rng.gauss(x0s.shape))
    x_n = forward_noise(x0s, n, eps, sched)
    pred = denoiser(x_n, cond, n / sched.n_steps)
    return nm.tmean(nm.square(x0s - pred)), pred


def step_subset(n_train: int, n_test: int) -> np.ndarray:
    """Descending visited steps: evenly spaced from N, ending at 1 when n_test >= 2."""
    if not 1 <= n_test <= n_train:
        raise ValueError(f"need 1 <= n_test <= {n_train}, got {n_test}")
    if n_test == 1:
        return np.array([n_train])
    steps = np.unique(np.round(np.linspace(1, n_train, n_test)).astype(int))[::-1]
    return steps


def sample(denoiser: Denoiser, cond: Tensor, n_test: int, rng: RngStream,
           sched: NoiseSchedule, image_shape: tuple[int, ...]) -> np.ndarray:
    """Deterministic few-step sampling from x_N ~ N(0, I); returns images in [0, 1]."""
    steps = step_subset(sched.n_steps, n_test)
    with nm.no_grad():
        x = Tensor(rng.gauss(image_shape))
        B = image_shape[0]
        for i, n in enumerate(steps):
            n_prev = steps[i + 1] if i + 1 < len(steps) else 0
            x0_hat = denoiser(x, cond, np.full(B, n / sched.n_steps))
            if n_prev == 0:
                x = x0_hat
                break
            eps_hat = epsilon_from_xpred(x, x0_hat, n, sched)
            x = ancestral_step(x, x0_hat, eps_hat, n, sched, n_prev)
    return to_unit(np.clip(x.data, -1.0, 1.0))
