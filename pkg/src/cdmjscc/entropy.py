"""Quantization, discretized-Gaussian likelihoods and rate estimation."""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Module, Parameter, RngStream, Tensor

SIGMA_FLOOR = 1e-6
LIKELIHOOD_FLOOR = 1e-9


def quantize(x: Tensor, mode: str = "round", rng: RngStream | None = None) -> Tensor:
    """Hard rounding (straight-through gradient) or additive U(-1/2, 1/2) noise."""
    if mode == "round":
        return nm.round_ste(x)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an RngStream")
        return x + Tensor(rng.uniform(x.shape, -0.5, 0.5))
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_bin_mass(value, mu, sigma) -> Tensor:
    """Mass of the unit bin centred on ``value`` under N(mu, sigma^2).

    Equals Phi((v + 1/2 - mu)/sigma) - Phi((v - 1/2 - mu)/sigma), evaluated on
    the lower tail of |v - mu| so that far-out bins keep their precision.
    Clamped below at ``LIKELIHOOD_FLOOR``.
    """
    value, mu, sigma = nm.as_tensor(value), nm.as_tensor(mu), nm.as_tensor(sigma)
    dist = nm.absolute(value - mu)
    upper = nm.normal_cdf((0.5 - dist) / sigma)
    lower = nm.normal_cdf((-0.5 - dist) / sigma)
    return nm.clamp_min(upper - lower, LIKELIHOOD_FLOOR)


def positive_scale(raw: Tensor) -> Tensor:
    """softplus(raw) + SIGMA_FLOOR."""
    return nm.softplus(raw) + SIGMA_FLOOR


class FactorizedPrior(Module):
    """Per-channel discretized Gaussian prior for the hyper-latent."""

    def __init__(self, name: str, channels: int):
        self.channels = channels
        self.mu = Parameter(f"{name}.mu", Tensor(np.zeros(channels)))
        # softplus(0.54) ~ 1.0
        self.raw_sigma = Parameter(f"{name}.raw_sigma", Tensor(np.full(channels, 0.5413)))

    def __call__(self, y_tilde: Tensor) -> Tensor:
        return factorized_prior_mass(y_tilde, self.mu.value, self.raw_sigma.value)


def factorized_prior_mass(y_tilde: Tensor, mu: Tensor, raw_sigma: Tensor) -> Tensor:
    """Bin masses of ``y_tilde`` (N, C, h, w) under per-channel (mu, sigma)."""
    c = y_tilde.shape[1]
    if mu.shape != (c,):
        raise nm.ShapeError(f"prior has {mu.shape[0]} channels, hyper-latent has {c}")
    sigma = positive_scale(raw_sigma)
    return gaussian_bin_mass(y_tilde, mu.reshape(1, c, 1, 1), sigma.reshape(1, c, 1, 1))


def rate_bits(*likelihoods: Tensor) -> Tensor:
    """Total information content in bits, sum of -log2 p over all masses."""
    total = None
    for p in likelihoods:
        bits = nm.tsum(-nm.log2(nm.as_tensor(p)))
        total = bits if total is None else total + bits
    if total is None:
        raise ValueError("rate_bits needs at least one likelihood grid")
    return total
