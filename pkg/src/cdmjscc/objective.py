"""Loss terms of the rate-distortion-perception objective and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import RngStream, Tensor

PROXY_SEED = 42


@dataclass
class LossReport:
    jscc_distortion: float
    compression_distortion: float
    jscc_perceptual: float
    compression_perceptual: float
    rate_bits: float
    eta: float
    lam: float
    loss: Tensor  # differentiable total

    @property
    def total(self) -> float:
        return ((1 - self.eta) * (self.jscc_distortion + self.compression_distortion)
                + self.eta * (self.jscc_perceptual + self.compression_perceptual)
                + self.lam * self.rate_bits)

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "jscc_distortion": self.jscc_distortion,
            "compression_distortion": self.compression_distortion,
            "jscc_perceptual": self.jscc_perceptual,
            "compression_perceptual": self.compression_perceptual,
            "rate_bits": self.rate_bits,
        }


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise nm.ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def mse(a, b) -> Tensor:
    a, b = nm.as_tensor(a), nm.as_tensor(b)
    _check_same(a, b, "mse")
    return nm.tmean(nm.square(a - b))


@lru_cache(maxsize=2)
def _proxy_weights(dtype_name: str):
    rng = RngStream(PROXY_SEED)
    w1 = rng.gauss((8, 3, 3, 3)).astype(dtype_name) * np.sqrt(2.0 / 27)
    w2 = rng.gauss((16, 8, 3, 3)).astype(dtype_name) * np.sqrt(2.0 / 72)
    return w1, w2


def proxy_features(img: Tensor) -> Tensor:
    """Frozen two-layer random conv features of an image batch in [0, 1]."""
    w1, w2 = _proxy_weights(np.dtype(nm.get_dtype()).name)
    h = nm.relu(nm.conv3x3(img * 2.0 - 1.0, Tensor(w1)))
    return nm.relu(nm.conv3x3(h, Tensor(w2), stride=2))


def perceptual_proxy(a, b) -> Tensor:
    """Mean squared distance between frozen random-conv features."""
    a, b = nm.as_tensor(a), nm.as_tensor(b)
    _check_same(a, b, "perceptual_proxy")
    return nm.tmean(nm.square(proxy_features(a) - proxy_features(b)))


def _check_weights(eta: float, lam: float):
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")


def total_loss(x0, x_hat, x_bar, rate: Tensor, eta: float, lam: float) -> LossReport:
    """Full objective: weighted JSCC and compression distortion/perception plus rate.

    All images are in [0, 1]; ``rate`` is the mean per-image bit count.
    """
    _check_weights(eta, lam)
    d_j, d_c = mse(x0, x_hat), mse(x0, x_bar)
    p_j, p_c = perceptual_proxy(x0, x_hat), perceptual_proxy(x0, x_bar)
    rate = nm.as_tensor(rate)
    loss = (d_j + d_c) * (1 - eta) + (p_j + p_c) * eta + rate * lam
    return LossReport(d_j.item(), d_c.item(), p_j.item(), p_c.item(), rate.item(), eta, lam, loss)


def stage1_loss(x0, x_bar, rate: Tensor, eta: float, lam: float) -> LossReport:
    """Compression-only objective: JSCC terms absent (reported as zero)."""
    _check_weights(eta, lam)
    d_c = mse(x0, x_bar)
    p_c = perceptual_proxy(x0, x_bar)
    rate = nm.as_tensor(rate)
    loss = d_c * (1 - eta) + p_c * eta + rate * lam
    return LossReport(0.0, d_c.item(), 0.0, p_c.item(), rate.item(), eta, lam, loss)


def psnr(x, x_hat, peak: float = 1.0) -> float:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    if x.shape != x_hat.shape:
        raise nm.ShapeError(f"psnr: shapes {x.shape} and {x_hat.shape} differ")
    err = float(np.mean((x - x_hat) ** 2))
    if err < 1e-10:
        return 100.0
    return 10.0 * math.log10(peak * peak / err)
