"""Finite-difference verification of every layer kind and composite loss.

All checks run in 64-bit.  Layer checks compare full gradients element by
element; composite checks compare, for each parameter tensor, the directional
derivative along a random direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffusion, entropy
from . import numerics as nm
from .config import TrainConfig
from .numerics import Parameter, RngStream, Tensor
from .objective import total_loss
from .transforms import CdmJscc, ModelConfig

STEP = 1e-5
TOLERANCE = 1e-4

TINY_MODEL = ModelConfig(latent_channels=4, hyper_channels=2, analysis_width=4,
                         unet_widths=(4, 8), blocks_per_level=1, time_dim=8, groups=2)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalized by the largest numeric gradient magnitude."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _layer_setup(kind: str, rng: RngStream):
    if kind == "dense":
        x = Tensor(rng.gauss((3, 5)))
        params = [Parameter("w", Tensor(rng.gauss((5, 4)))), Parameter("b", Tensor(rng.gauss((4,))))]
    elif kind in ("conv3x3-stride1", "conv3x3-stride2"):
        x = Tensor(rng.gauss((2, 3, 6, 6)))
        params = [Parameter("w", Tensor(rng.gauss((4, 3, 3, 3)))), Parameter("b", Tensor(rng.gauss((4,))))]
    elif kind == "upsample2x-conv":
        x = Tensor(rng.gauss((2, 3, 3, 3)))
        params = [Parameter("w", Tensor(rng.gauss((2, 3, 3, 3)))), Parameter("b", Tensor(rng.gauss((2,))))]
    elif kind == "relu":
        x = Tensor(rng.gauss((4, 6)))
        params = []
    elif kind == "group-norm":
        x = Tensor(rng.gauss((2, 4, 3, 3)))
        params = [Parameter("gamma", Tensor(rng.gauss((4,)))), Parameter("beta", Tensor(rng.gauss((4,))))]
    else:
        raise ValueError(kind)
    return x, params


def check_layer(kind: str, seed: int) -> CheckResult:
    with nm.precision(64):
        rng = RngStream(seed, stream=17)
        x, params = _layer_setup(kind, rng)
        x.requires_grad = True
        probe = None

        def loss_value():
            nonlocal probe
            out = nm.layer_forward(kind, params, x, groups=2)
            if probe is None:
                probe = Tensor(rng.gauss(out.shape))
            return nm.tsum(out * probe)

        loss = loss_value()
        nm.backward(loss, params)
        error = 0.0
        for t in [x] + [p.value for p in params]:
            num = numeric_grad(lambda: loss_value().item(), t.data)
            error = max(error, max_relative_error(t.grad, num))
        return CheckResult(f"layer:{kind}", seed, error)


def directional_errors(loss_fn: Callable[[], Tensor], params: list[Parameter], seed: int,
                       h: float = STEP) -> float:
    """Worst relative mismatch between analytic and central-difference
    directional derivatives, one random unit direction per parameter tensor."""
    for p in params:
        p.value.grad = None
    nm.backward(loss_fn(), params)
    grads = {id(p): p.value.grad.copy() for p in params}
    rng = RngStream(seed, stream=29)
    worst = 0.0
    for p in params:
        v = rng.gauss(p.value.shape).astype(np.float64)
        v /= np.linalg.norm(v)  # unit step keeps perturbations clear of ReLU kinks
        analytic = float(np.sum(grads[id(p)] * v))
        orig = p.value.data.copy()
        with nm.no_grad():
            p.value.data = orig + h * v
            up = loss_fn().item()
            p.value.data = orig - h * v
            down = loss_fn().item()
        p.value.data = orig
        numeric = (up - down) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-10)
        worst = max(worst, abs(analytic - numeric) / denom)
    for p in params:
        p.value.grad = None
    return worst


def _tiny_setup(seed: int):
    model = CdmJscc(TINY_MODEL, seed=seed)
    for p in model.parameters():
        p.cast()
    # zero-initialized output weights put every downstream ReLU exactly at its kink
    for p in model.parameters():
        if not np.any(p.value.data):
            p.value.data = RngStream(seed, stream=23).gauss(p.value.shape) * 0.1
    rng = RngStream(seed, stream=3)
    images = np.clip(rng.gauss((2, 3, 8, 8)) * 0.3 + 0.5, 0.0, 1.0)
    cfg = TrainConfig(eta=0.3, lam=1e-3, beta_rate=0.5, snr_db_train=5.0, k_max=2,
                      n_train_steps=8, image_size=8, precision=64)
    return model, images, cfg


def check_xpred_loss(seed: int) -> CheckResult:
    """Diffusion x0-prediction loss through the denoiser and its condition."""
    from .pipeline import schedule_for

    with nm.precision(64):
        model, images, cfg = _tiny_setup(seed)
        sched = schedule_for(cfg)
        cond = Parameter("cond", Tensor(RngStream(seed, stream=5).gauss((2, 4, 2, 2))))

        def loss_fn():
            rng = RngStream(seed, stream=7)
            return diffusion.xpred_training_loss(model.x_theta, Tensor(images), cond.value, rng, sched)[0]

        err = directional_errors(loss_fn, model.x_theta.parameters() + [cond], seed)
        return CheckResult("composite:xpred_loss", seed, err)


def check_link_objective(seed: int, stage: int = 3) -> CheckResult:
    """Full objective through every network, the rate term and the channel."""
    from .pipeline import link_loss, schedule_for

    with nm.precision(64):
        model, images, cfg = _tiny_setup(seed)
        sched = schedule_for(cfg)

        def loss_fn():
            rng = RngStream(seed, stream=11)
            return link_loss(model, images, cfg, rng, sched, stage).loss

        params = model.parameters() if stage == 3 else model.compression_parameters()
        err = directional_errors(loss_fn, params, seed)
        return CheckResult(f"composite:objective_stage{stage}", seed, err)


def check_rate_terms(seed: int) -> CheckResult:
    """Rate bits w.r.t. (mu, sigma) of the discretized Gaussian."""
    with nm.precision(64):
        rng = RngStream(seed, stream=13)
        values = Tensor(np.round(rng.gauss((20,)) * 2))
        mu = Parameter("mu", Tensor(rng.gauss((20,))))
        raw = Parameter("raw", Tensor(rng.gauss((20,))))

        def loss_value():
            return entropy.rate_bits(entropy.gaussian_bin_mass(values, mu.value,
                                                               entropy.positive_scale(raw.value)))

        nm.backward(loss_value(), [mu, raw])
        err = 0.0
        for p in (mu, raw):
            num = numeric_grad(lambda: loss_value().item(), p.value.data)
            err = max(err, max_relative_error(p.value.grad, num))
        return CheckResult("composite:rate_bits", seed, err)


def check_total_loss_terms(seed: int) -> CheckResult:
    """All five objective terms w.r.t. the two reconstructions and the rate."""
    with nm.precision(64):
        rng = RngStream(seed, stream=19)
        x0 = Tensor(rng.uniform((1, 3, 6, 6)))
        x_hat = Parameter("x_hat", Tensor(rng.uniform((1, 3, 6, 6))))
        x_bar = Parameter("x_bar", Tensor(rng.uniform((1, 3, 6, 6))))
        rate = Parameter("rate", Tensor(np.array(37.0)))

        def loss_value():
            return total_loss(x0, x_hat.value, x_bar.value, rate.value, 0.4, 0.01).loss

        nm.backward(loss_value(), [x_hat, x_bar, rate])
        err = 0.0
        for p in (x_hat, x_bar, rate):
            num = numeric_grad(lambda: loss_value().item(), p.value.data)
            err = max(err, max_relative_error(p.value.grad, num))
        return CheckResult("composite:total_loss_terms", seed, err)


def run_all(seeds=range(5)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        results.extend(check_layer(kind, seed) for kind in nm.LAYER_KINDS)
        results.append(check_rate_terms(seed))
        results.append(check_total_loss_terms(seed))
        results.append(check_xpred_loss(seed))
        results.append(check_link_objective(seed, 1))
        results.append(check_link_objective(seed, 3))
    return results
