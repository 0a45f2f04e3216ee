"""Three-stage training, end-to-end transmission and SNR-sweep evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion, entropy, link
from . import numerics as nm
from .checkpoint import Checkpoint, snapshot
from .config import TrainConfig
from .data import synth_dataset
from .imageio import load_images
from .numerics import RngStream, Tensor
from .objective import LossReport, perceptual_proxy, psnr, stage1_loss, total_loss
from .transforms import CdmJscc, ModelConfig

log = logging.getLogger(__name__)

CSV_HEADER = ["image", "snr_db", "cbr", "psnr_db", "proxy_perc", "rate_bits"]


class StageError(ValueError):
    """A training stage was handed a checkpoint from the wrong stage."""


def schedule_for(cfg: TrainConfig) -> diffusion.NoiseSchedule:
    return diffusion.build_schedule(cfg.n_train_steps, cfg.beta_start, cfg.beta_end)


def training_images(cfg: TrainConfig) -> np.ndarray:
    if cfg.dataset == "synthetic":
        return synth_dataset(cfg.seed, cfg.dataset_count, cfg.image_size)
    _, images = load_images(cfg.dataset)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"training images differ in size: {sorted(shapes)}")
    return np.stack(images)


def heldout_images(cfg: TrainConfig, count: int = 16) -> np.ndarray:
    return synth_dataset(cfg.seed + 1000, count, cfg.image_size)


# ---------------------------------------------------------------------------
# One forward pass of the link in training mode
# ---------------------------------------------------------------------------


@dataclass
class Likelihoods:
    z: Tensor
    z_tilde: Tensor
    latent_masses: Tensor
    hyper_masses: Tensor


def entropy_forward(model: CdmJscc, x0: Tensor, mode: str, rng: RngStream | None) -> Likelihoods:
    z = model.g_e(x0)
    y = model.h_e(z)
    y_tilde = entropy.quantize(y, mode, rng)
    z_tilde = entropy.quantize(z, mode, rng)
    mu, sigma = model.h_s(y_tilde)
    return Likelihoods(z, z_tilde, entropy.gaussian_bin_mass(z_tilde, mu, sigma), model.prior(y_tilde))


def rate_maps(masses: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """(B, L) symbol counts from (B, C, h, w) latent masses."""
    return np.stack([link.allocate_rates(m, cfg.beta_rate, cfg.k_min, cfg.k_max).k for m in masses])


def link_loss(model: CdmJscc, x0: np.ndarray, cfg: TrainConfig, rng: RngStream,
              sched: diffusion.NoiseSchedule, stage: int) -> LossReport:
    """Sample (n, eps), run the compression and (stage >= 2) transmission paths.

    Both reconstructions denoise the same x_n so the two distortion terms
    share one Monte-Carlo draw.
    """
    x0 = Tensor(x0)
    B = x0.shape[0]
    hw = (x0.shape[2] // 4, x0.shape[3] // 4)
    track_compression = stage != 2
    if track_compression:
        lk = entropy_forward(model, x0, "noise", rng)
    else:
        with nm.no_grad():
            lk = entropy_forward(model, x0, "noise", rng)
    rate = entropy.rate_bits(lk.latent_masses, lk.hyper_masses) * (1.0 / B)

    x0s = diffusion.to_signed(x0)
    n = diffusion.draw_steps(rng, B, sched)
    eps = Tensor(rng.gauss(x0s.shape))
    x_n = diffusion.forward_noise(x0s, n, eps, sched)
    t_norm = n / sched.n_steps

    if track_compression:
        x_bar = diffusion.to_unit(model.x_theta(x_n, lk.z_tilde, t_norm))
    else:
        with nm.no_grad():
            x_bar = diffusion.to_unit(model.x_theta(x_n, lk.z_tilde, t_norm))
    if stage == 1:
        return stage1_loss(x0, x_bar, rate, cfg.eta, cfg.lam)

    k = rate_maps(lk.latent_masses.data, cfg)
    projected = model.f_e(lk.z)
    received = link.channel_pass(projected, k, cfg.snr_db_train, rng)
    z_hat = model.f_d(received, hw)
    x_hat = diffusion.to_unit(model.x_theta(x_n, z_hat, t_norm))
    return total_loss(x0, x_hat, x_bar, rate, cfg.eta, cfg.lam)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _set_trainable(model: CdmJscc, trainable: Sequence[nm.Parameter]) -> None:
    keep = {id(p) for p in trainable}
    for p in model.parameters():
        p.value.requires_grad = id(p) in keep
        p.value.grad = None


def _run_stage(model: CdmJscc, cfg: TrainConfig, stage: int, steps: int,
               trainable: list[nm.Parameter]) -> list[dict]:
    _set_trainable(model, trainable)
    for p in trainable:
        p.moment1 = np.zeros_like(p.value.data)
        p.moment2 = np.zeros_like(p.value.data)
        p.step_count = 0
    images = training_images(cfg).astype(nm.get_dtype())
    sched = schedule_for(cfg)
    rng = RngStream(cfg.seed, stream=100 + stage)
    order = np.empty(0, dtype=np.int64)
    history = []
    for step in range(steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(images))])
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        report = link_loss(model, images[batch], cfg, rng, sched, stage)
        nm.backward(report.loss, trainable)
        nm.adam_step(trainable, lr=cfg.lr_at(step))
        row = {"stage": stage, "step": step, **report.as_dict()}
        history.append(row)
        if step % 50 == 0 or step == steps - 1:
            log.info("stage %d step %d total %.5f rate %.1f", stage, step, row["total"], row["rate_bits"])
    _set_trainable(model, model.parameters())
    return history


def _prepare(cfg: TrainConfig) -> None:
    nm.set_precision(cfg.precision)


def train_stage1(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> Checkpoint:
    """Train the compression modules; JSCC encoder/decoder stay frozen."""
    _prepare(cfg)
    model = CdmJscc(model_cfg or ModelConfig(), seed=cfg.seed)
    history = _run_stage(model, cfg, 1, cfg.steps_stage1, model.compression_parameters())
    return snapshot(model, cfg, 1, history)


def _require_stage(ckpt: Checkpoint, stage: int) -> None:
    if ckpt.stage != stage - 1:
        raise StageError(f"stage {stage} needs a stage-{stage - 1} checkpoint, got stage {ckpt.stage}")


def train_stage2(cfg: TrainConfig, ckpt1: Checkpoint) -> Checkpoint:
    """Freeze stage-1 parameters; fresh JSCC encoder/decoder trained through the channel."""
    _require_stage(ckpt1, 2)
    _prepare(cfg)
    model = ckpt1.build_model()
    model.reinit_transmission(cfg.seed + 2)
    history = _run_stage(model, cfg, 2, cfg.steps_stage2, model.transmission_parameters())
    return snapshot(model, cfg, 2, ckpt1.history + history)


def train_stage3(cfg: TrainConfig, ckpt2: Checkpoint) -> Checkpoint:
    """Fine-tune every parameter on the full objective."""
    _require_stage(ckpt2, 3)
    _prepare(cfg)
    model = ckpt2.build_model()
    history = _run_stage(model, cfg, 3, cfg.steps_stage3, model.parameters())
    return snapshot(model, cfg, 3, ckpt2.history + history)


def train_all(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> list[Checkpoint]:
    c1 = train_stage1(cfg, model_cfg)
    c2 = train_stage2(cfg, c1)
    c3 = train_stage3(cfg, c2)
    return [c1, c2, c3]


def smoothed_drop(history: list[dict], stage: int, window: int = 50) -> tuple[float, float]:
    """(mean of the first ``window`` totals, mean of the last ``window``) for a stage."""
    totals = [row["total"] for row in history if row["stage"] == stage]
    return float(np.mean(totals[:window])), float(np.mean(totals[-window:]))


def heldout_loss(ckpt: Checkpoint, repeats: int = 4, count: int = 16) -> float:
    """Full-objective loss on a fixed held-out synthetic batch with fixed draws."""
    cfg = ckpt.config
    nm.set_precision(cfg.precision)
    model = ckpt.build_model()
    images = heldout_images(cfg, count).astype(nm.get_dtype())
    sched = schedule_for(cfg)
    totals = []
    with nm.no_grad():
        for r in range(repeats):
            rng = RngStream(cfg.seed, stream=9000 + r)
            for start in range(0, count, cfg.batch_size):
                totals.append(link_loss(model, images[start:start + cfg.batch_size], cfg, rng, sched, 3).total)
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# Inference: transmit one image over the channel
# ---------------------------------------------------------------------------


@dataclass
class Transmission:
    reconstruction: np.ndarray  # (3, H, W) in [0, 1]
    frame: link.SymbolFrame | None  # channel input; None when nothing was sent
    received: link.SymbolFrame | None
    rate_map: link.RateMap
    rate_bits: float
    cbr: float


def transmit(model: CdmJscc, image: np.ndarray, cfg: TrainConfig, snr_db: float, rng: RngStream,
             n_test: int | None = None) -> Transmission:
    """Encode, frame, pass through AWGN and decode a single (3, H, W) image."""
    sched = schedule_for(cfg)
    n_test = cfg.n_test if n_test is None else n_test
    C = model.cfg.latent_channels
    with nm.no_grad():
        x0 = Tensor(image[None])
        hw = (image.shape[1] // 4, image.shape[2] // 4)
        lk = entropy_forward(model, x0, "round", None)
        bits = entropy.rate_bits(lk.latent_masses, lk.hyper_masses).item()
        rmap = link.allocate_rates(lk.latent_masses.data[0], cfg.beta_rate, cfg.k_min, cfg.k_max)
        projected = model.f_e(lk.z).data[0]
        order = link.checkerboard_order(*hw)
        if rmap.k_total:
            frame = link.frame_symbols(projected, rmap, order)
            received = link.awgn(frame, snr_db, rng)
            vectors = link.unframe_symbols(received)
        else:
            frame = received = None
            vectors = np.zeros((hw[0] * hw[1], C))
        z_hat = model.f_d(Tensor(vectors[None]), hw)
        recon = diffusion.sample(model.x_theta, z_hat, n_test, rng, sched, x0.shape)[0]
    return Transmission(recon, frame, received, rmap, bits, link.cbr(rmap, image.size))


def evaluate(ckpt: Checkpoint, images: Sequence[np.ndarray], snr_list: Sequence[float], seed: int,
             names: Sequence[str] | None = None, n_test: int | None = None) -> list[dict]:
    """Per-(image, SNR) metric rows followed by one averaged summary row."""
    if ckpt.stage < 2:
        raise StageError(f"evaluation needs a checkpoint from stage 2 or later, got stage {ckpt.stage}")
    cfg = ckpt.config
    nm.set_precision(cfg.precision)
    model = ckpt.build_model()
    names = list(names) if names is not None else [f"img{i:03d}" for i in range(len(images))]
    rows = []
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=nm.get_dtype())
        for j, snr in enumerate(snr_list):
            rng = RngStream(seed, stream=(i + 1) * 1_000_003 + j)
            tx = transmit(model, img, cfg, snr, rng, n_test)
            with nm.no_grad():
                proxy = perceptual_proxy(Tensor(img[None]), Tensor(tx.reconstruction[None])).item()
            rows.append({"image": names[i], "snr_db": float(snr), "cbr": tx.cbr,
                         "psnr_db": psnr(img, tx.reconstruction), "proxy_perc": proxy,
                         "rate_bits": tx.rate_bits})
    summary = {"image": "mean", "snr_db": float("nan")}
    for key in CSV_HEADER[2:]:
        summary[key] = float(np.mean([r[key] for r in rows])) if rows else float("nan")
    rows.append(summary)
    return rows


def summarize_by_snr(rows: list[dict]) -> dict[float, float]:
    """Mean PSNR per SNR over the per-image rows."""
    out: dict[float, list[float]] = {}
    for r in rows:
        if r["image"] == "mean":
            continue
        out.setdefault(r["snr_db"], []).append(r["psnr_db"])
    return {snr: float(np.mean(v)) for snr, v in out.items()}


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            snr = "" if math.isnan(r["snr_db"]) else repr(r["snr_db"])
            writer.writerow([r["image"], snr] + [repr(float(r[k])) for k in CSV_HEADER[2:]])
