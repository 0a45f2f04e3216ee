"""The learned networks: latent analysis, hyperprior pair, JSCC pair and the
conditional U-Net denoiser.

Images are (B, 3, H, W) in [0, 1]; the latent is (B, C, H/4, W/4) and is
viewed as L = (H/4)(W/4) vectors of length C when it meets the channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nm
from .entropy import FactorizedPrior, positive_scale
from .numerics import Conv3x3, Dense, GroupNorm, Module, RngStream, ShapeError, Tensor, UpConv


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 16
    hyper_channels: int = 8
    analysis_width: int = 32
    unet_widths: tuple[int, int] = (32, 64)
    blocks_per_level: int = 2
    time_dim: int = 32
    groups: int = 8
    cond_scales: int = 4  # 1: bottleneck; 3: also added at H/2 and H; 4: also fed with the input

    def __post_init__(self):
        if self.latent_channels % 2:
            raise ValueError("latent_channels must be even (complex symbol pairs)")


class GaussianParams(NamedTuple):
    mu: Tensor
    sigma: Tensor


def grid_to_vectors(z: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, L, C) in raster order."""
    B, C, h, w = z.shape
    return nm.transpose(z.reshape(B, C, h * w), (0, 2, 1))


def vectors_to_grid(v: Tensor, hw: tuple[int, int]) -> Tensor:
    B, L, C = v.shape
    if L != hw[0] * hw[1]:
        raise ShapeError(f"{L} vectors do not fill a {hw[0]}x{hw[1]} grid")
    return nm.transpose(v, (0, 2, 1)).reshape(B, C, hw[0], hw[1])


class ResBlock(Module):
    """x + conv(relu(conv(relu(x)))) with optional norms and time injection."""

    def __init__(self, name, ch, rng, temb_dim=None, groups=None, zero_out=False):
        self.norm1 = GroupNorm(f"{name}.norm1", ch, groups) if groups else None
        self.norm2 = GroupNorm(f"{name}.norm2", ch, groups) if groups else None
        self.conv1 = Conv3x3(f"{name}.conv1", ch, ch, rng)
        self.conv2 = Conv3x3(f"{name}.conv2", ch, ch, rng)
        if zero_out:
            self.conv2.w.value.data[...] = 0.0
        self.temb = Dense(f"{name}.temb", temb_dim, ch, rng) if temb_dim else None

    def __call__(self, x, temb=None):
        h = self.norm1(x) if self.norm1 else x
        h = self.conv1(nm.relu(h))
        if self.temb is not None:
            t = self.temb(temb)
            h = h + t.reshape(t.shape[0], t.shape[1], 1, 1)
        h = self.norm2(h) if self.norm2 else h
        h = self.conv2(nm.relu(h))
        return x + h


class Analysis(Module):
    """g_e: image (B, 3, H, W) -> latent (B, C, H/4, W/4)."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="g_e"):
        w = cfg.analysis_width
        self.conv_in = Conv3x3(f"{name}.conv_in", 3, w, rng)
        self.down1 = Conv3x3(f"{name}.down1", w, w, rng, stride=2)
        self.res = ResBlock(f"{name}.res", w, rng)
        self.down2 = Conv3x3(f"{name}.down2", w, cfg.latent_channels, rng, stride=2)

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"analysis expects (B, 3, H, W), got {image.shape}")
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ShapeError(f"image size {image.shape[2:]} is not a multiple of 4")
        h = nm.relu(self.conv_in(image * 2.0 - 1.0))
        h = self.res(nm.relu(self.down1(h)))
        return self.down2(nm.relu(h))


class HyperAnalysis(Module):
    """h_e: latent (B, C, h, w) -> hyper-latent (B, C_h, h/2, w/2)."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="h_e"):
        c = cfg.latent_channels
        self.conv = Conv3x3(f"{name}.conv", c, c, rng)
        self.down = Conv3x3(f"{name}.down", c, cfg.hyper_channels, rng, stride=2)

    def __call__(self, z: Tensor) -> Tensor:
        return self.down(nm.relu(self.conv(z)))


class HyperSynthesis(Module):
    """h_s: quantized hyper-latent -> per-element (mu, sigma) of the latent."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="h_s"):
        c = cfg.latent_channels
        self.c = c
        self.up = UpConv(f"{name}.up", cfg.hyper_channels, 2 * c, rng)
        self.out = Conv3x3(f"{name}.out", 2 * c, 2 * c, rng)

    def __call__(self, y_tilde: Tensor) -> GaussianParams:
        h = self.out(nm.relu(self.up(y_tilde)))
        c = self.c
        return GaussianParams(h[:, :c], positive_scale(h[:, c:]))


class JsccEncoder(Module):
    """f_e: per-vector projection (B, C, h, w) -> (B, L, C) ahead of rate masking."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="f_e"):
        c = cfg.latent_channels
        self.fc1 = Dense(f"{name}.fc1", c, 2 * c, rng)
        self.fc2 = Dense(f"{name}.fc2", 2 * c, c, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(nm.relu(self.fc1(grid_to_vectors(z))))


class JsccDecoder(Module):
    """f_d: zero-filled received vectors (B, L, C) -> latent estimate (B, C, h, w)."""

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="f_d"):
        c = cfg.latent_channels
        self.fc1 = Dense(f"{name}.fc1", c, 2 * c, rng)
        self.fc2 = Dense(f"{name}.fc2", 2 * c, c, rng)
        self.refine = ResBlock(f"{name}.refine", c, rng)

    def __call__(self, received: Tensor, hw: tuple[int, int]) -> Tensor:
        v = self.fc2(nm.relu(self.fc1(received)))
        return self.refine(vectors_to_grid(v, hw))


def timestep_embedding(t_norm: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the normalized step, shaped (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t_norm, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(nm.get_dtype())


COND_EPS = 1e-2


class Denoiser(Module):
    """X_theta: conditional U-Net predicting x0 from (x_n, latent condition, n/N).

    Resolutions H -> H/2 -> H/4.  The condition is RMS-normalized per sample
    and joins by concatenation at the H/4 bottleneck.  With ``cond_scales >= 3``
    it is also upsampled and added at the H/2 and H decoder levels, and with
    ``cond_scales >= 4`` it is upsampled to H and concatenated with the input.
    The step embedding is added inside every residual block.
    """

    def __init__(self, cfg: ModelConfig, rng: RngStream, name="x_theta"):
        w1, w2 = cfg.unet_widths
        td, tdim = cfg.time_dim, 2 * cfg.unet_widths[1]
        g = cfg.groups
        nb = cfg.blocks_per_level
        self.time_dim = td
        self.cond_channels = cfg.latent_channels
        self.t1 = Dense(f"{name}.t1", td, tdim, rng)
        self.t2 = Dense(f"{name}.t2", tdim, tdim, rng)
        cin = 3 + (cfg.latent_channels if cfg.cond_scales >= 4 else 0)
        self.conv_in = Conv3x3(f"{name}.conv_in", cin, w1, rng)
        self.enc1 = [ResBlock(f"{name}.enc1.{i}", w1, rng, tdim, g, zero_out=True) for i in range(nb)]
        self.down1 = Conv3x3(f"{name}.down1", w1, w2, rng, stride=2)
        self.enc2 = [ResBlock(f"{name}.enc2.{i}", w2, rng, tdim, g, zero_out=True) for i in range(nb)]
        self.down2 = Conv3x3(f"{name}.down2", w2, w2, rng, stride=2)
        self.fuse = Conv3x3(f"{name}.fuse", w2 + cfg.latent_channels, w2, rng)
        self.mid = ResBlock(f"{name}.mid", w2, rng, tdim, g, zero_out=True)
        self.up2 = UpConv(f"{name}.up2", w2, w2, rng)
        self.merge2 = Conv3x3(f"{name}.merge2", 2 * w2, w2, rng)
        self.dec2 = ResBlock(f"{name}.dec2", w2, rng, tdim, g, zero_out=True)
        self.up1 = UpConv(f"{name}.up1", w2, w1, rng)
        self.merge1 = Conv3x3(f"{name}.merge1", 2 * w1, w1, rng)
        self.dec1 = ResBlock(f"{name}.dec1", w1, rng, tdim, g, zero_out=True)
        self.norm_out = GroupNorm(f"{name}.norm_out", w1, g)
        self.conv_out = Conv3x3(f"{name}.conv_out", w1, 3, rng)
        self.conv_out.w.value.data[...] = 0.0
        self.cond_scales = cfg.cond_scales
        if cfg.cond_scales >= 3:
            c = cfg.latent_channels
            self.cond2 = UpConv(f"{name}.cond2", c, w2, rng)
            self.cond1 = UpConv(f"{name}.cond1", w2, w1, rng)

    def __call__(self, x_n: Tensor, cond: Tensor, t_norm) -> Tensor:
        B, _, H, W = x_n.shape
        if cond.shape != (B, self.cond_channels, H // 4, W // 4):
            raise ShapeError(f"condition shape {cond.shape} does not match "
                             f"{(B, self.cond_channels, H // 4, W // 4)} for input {x_n.shape}")
        # scale-free view of the latent: per-sample RMS normalization
        rms = nm.sqrt(nm.tmean(nm.square(cond), axis=(1, 2, 3), keepdims=True) + COND_EPS)
        cond = cond / rms
        t_norm = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (B,))
        temb = Tensor(timestep_embedding(t_norm, self.time_dim))
        temb = self.t2(nm.relu(self.t1(temb)))
        if self.cond_scales >= 4:
            h = self.conv_in(nm.concat([x_n, nm.upsample2x(nm.upsample2x(cond))], axis=1))
        else:
            h = self.conv_in(x_n)
        for blk in self.enc1:
            h = blk(h, temb)
        skip1 = h
        h = self.down1(h)
        for blk in self.enc2:
            h = blk(h, temb)
        skip2 = h
        h = self.down2(h)
        h = self.mid(self.fuse(nm.concat([h, cond], axis=1)), temb)
        h = self.merge2(nm.concat([self.up2(h), skip2], axis=1))
        if self.cond_scales >= 3:
            c2 = self.cond2(cond)
            h = h + c2
        h = self.dec2(h, temb)
        h = self.merge1(nm.concat([self.up1(h), skip1], axis=1))
        if self.cond_scales >= 3:
            h = h + self.cond1(nm.relu(c2))
        h = self.dec1(h, temb)
        return self.conv_out(nm.relu(self.norm_out(h)))


class CdmJscc(Module):
    """All trainable parts of the link, grouped as the training stages use them."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        root = RngStream(seed)
        self.g_e = Analysis(cfg, root.substream(1))
        self.h_e = HyperAnalysis(cfg, root.substream(2))
        self.h_s = HyperSynthesis(cfg, root.substream(3))
        self.prior = FactorizedPrior("prior_y", cfg.hyper_channels)
        self.x_theta = Denoiser(cfg, root.substream(4))
        self.reinit_transmission(seed)

    def reinit_transmission(self, seed: int) -> None:
        root = RngStream(seed)
        self.f_e = JsccEncoder(self.cfg, root.substream(5))
        self.f_d = JsccDecoder(self.cfg, root.substream(6))

    def compression_parameters(self) -> list[nm.Parameter]:
        """theta_g, phi_g, theta_h, phi_h (plus the hyper-latent prior)."""
        return (self.g_e.parameters() + self.h_e.parameters() + self.h_s.parameters()
                + self.prior.parameters() + self.x_theta.parameters())

    def transmission_parameters(self) -> list[nm.Parameter]:
        """theta_f, phi_f."""
        return self.f_e.parameters() + self.f_d.parameters()

    def parameters(self) -> list[nm.Parameter]:
        return self.compression_parameters() + self.transmission_parameters()


# Functional entry points mirroring the operations one-to-one.

def analysis(net: Analysis, image: Tensor) -> Tensor:
    return net(image)


def hyper_analysis(net: HyperAnalysis, z: Tensor) -> Tensor:
    return net(z)


def hyper_synthesis(net: HyperSynthesis, y_tilde: Tensor) -> GaussianParams:
    return net(y_tilde)


def jscc_encode_vectors(net: JsccEncoder, z: Tensor) -> Tensor:
    return net(z)


def jscc_decode_vectors(net: JsccDecoder, masked: Tensor, hw: tuple[int, int]) -> Tensor:
    return net(masked, hw)


def denoise(net: Denoiser, x_n: Tensor, z_hat: Tensor, t_norm) -> Tensor:
    t = np.asarray(t_norm, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("t_norm must lie in (0, 1]")
    return net(x_n, z_hat, t)
