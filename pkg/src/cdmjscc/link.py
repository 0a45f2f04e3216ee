"""Entropy-driven rate allocation, symbol framing, the AWGN channel and CBR.

A latent grid of ``L = h * w`` vectors of length ``C`` is projected by the
JSCC encoder to an ``L x C`` real array.  Vector ``i`` sends its first
``2 * k_i`` reals as ``k_i`` complex symbols; vectors are visited in
checkerboard order.  The frame is scaled to unit average symbol power and the
scale travels in the header so the receiver can undo it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import MagicError, TruncatedError, VersionError
from .numerics import RngStream, Tensor

FRAME_MAGIC = b"CJSF"
FRAME_VERSION = 1


@dataclass
class RateMap:
    """Complex symbols per latent vector, indexed in raster order."""

    k: np.ndarray
    k_min: int = 0
    k_max: int = 8

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        if self.k.size and (self.k.min() < self.k_min or self.k.max() > self.k_max):
            raise ValueError(f"rates outside [{self.k_min}, {self.k_max}]")

    @property
    def k_total(self) -> int:
        return int(self.k.sum())


@dataclass
class SymbolFrame:
    symbols: np.ndarray  # complex, length k_total
    rate_map: RateMap
    order: np.ndarray
    width: int  # C, reals per latent vector
    power: float  # average |s|^2 before normalization
    scale: float  # sqrt(power); multiply back at the receiver


def vector_bits(cond_masses: np.ndarray) -> np.ndarray:
    """-log2 of each vector's joint mass; ``cond_masses`` is (C, h, w) or (L, C)."""
    m = np.asarray(cond_masses, dtype=np.float64)
    if m.ndim == 3:
        m = m.reshape(m.shape[0], -1).T
    return -np.log2(m).sum(axis=1)


def allocate_rates(cond_masses: np.ndarray, beta: float, k_min: int = 0, k_max: int = 8) -> RateMap:
    """k_i = clamp(round_half_even(beta * bits_i), k_min, k_max)."""
    if beta <= 0:
        raise ValueError("rate-control beta must be positive")
    bits = vector_bits(cond_masses)
    k = np.clip(np.round(beta * bits), k_min, k_max).astype(np.int64)
    return RateMap(k, k_min, k_max)


def checkerboard_order(h: int, w: int) -> np.ndarray:
    """Raster indices with even (row + col) parity first, then odd parity."""
    rows, cols = np.divmod(np.arange(h * w), w)
    parity = (rows + cols) % 2
    return np.concatenate([np.flatnonzero(parity == 0), np.flatnonzero(parity == 1)])


def inverse_order(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv


def frame_symbols(projected: np.ndarray, rate_map: RateMap, order: np.ndarray) -> SymbolFrame:
    projected = np.asarray(projected, dtype=np.float64)
    L, C = projected.shape
    if C % 2:
        raise ValueError(f"vector width {C} must be even to form complex pairs")
    if len(rate_map.k) != L or len(order) != L:
        raise ValueError("rate map, order and projection disagree on L")
    if rate_map.k_max > C // 2:
        raise ValueError(f"k_max {rate_map.k_max} exceeds C/2 = {C // 2}")
    if rate_map.k_total == 0:
        raise ValueError("rate map allocates no symbols; nothing to transmit")
    parts = []
    for i in order:
        reals = projected[i, : 2 * rate_map.k[i]]
        parts.append(reals[0::2] + 1j * reals[1::2])
    raw = np.concatenate(parts)
    power = float(np.mean(np.abs(raw) ** 2))
    scale = math.sqrt(power) if power > 0 else 1.0
    return SymbolFrame(raw / scale, rate_map, np.asarray(order), C, power, scale)


def noise_variance(snr_db: float) -> float:
    """Complex noise variance for unit signal power."""
    return 0.0 if math.isinf(snr_db) and snr_db > 0 else 10.0 ** (-snr_db / 10.0)


def awgn(frame: SymbolFrame, snr_db: float, rng: RngStream) -> SymbolFrame:
    """Add circularly-symmetric complex Gaussian noise at the given SNR."""
    n = len(frame.symbols)
    std = math.sqrt(noise_variance(snr_db) / 2.0)
    draws = rng.gauss((n, 2)).astype(np.float64)
    noisy = frame.symbols + std * (draws[:, 0] + 1j * draws[:, 1])
    return SymbolFrame(noisy, frame.rate_map, frame.order, frame.width, frame.power, frame.scale)


def unframe_symbols(frame: SymbolFrame) -> np.ndarray:
    """Rebuild the zero-filled ``L x C`` projection from a (received) frame."""
    k = frame.rate_map.k
    if len(frame.symbols) != k.sum():
        raise ValueError(f"frame carries {len(frame.symbols)} symbols, rate map expects {k.sum()}")
    out = np.zeros((len(k), frame.width))
    syms = frame.symbols * frame.scale
    pos = 0
    for i in frame.order:
        chunk = syms[pos:pos + k[i]]
        out[i, 0:2 * k[i]:2] = chunk.real
        out[i, 1:2 * k[i]:2] = chunk.imag
        pos += k[i]
    return out


def cbr(rate_map: RateMap | int, n_source: int) -> float:
    """Channel bandwidth ratio k / n."""
    if n_source <= 0:
        raise ValueError("source dimension must be positive")
    k = rate_map.k_total if isinstance(rate_map, RateMap) else int(rate_map)
    return k / n_source


def rate_mask(k: np.ndarray, width: int) -> np.ndarray:
    """(..., L, C) 0/1 mask keeping the first 2*k_i entries of each vector."""
    k = np.asarray(k)
    if k.size and int(k.max()) > width // 2:
        raise ValueError(f"k_max {int(k.max())} exceeds C/2 = {width // 2}")
    return (np.arange(width) < 2 * k[..., None]).astype(nm.get_dtype())


def channel_pass(projected: Tensor, k: np.ndarray, snr_db: float, rng: RngStream) -> Tensor:
    """Differentiable batch counterpart of frame -> awgn -> unframe.

    ``projected`` is (B, L, C), ``k`` is (B, L).  Checkerboard order only
    permutes symbols, so it does not change the result and is skipped here.
    """
    B, L, C = projected.shape
    mask = rate_mask(k, C)
    masked = projected * Tensor(mask)
    k_total = np.maximum(np.asarray(k).reshape(B, -1).sum(axis=1), 1).astype(nm.get_dtype())
    power = nm.tsum(nm.square(masked), axis=(1, 2), keepdims=True) / Tensor(k_total.reshape(B, 1, 1))
    scale = nm.sqrt(power + 1e-12)
    std = math.sqrt(noise_variance(snr_db) / 2.0)
    if std == 0.0:
        return masked
    noise = Tensor(std * rng.gauss((B, L, C)) * mask)
    return masked + scale * noise


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


def encode_frame(frame: SymbolFrame) -> bytes:
    """Serialize: magic, u16 version, u32 L, u16 k_i in checkerboard order,
    f64 normalization scale, then interleaved f32 (re, im) symbols."""
    L = len(frame.rate_map.k)
    k_ordered = frame.rate_map.k[frame.order].astype("<u2")
    body = np.empty(2 * len(frame.symbols), dtype="<f4")
    body[0::2] = frame.symbols.real
    body[1::2] = frame.symbols.imag
    return (FRAME_MAGIC + struct.pack("<HI", FRAME_VERSION, L) + k_ordered.tobytes()
            + struct.pack("<d", frame.scale) + body.tobytes())


def decode_frame(data: bytes, width: int, grid: tuple[int, int] | None = None,
                 k_max: int | None = None) -> SymbolFrame:
    """Parse a frame produced by :func:`encode_frame`.

    The receiver knows the latent geometry; ``grid`` defaults to a square
    grid of side sqrt(L).
    """
    if len(data) < 4 or data[:4] != FRAME_MAGIC:
        raise MagicError("not a CJSF frame (bad magic)")
    if len(data) < 10:
        raise TruncatedError("frame header truncated")
    version, L = struct.unpack_from("<HI", data, 4)
    if version != FRAME_VERSION:
        raise VersionError(f"unsupported frame version {version}")
    if grid is None:
        side = math.isqrt(L)
        if side * side != L:
            raise ValueError(f"L = {L} is not square; pass the grid explicitly")
        grid = (side, side)
    pos = 10
    if len(data) < pos + 2 * L + 8:
        raise TruncatedError("frame rate table truncated")
    k_ordered = np.frombuffer(data, dtype="<u2", count=L, offset=pos).astype(np.int64)
    pos += 2 * L
    (scale,) = struct.unpack_from("<d", data, pos)
    pos += 8
    n = int(k_ordered.sum())
    if len(data) < pos + 8 * n:
        raise TruncatedError(f"frame declares {n} symbols but payload is short")
    body = np.frombuffer(data, dtype="<f4", count=2 * n, offset=pos).astype(np.float64)
    order = checkerboard_order(*grid)
    k = np.empty(L, dtype=np.int64)
    k[order] = k_ordered
    rate_map = RateMap(k, 0, k_max if k_max is not None else width // 2)
    symbols = body[0::2] + 1j * body[1::2]
    return SymbolFrame(symbols, rate_map, order, width, scale * scale, scale)
