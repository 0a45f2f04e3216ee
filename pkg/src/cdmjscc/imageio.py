"""Binary PPM (P6) / PGM (P5) reading and PPM writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed or unsupported PPM/PGM file."""


def _tokens(data: bytes, count: int, name: str) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError(f"{name}: header truncated")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{name}: header truncated in comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1  # one whitespace byte ends the header


def decode_pnm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode P5/P6 bytes to a (3, H, W) float array in [0, 1]."""
    (magic, w, h, maxval), pos = _tokens(data, 4, name)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{name}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxv = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{name}: non-numeric header field") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{name}: bad dimensions {width}x{height}")
    if maxv != 255:
        raise ImageFormatError(f"{name}: only maxval 255 is supported, got {maxv}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = data[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(f"{name}: pixel data truncated ({len(body)} of {need} bytes)")
    px = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    img = px.transpose(2, 0, 1).astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def read_pnm(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_pnm(path.read_bytes(), path.name)


def encode_ppm(img: np.ndarray) -> bytes:
    """(3, H, W) in [0, 1] -> binary P6 bytes (values rounded to 8 bits)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (img.shape[2], img.shape[1]) + px.tobytes()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def center_crop_multiple_of_4(img: np.ndarray) -> np.ndarray:
    """Largest centred square whose side is a multiple of 4."""
    _, h, w = img.shape
    side = min(h, w) // 4 * 4
    if side == 0:
        raise ImageFormatError(f"image {h}x{w} is smaller than 4x4")
    top, left = (h - side) // 2, (w - side) // 2
    return img[:, top:top + side, left:left + side]


def load_images(path: str | Path) -> tuple[list[str], list[np.ndarray]]:
    """All .ppm/.pgm files in a directory (sorted), centre-cropped."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not files:
        raise ImageFormatError(f"no PPM/PGM images in {path}")
    return [p.name for p in files], [center_crop_multiple_of_4(read_pnm(p)) for p in files]
