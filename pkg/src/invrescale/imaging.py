"""Image I/O, bicubic resampling, quality metrics and random cropping."""

from __future__ import annotations

import io
import logging
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .numerics import FLOAT

log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PSNR_CAP = 99.0


class ImageFormatError(ValueError):
    """The file is not a PNG this package can read."""


@dataclass
class ImageBuffer:
    width: int
    height: int
    samples: np.ndarray  # uint8, (height, width, 3)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint8)
        if self.samples.shape != (self.height, self.width, 3):
            raise ValueError(f"samples shape {self.samples.shape} != {(self.height, self.width, 3)}")


def _png_header(raw: bytes):
    if len(raw) < 33 or raw[:8] != PNG_SIGNATURE or raw[12:16] != b"IHDR":
        raise ImageFormatError("corrupt or non-PNG file")
    width, height, depth, color = struct.unpack(">IIBB", raw[16:26])
    return width, height, depth, color


def _check_chunks(raw: bytes) -> None:
    """Walk the chunk list; reject truncation, bad CRCs and a missing IEND."""
    pos = 8
    while pos + 12 <= len(raw):
        (length,) = struct.unpack(">I", raw[pos:pos + 4])
        end = pos + 12 + length
        if end > len(raw):
            break
        body = raw[pos + 4:pos + 8 + length]
        if struct.unpack(">I", raw[end - 4:end])[0] != zlib.crc32(body):
            raise ImageFormatError(f"CRC mismatch in {body[:4]!r} chunk")
        if body[:4] == b"IEND":
            return
        pos = end
    raise ImageFormatError("truncated PNG (no IEND chunk)")


def png_read(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        raw = fh.read()
    _, _, depth, color = _png_header(raw)
    _check_chunks(raw)
    if depth != 8:
        raise ImageFormatError(f"unsupported bit depth {depth} (only 8-bit RGB/RGBA)")
    if color not in (2, 6):
        raise ImageFormatError(f"unsupported color type {color} (only RGB or RGBA)")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode == "RGBA":
                log.warning("%s: dropping alpha channel", path)
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"corrupt PNG {path}: {exc}") from exc
    return ImageBuffer(arr.shape[1], arr.shape[0], arr)


def png_bytes(buf: ImageBuffer) -> bytes:
    out = io.BytesIO()
    Image.fromarray(buf.samples).save(out, format="PNG", optimize=False, compress_level=9)
    return out.getvalue()


def png_write(path, buf: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(png_bytes(buf))


def to_tensor(buf: ImageBuffer) -> np.ndarray:
    return (buf.samples.transpose(2, 0, 1).astype(FLOAT) / FLOAT(255.0)).astype(FLOAT)


def from_tensor(x) -> ImageBuffer:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) tensor, got {x.shape}")
    levels = np.floor(np.clip(x.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return ImageBuffer(x.shape[2], x.shape[1], levels.transpose(1, 2, 0))


def cubic_kernel(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) matrix of cubic-convolution weights with clamped edges."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for j in range(base - 1, base + 3):
            m[i, min(max(j, 0), n_in - 1)] += cubic_kernel(src - j, a)
    return m


def bicubic_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resampling of (..., H, W) maps; no antialiasing prefilter."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be positive")
    x = np.asarray(x)
    mh = resize_matrix(x.shape[-2], out_h)
    mw = resize_matrix(x.shape[-1], out_w)
    out = np.einsum("ih,...hw,jw->...ij", mh, x.astype(np.float64), mw, optimize=True)
    return out.astype(x.dtype if x.dtype.kind == "f" else FLOAT)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for data in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    tmp = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * tmp[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for x, y in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def compression_ratio(original_path, lr_path) -> float:
    for p in (original_path, lr_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return os.path.getsize(original_path) / os.path.getsize(lr_path)


def crop_batch(images, crop: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random crop x crop windows, each from a randomly chosen image."""
    images = list(images)
    for img in images:
        if img.shape[-2] < crop or img.shape[-1] < crop:
            raise ValueError(f"image {img.shape[-2:]} smaller than crop {crop}")
    out = np.empty((count, images[0].shape[0], crop, crop), dtype=images[0].dtype)
    for n in range(count):
        img = images[int(rng.integers(len(images)))]
        top = int(rng.integers(img.shape[-2] - crop + 1))
        left = int(rng.integers(img.shape[-1] - crop + 1))
        out[n] = img[:, top:top + crop, left:left + crop]
    return out


def synthetic_images(count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Test scenes with colour gradients, sharp-edged shapes and striped texture."""
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    out = np.empty((count, 3, size, size), dtype=FLOAT)
    for n in range(count):
        base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
        grad = rng.uniform(-0.3, 0.3, size=(2, 3, 1, 1))
        img = base + grad[0] * (xx - 0.5) + grad[1] * (yy - 0.5)
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            ry, rx = rng.uniform(0.05, 0.3, size=2)
            if rng.uniform() < 0.5:
                d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            else:
                d = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx)
            width = rng.uniform(0.3, 2.0)  # edge transition width in pixels
            mask = 0.5 * (1.0 - np.tanh((d - 1.0) * min(ry, rx) * size / width))
            img = img + mask * rng.uniform(-0.4, 0.4, size=(3, 1, 1))
        freq = rng.uniform(3.0, 10.0)
        angle = rng.uniform(0, np.pi)
        stripes = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        img = img + rng.uniform(0.0, 0.1) * stripes
        out[n] = np.clip(img, 0.0, 1.0)
    return out
