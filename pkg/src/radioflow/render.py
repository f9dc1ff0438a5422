"""Minimal PNG encoder and rasterizer for map grids and loss curves."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PANEL_GAP = 2


def encode_png(img: np.ndarray) -> bytes:
    """8-bit PNG from a (H, W) grayscale or (H, W, 3) RGB uint8 array."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("PNG encoder expects uint8 pixels")
    if img.ndim == 2:
        color_type, rows = 0, img
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type, rows = 2, img.reshape(img.shape[0], -1)
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def write_png(path: Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def to_gray_u8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)


def heat_rgb(a: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp for values in [0, 1]."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3 * a, 0, 1)
    g = np.clip(3 * a - 1, 0, 1)
    b = np.clip(3 * a - 2, 0, 1)
    return to_gray_u8(np.stack([r, g, b], axis=-1))


def condition_rgb(c: np.ndarray) -> np.ndarray:
    """Buildings grey, vehicles blue, transmitter red on black."""
    c = np.asarray(c, dtype=np.float64)
    img = np.zeros(c.shape[1:] + (3,))
    img[c[0] > 0.5] = 0.55
    if c.shape[0] > 2:
        img[c[2] > 0.5] = (0.2, 0.4, 1.0)
    img[c[1] > 0.5] = (1.0, 0.1, 0.1)
    return to_gray_u8(img)


def gray_rgb(a: np.ndarray) -> np.ndarray:
    g = to_gray_u8(a)
    return np.repeat(g[..., None], 3, axis=-1)


def grid_shape(rows: int, H: int, W: int, scale: int, panels: int = 4) -> tuple[int, int]:
    ph, pw = H * scale, W * scale
    return rows * ph + (rows + 1) * PANEL_GAP, panels * pw + (panels + 1) * PANEL_GAP


def comparison_grid(conditions, preds, targets, scale: int = 4) -> np.ndarray:
    """Rows of [condition | prediction | ground truth | |difference|] panels."""
    rows = len(preds)
    H, W = np.asarray(preds[0]).shape
    out = np.full(grid_shape(rows, H, W, scale) + (3,), 255, dtype=np.uint8)
    ph, pw = H * scale, W * scale
    for r in range(rows):
        diff = np.abs(np.asarray(preds[r]) - np.asarray(targets[r]))
        panels = [condition_rgb(conditions[r]), gray_rgb(preds[r]), gray_rgb(targets[r]), heat_rgb(diff)]
        y = PANEL_GAP + r * (ph + PANEL_GAP)
        for k, p in enumerate(panels):
            x = PANEL_GAP + k * (pw + PANEL_GAP)
            out[y : y + ph, x : x + pw] = np.kron(p, np.ones((scale, scale, 1), dtype=np.uint8))
    return out


def _draw_line(img, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.round(np.linspace(x0, x1, n)).astype(int)
    ys = np.round(np.linspace(y0, y1, n)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def line_plot(y, width: int = 480, height: int = 240, margin: int = 20, log: bool = True) -> np.ndarray:
    """Single-series line chart with axes; the y axis is log10 when ``log``."""
    y = np.asarray(y, dtype=np.float64)
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    black = np.array([0, 0, 0], dtype=np.uint8)
    _draw_line(img, margin, margin, margin, height - margin, black)
    _draw_line(img, margin, height - margin, width - margin, height - margin, black)
    if y.size == 0:
        return img
    v = np.log10(np.maximum(y, 1e-12)) if log else y
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    xs = margin + (width - 2 * margin) * (np.arange(len(v)) / max(len(v) - 1, 1))
    ys = (height - margin) - (height - 2 * margin) * (v - lo) / span
    blue = np.array([30, 80, 200], dtype=np.uint8)
    if len(v) == 1:
        _draw_line(img, xs[0], ys[0], xs[0], ys[0], blue)
    for i in range(len(v) - 1):
        _draw_line(img, xs[i], ys[i], xs[i + 1], ys[i + 1], blue)
    return img
