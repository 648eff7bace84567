"""Raw 4:2:0 frames, file ingestion, and quality metrics (PSNR / SSIM)."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0


class InvalidInputError(ValueError):
    """Raised when an operation receives input violating its contract."""


@dataclass(frozen=True)
class RawFrame:
    """One 8-bit 4:2:0 video frame. Width/height must be multiples of 16."""

    width: int
    height: int
    luma: np.ndarray        # (height, width) uint8
    chroma_u: np.ndarray    # (height//2, width//2) uint8
    chroma_v: np.ndarray    # (height//2, width//2) uint8

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("frame dimensions must be positive")
        if self.width % 16 or self.height % 16:
            raise InvalidInputError(
                f"frame dimensions must be multiples of 16, got {self.width}x{self.height}")
        if self.luma.shape != (self.height, self.width):
            raise InvalidInputError("luma shape mismatch")
        half = (self.height // 2, self.width // 2)
        if self.chroma_u.shape != half or self.chroma_v.shape != half:
            raise InvalidInputError("chroma shape mismatch")

    @classmethod
    def from_planes(cls, luma, chroma_u, chroma_v):
        luma = np.asarray(luma, dtype=np.uint8)
        h, w = luma.shape
        return cls(w, h, luma,
                   np.asarray(chroma_u, dtype=np.uint8),
                   np.asarray(chroma_v, dtype=np.uint8))

    @classmethod
    def constant(cls, width, height, y=128, u=128, v=128):
        return cls(width, height,
                   np.full((height, width), y, dtype=np.uint8),
                   np.full((height // 2, width // 2), u, dtype=np.uint8),
                   np.full((height // 2, width // 2), v, dtype=np.uint8))


def _check_same_dims(a: RawFrame, b: RawFrame):
    if (a.width, a.height) != (b.width, b.height):
        raise InvalidInputError("frame dimension mismatch")


def psnr(a: RawFrame, b: RawFrame) -> float:
    """Luma PSNR in dB, capped at 99 dB for identical frames."""
    _check_same_dims(a, b)
    diff = a.luma.astype(np.float64) - b.luma.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0 ** 2 / mse))


def ssim(a: RawFrame, b: RawFrame) -> float:
    """Mean luma SSIM over non-overlapping 8x8 windows."""
    _check_same_dims(a, b)
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    x = a.luma.astype(np.float64)
    y = b.luma.astype(np.float64)
    h, w = x.shape
    bh, bw = h // 8, w // 8
    xb = x[:bh * 8, :bw * 8].reshape(bh, 8, bw, 8)
    yb = y[:bh * 8, :bw * 8].reshape(bh, 8, bw, 8)
    mx = xb.mean(axis=(1, 3))
    my = yb.mean(axis=(1, 3))
    vx = xb.var(axis=(1, 3))
    vy = yb.var(axis=(1, 3))
    cov = (xb * yb).mean(axis=(1, 3)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(np.mean(s))


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

def read_y4m(path: str) -> list[RawFrame]:
    """Read a YUV4MPEG2 (C420, 8-bit) file into frames."""
    with open(path, "rb") as f:
        data = f.read()
    nl = data.index(b"\n")
    header = data[:nl].decode("ascii", "replace")
    if not header.startswith("YUV4MPEG2"):
        raise InvalidInputError(f"{path}: not a YUV4MPEG2 file")
    m_w = re.search(r"W(\d+)", header)
    m_h = re.search(r"H(\d+)", header)
    if not (m_w and m_h):
        raise InvalidInputError(f"{path}: missing W/H in y4m header")
    m_c = re.search(r"C(\S+)", header)
    if m_c and not m_c.group(1).startswith("420"):
        raise InvalidInputError(f"{path}: only C420 is supported, got C{m_c.group(1)}")
    w, h = int(m_w.group(1)), int(m_h.group(1))
    ysz, csz = w * h, (w // 2) * (h // 2)
    frames = []
    pos = nl + 1
    while pos < len(data):
        fnl = data.index(b"\n", pos)
        if not data[pos:fnl].startswith(b"FRAME"):
            raise InvalidInputError(f"{path}: malformed FRAME header")
        pos = fnl + 1
        raw = data[pos:pos + ysz + 2 * csz]
        if len(raw) < ysz + 2 * csz:
            raise InvalidInputError(f"{path}: truncated frame payload")
        y = np.frombuffer(raw[:ysz], dtype=np.uint8).reshape(h, w)
        u = np.frombuffer(raw[ysz:ysz + csz], dtype=np.uint8).reshape(h // 2, w // 2)
        v = np.frombuffer(raw[ysz + csz:], dtype=np.uint8).reshape(h // 2, w // 2)
        frames.append(RawFrame(w, h, y.copy(), u.copy(), v.copy()))
        pos += ysz + 2 * csz
    return frames


def write_y4m(path: str, frames: list[RawFrame], fps: int = 25):
    if not frames:
        raise InvalidInputError("no frames to write")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as f:
        f.write(f"YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 C420\n".encode("ascii"))
        for fr in frames:
            f.write(b"FRAME\n")
            f.write(fr.luma.tobytes())
            f.write(fr.chroma_u.tobytes())
            f.write(fr.chroma_v.tobytes())


def read_image_sequence(directory: str) -> list[RawFrame]:
    """Read numbered PNG/PGM images (converted to grayscale luma, flat chroma)."""
    from PIL import Image

    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith((".png", ".pgm")))
    if not names:
        raise InvalidInputError(f"{directory}: no PNG/PGM files found")
    frames = []
    for name in names:
        img = Image.open(os.path.join(directory, name)).convert("L")
        luma = np.asarray(img, dtype=np.uint8)
        h, w = luma.shape
        frames.append(RawFrame(
            w, h, luma,
            np.full((h // 2, w // 2), 128, dtype=np.uint8),
            np.full((h // 2, w // 2), 128, dtype=np.uint8)))
    return frames


def load_video(path: str) -> list[RawFrame]:
    if os.path.isdir(path):
        return read_image_sequence(path)
    return read_y4m(path)


def synthetic_clip(width=128, height=128, num_frames=50, seed=0,
                   motion=2) -> list[RawFrame]:
    """Deterministic moving-texture clip for tests and demos."""
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(height * 2, width * 2), dtype=np.uint8)
    # smooth the noise so P-frame residuals are small, like natural video
    base = np.asarray(base, dtype=np.float64)
    for _ in range(2):
        base = (base + np.roll(base, 1, 0) + np.roll(base, 1, 1)
                + np.roll(base, -1, 0) + np.roll(base, -1, 1)) / 5.0
    base = base.astype(np.uint8)
    frames = []
    for i in range(num_frames):
        dy = (i * motion) % height
        dx = (i * motion) % width
        y = np.roll(np.roll(base, dy, 0), dx, 1)[:height, :width]
        u = y[::2, ::2] // 2 + 64
        v = 255 - y[1::2, 1::2] // 2 - 64
        frames.append(RawFrame(width, height, np.ascontiguousarray(y),
                               np.ascontiguousarray(u), np.ascontiguousarray(v)))
    return frames
