"""Deterministic block-DCT toy video codec with graceful degradation.

Frames are coded as quantized 8x8 DCT coefficients. P-frames code a
motion-free residual against a reference; an optional intra patch region
is coded without any reference so it refreshes receiver state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from .frames import InvalidInputError, RawFrame, psnr as _psnr

SYMBOL_BOUND = 1023        # coefficients clamp to [-S, S]
FRAME_I = "I"
FRAME_P = "P"
FRAME_P_IPATCH = "PI"


class StateError(RuntimeError):
    """Raised when a codec operation needs a reference that is not set."""


@dataclass(frozen=True)
class QualityLevel:
    level_id: int
    quant_step: float
    nominal_bpp: float

    def __post_init__(self):
        if self.quant_step <= 0:
            raise InvalidInputError("quant_step must be positive")


def default_levels(count: int = 12, finest: float = 4.0, coarsest: float = 181.0):
    """Quality ladder: quantization steps geometric from finest to coarsest.

    nominal_bpp is a deliberately pessimistic prior so a sender with no
    size history starts coarse and probes upward; measured sizes take
    over after the first frame at any level.
    """
    steps = np.geomspace(finest, coarsest, count)
    return [QualityLevel(i, float(q), float(12.8 / q ** 0.9)) for i, q in enumerate(steps)]


@dataclass(frozen=True)
class CodedTensor:
    frame_kind: str                      # FRAME_I | FRAME_P | FRAME_P_IPATCH
    dims: tuple                          # (channels, rows, cols); product == len(symbols)
    symbols: np.ndarray                  # flat int32, within [-SYMBOL_BOUND, SYMBOL_BOUND]
    quant_step: float
    level_id: int
    ipatch_rect: Optional[tuple] = None  # (x, y, w, h) in luma pixels

    def __post_init__(self):
        c, r, k = self.dims
        if len(self.symbols) != c * r * k:
            raise InvalidInputError("symbol count does not match dims")
        if self.quant_step <= 0:
            raise InvalidInputError("quant_step must be positive")

    @property
    def num_elements(self) -> int:
        return len(self.symbols)

    def frame_size(self) -> tuple:
        c, r, k = self.dims
        return 2 * k, 2 * r  # (width, height) in luma pixels


@dataclass
class CodecState:
    encoder_reference: Optional[RawFrame] = None
    decoder_reference: Optional[RawFrame] = None


# ---------------------------------------------------------------------------
# Block DCT helpers
# ---------------------------------------------------------------------------

def _blockify(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblockify(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def _fdct(plane: np.ndarray) -> np.ndarray:
    b = _blockify(plane.astype(np.float64))
    return scipy.fft.dctn(b, type=2, norm="ortho", axes=(2, 3))


def _idct(coeffs: np.ndarray) -> np.ndarray:
    b = scipy.fft.idctn(coeffs, type=2, norm="ortho", axes=(2, 3))
    return _unblockify(b)


def _quantize(plane: np.ndarray, qstep: float) -> np.ndarray:
    sym = np.rint(_fdct(plane) / qstep).astype(np.int32)
    return np.clip(sym, -SYMBOL_BOUND, SYMBOL_BOUND)


def _dequantize(sym_blocks: np.ndarray, qstep: float) -> np.ndarray:
    return _idct(sym_blocks.astype(np.float64) * qstep)


def _plane_to_flat(sym_blocks: np.ndarray) -> np.ndarray:
    return _unblockify(sym_blocks).ravel()


def _flat_to_blocks(flat: np.ndarray, h: int, w: int) -> np.ndarray:
    return _blockify(flat.reshape(h, w))


def _split_symbols(tensor: CodedTensor):
    w, h = tensor.frame_size()
    n_y = w * h
    n_c = (w // 2) * (h // 2)
    s = tensor.symbols
    return (s[:n_y].reshape(h, w),
            s[n_y:n_y + n_c].reshape(h // 2, w // 2),
            s[n_y + n_c:].reshape(h // 2, w // 2))


def _pack_symbols(y_sym, u_sym, v_sym):
    return np.concatenate([y_sym.ravel(), u_sym.ravel(), v_sym.ravel()])


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------

def _check_rect(rect, width, height):
    x, y, w, h = rect
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise InvalidInputError(f"ipatch rect {rect} outside {width}x{height} frame")
    if any(v % 16 for v in rect):
        raise InvalidInputError(f"ipatch rect {rect} not block-aligned (16px)")


def encode_iframe(frame: RawFrame, level: QualityLevel) -> CodedTensor:
    """Intra-code a frame: per-plane 8x8 DCT on level-shifted samples."""
    q = level.quant_step
    planes = []
    for plane in (frame.luma, frame.chroma_u, frame.chroma_v):
        sym = _quantize(plane.astype(np.float64) - 128.0, q)
        planes.append(_plane_to_flat(sym))
    symbols = np.concatenate(planes)
    dims = (6, frame.height // 2, frame.width // 2)
    return CodedTensor(FRAME_I, dims, symbols, q, level.level_id)


def encode_pframe(frame: RawFrame, state: CodecState, level: QualityLevel,
                  ipatch: Optional[tuple] = None) -> CodedTensor:
    """Code the residual against the encoder reference; the optional intra
    patch region is coded without a reference (level-shifted samples)."""
    if state.encoder_reference is None:
        raise StateError("encoder reference not set; encode an I-frame first")
    ref = state.encoder_reference
    if (ref.width, ref.height) != (frame.width, frame.height):
        raise InvalidInputError("reference dims do not match frame")
    if ipatch is not None:
        _check_rect(ipatch, frame.width, frame.height)
    q = level.quant_step
    planes = []
    for cur, prev, sub in ((frame.luma, ref.luma, 1),
                           (frame.chroma_u, ref.chroma_u, 2),
                           (frame.chroma_v, ref.chroma_v, 2)):
        signal = cur.astype(np.float64) - prev.astype(np.float64)
        if ipatch is not None:
            x, y, w, h = (v // sub for v in ipatch)
            signal[y:y + h, x:x + w] = cur[y:y + h, x:x + w].astype(np.float64) - 128.0
        planes.append(_plane_to_flat(_quantize(signal, q)))
    symbols = np.concatenate(planes)
    dims = (6, frame.height // 2, frame.width // 2)
    kind = FRAME_P if ipatch is None else FRAME_P_IPATCH
    return CodedTensor(kind, dims, symbols, q, level.level_id, ipatch)


def decode(tensor: CodedTensor, state: CodecState) -> RawFrame:
    """Reconstruct a frame; zero-filled symbols decode as-is (never fails)."""
    w, h = tensor.frame_size()
    if tensor.frame_kind != FRAME_I:
        if state.decoder_reference is None:
            raise StateError("decoder reference not set")
        ref = state.decoder_reference
        if (ref.width, ref.height) != (w, h):
            raise InvalidInputError("decoder reference dims mismatch")
    y_sym, u_sym, v_sym = _split_symbols(tensor)
    out = []
    for sym, size, refplane, sub in (
            (y_sym, (h, w), None if tensor.frame_kind == FRAME_I else state.decoder_reference.luma, 1),
            (u_sym, (h // 2, w // 2), None if tensor.frame_kind == FRAME_I else state.decoder_reference.chroma_u, 2),
            (v_sym, (h // 2, w // 2), None if tensor.frame_kind == FRAME_I else state.decoder_reference.chroma_v, 2)):
        signal = _dequantize(_blockify(sym), tensor.quant_step)
        if tensor.frame_kind == FRAME_I:
            plane = signal + 128.0
        else:
            plane = signal + refplane.astype(np.float64)
            if tensor.ipatch_rect is not None:
                x, y, pw, ph = (v // sub for v in tensor.ipatch_rect)
                patch = signal[y:y + ph, x:x + pw] + 128.0
                plane[y:y + ph, x:x + pw] = patch
        out.append(np.clip(np.rint(plane), 0, 255).astype(np.uint8))
    return RawFrame(w, h, out[0], out[1], out[2])


# ---------------------------------------------------------------------------
# Metrics re-export and rate selection
# ---------------------------------------------------------------------------

psnr = _psnr


def bitrate_select(target_bytes: int, levels: list, history: dict,
                   pixels: int) -> QualityLevel:
    """Pick the level whose predicted size is the largest value <= target.

    Prediction is an EWMA (alpha 0.5, newest last) of that level's recent
    sizes, falling back to nominal_bpp * pixels / 8 with no history. If no
    level fits, the coarsest level is returned. Ties go to the lowest
    level_id (highest quality).
    """
    if not levels:
        raise InvalidInputError("empty level list")
    ordered = sorted(levels, key=lambda l: l.level_id)
    measured = {}
    for lv in ordered:
        sizes = history.get(lv.level_id)
        if sizes:
            pred = float(sizes[0])
            for s in sizes[1:]:
                pred = 0.5 * pred + 0.5 * float(s)
            measured[lv.level_id] = pred
    best = None
    best_size = -1.0
    for lv in ordered:
        if lv.level_id in measured:
            pred = measured[lv.level_id]
        elif measured:
            # scale from the closest measured level by the nominal ratio;
            # content-specific cost transfers across the ladder
            near = min(measured, key=lambda i: abs(i - lv.level_id))
            near_bpp = next(l.nominal_bpp for l in ordered if l.level_id == near)
            pred = measured[near] * lv.nominal_bpp / near_bpp
        else:
            pred = lv.nominal_bpp * pixels / 8.0
        if pred <= target_bytes and pred > best_size:
            best = lv
            best_size = pred
    if best is None:
        return max(levels, key=lambda l: l.quant_step)
    return best


def quality_vs_packets(frame: RawFrame, state: CodecState, tensor: CodedTensor,
                       k: int, seed: int = 0, seeds: int = 3) -> list:
    """Offline sweep: mean decode PSNR with n of k packets, n = 0..k.

    Used for cold-start quality profiles. Averages over a few random maps.
    """
    from .packetize import make_map, packetize, depacketize

    q = [0.0] * (k + 1)
    for s in range(seeds):
        pmap = make_map(tensor.num_elements, k, seed + 1000 * s)
        lists = packetize(tensor, pmap)
        for n in range(k + 1):
            received = {i: lists[i] for i in range(n)}
            t = depacketize(received, pmap, tensor.dims,
                            frame_kind=tensor.frame_kind,
                            quant_step=tensor.quant_step,
                            level_id=tensor.level_id,
                            ipatch_rect=tensor.ipatch_rect)
            q[n] += _psnr(frame, decode(t, state))
    return [v / seeds for v in q]
