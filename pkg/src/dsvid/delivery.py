"""Sender/receiver frame logic: intra-patch scheduling, quality-profile
estimation, and the wait-or-decode deadline policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import codec as cd
from . import entropy as ent
from .frames import InvalidInputError, RawFrame
from .packetize import make_map

EWMA_HALF_LIFE = 10  # frames


# ---------------------------------------------------------------------------
# Intra-patch scheduling
# ---------------------------------------------------------------------------

def ipatch_rect(frame_index: int, k_patch: int, frame_dims: tuple,
                patch_dims: tuple) -> tuple:
    """Raster-scan patch position with period k_patch; the union of the
    rects over one period covers the frame exactly once."""
    w, h = frame_dims
    pw, ph = patch_dims
    if pw > w or ph > h:
        raise InvalidInputError("patch larger than frame")
    if pw % 16 or ph % 16:
        raise InvalidInputError("patch dims must be multiples of 16")
    tiles_x = math.ceil(w / pw)
    tiles_y = math.ceil(h / ph)
    if tiles_x * tiles_y != k_patch:
        raise InvalidInputError(
            f"patch {pw}x{ph} tiles {w}x{h} into {tiles_x * tiles_y} rects, "
            f"not k_patch={k_patch}")
    t = frame_index % k_patch
    row, col = divmod(t, tiles_x)
    x, y = col * pw, row * ph
    return (x, y, min(pw, w - x), min(ph, h - y))


def choose_patch_dims(frame_dims: tuple, k_patch: int) -> tuple:
    """Pick block-aligned patch dims that tile the frame in exactly
    k_patch rects, preferring near-square tiles."""
    w, h = frame_dims
    best = None
    for a in range(1, k_patch + 1):
        if k_patch % a:
            continue
        b = k_patch // a
        pw = math.ceil(w / (16 * a)) * 16
        ph = math.ceil(h / (16 * b)) * 16
        if math.ceil(w / pw) != a or math.ceil(h / ph) != b:
            continue
        waste = abs(math.log(pw / ph))
        if best is None or waste < best[0]:
            best = (waste, pw, ph)
    if best is None:
        raise InvalidInputError(f"no {k_patch}-tile layout for {w}x{h}")
    return best[1], best[2]


def packet_count_for(width: int, height: int) -> int:
    """Per-frame packet count by frame size."""
    if width * height <= 640 * 360:
        return 8
    if width * height <= 1280 * 720:
        return 16
    return 24


# ---------------------------------------------------------------------------
# Quality profile
# ---------------------------------------------------------------------------

@dataclass
class QualityProfile:
    q: np.ndarray          # q[n] = estimated quality (dB) with n of k packets
    window: int = EWMA_HALF_LIFE

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)


def _isotonic(values: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators; enforces a non-decreasing sequence."""
    vals = list(values.astype(np.float64))
    weights = [1.0] * len(vals)
    out_v, out_w = [], []
    for v, w in zip(vals, weights):
        out_v.append(v)
        out_w.append(w)
        while len(out_v) > 1 and out_v[-2] > out_v[-1]:
            v2, w2 = out_v.pop(), out_w.pop()
            v1, w1 = out_v.pop(), out_w.pop()
            out_v.append((v1 * w1 + v2 * w2) / (w1 + w2))
            out_w.append(w1 + w2)
    result = []
    for v, w in zip(out_v, out_w):
        result.extend([v] * int(round(w)))
    return np.array(result)


def _concavify(q: np.ndarray) -> np.ndarray:
    """Replace q by its closest concave non-decreasing curve (PAV on the
    increments, non-increasing constraint; endpoints preserved).

    The one-step deadline rule compares q[i+1] - q[i] against the cost of
    waiting, which understates the value of waiting wherever the curve is
    locally flat but steep later; the concave version credits each next
    packet with the best achievable average gain, matching the
    stop-or-continue optimum."""
    inc = np.diff(q)
    smoothed = -_isotonic(-inc)
    return np.concatenate([[q[0]], q[0] + np.cumsum(smoothed)])


def estimate_profile(history: list, k: int,
                     offline_table: Optional[list] = None,
                     window: int = EWMA_HALF_LIFE) -> QualityProfile:
    """Estimate q[0..k] from (n, quality) history pairs.

    Per-n EWMA (half-life `window`), monotone interpolation between
    measured n, anchor-scaled offline sweep outside the measured range,
    and a final isotonic pass.
    """
    alpha = 1.0 - 2.0 ** (-1.0 / window)
    measured: dict = {}
    for n, quality in history:
        if n in measured:
            measured[n] += alpha * (quality - measured[n])
        else:
            measured[n] = float(quality)
    q = np.full(k + 1, np.nan)
    for n, v in measured.items():
        if 0 <= n <= k:
            q[n] = v
    if not measured:
        if offline_table is None:
            raise InvalidInputError("cold start requires an offline sweep table")
        q = np.asarray(offline_table, dtype=np.float64).copy()
    else:
        known = np.flatnonzero(~np.isnan(q))
        lo, hi = known[0], known[-1]
        # interpolate between measured points
        q[lo:hi + 1] = np.interp(np.arange(lo, hi + 1), known, q[known])
        if offline_table is not None:
            table = np.asarray(offline_table, dtype=np.float64)
            if lo > 0:
                scale = q[lo] / table[lo] if table[lo] != 0 else 1.0
                q[:lo] = table[:lo] * scale
            if hi < k:
                scale = q[hi] / table[hi] if table[hi] != 0 else 1.0
                q[hi + 1:] = table[hi + 1:] * scale
        else:
            q[:lo] = q[lo]
            q[hi + 1:] = q[hi]
    return QualityProfile(_concavify(_isotonic(q)), window)


@dataclass(frozen=True)
class DecodePolicy:
    beta: float = 0.02   # dB per millisecond

    def __post_init__(self):
        if self.beta <= 0:
            raise InvalidInputError("beta must be positive")


def decode_deadline(t_i: float, i: int, profile: QualityProfile,
                    policy: DecodePolicy) -> float:
    """Latest time worth waiting for packet i+1:
    t* = t_i + (q[i+1] - q[i]) / beta."""
    k = len(profile.q) - 1
    if not (1 <= i < k):
        raise InvalidInputError(f"i={i} must satisfy 1 <= i < k={k}")
    gain = float(profile.q[i + 1] - profile.q[i])
    return t_i + gain / policy.beta


# ---------------------------------------------------------------------------
# Receiver state machine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Decode:
    frame_index: int
    packets: tuple


@dataclass(frozen=True)
class Wait:
    frame_index: int
    until: float


@dataclass(frozen=True)
class Buffer:
    frame_index: int


@dataclass
class ReceiverState:
    packet_count: int
    profile: QualityProfile
    policy: DecodePolicy
    buffers: dict = field(default_factory=dict)   # frame -> {pkt_index: packet}
    decoded_through: int = -1
    pending_deadline: Optional[tuple] = None      # (frame_index, t*)
    late_discarded: int = 0

    def oldest_undecoded(self) -> int:
        return self.decoded_through + 1

    def packets_of(self, frame_index: int) -> tuple:
        buf = self.buffers.get(frame_index, {})
        return tuple(buf[i] for i in sorted(buf))

    def mark_decoded(self, frame_index: int):
        for f in list(self.buffers):
            if f <= frame_index:
                del self.buffers[f]
        self.decoded_through = frame_index
        if self.pending_deadline and self.pending_deadline[0] <= frame_index:
            self.pending_deadline = None


def on_packet(receiver: ReceiverState, pkt, now: float):
    """Classify an arrival: decode now, set a wait deadline, or buffer."""
    f = pkt.frame_index
    if f <= receiver.decoded_through:
        receiver.late_discarded += 1
        return Buffer(f)
    buf = receiver.buffers.setdefault(f, {})
    buf[pkt.packet_index] = pkt
    if f != receiver.oldest_undecoded():
        return Buffer(f)
    i = len(buf)
    k = receiver.packet_count
    if i >= k:
        receiver.pending_deadline = None
        return Decode(f, receiver.packets_of(f))
    t_star = decode_deadline(now, i, receiver.profile, receiver.policy)
    receiver.pending_deadline = (f, t_star)
    return Wait(f, t_star)


# ---------------------------------------------------------------------------
# Sender
# ---------------------------------------------------------------------------

@dataclass
class SenderState:
    levels: list
    width: int
    height: int
    k_patch: int = 10
    patch_dims: Optional[tuple] = None
    session_seed: int = 0
    frame_index: int = 0
    codec_state: cd.CodecState = field(default_factory=cd.CodecState)
    size_history: dict = field(default_factory=dict)   # level_id -> recent byte sizes
    iframe_interval: int = 0   # 0: single leading I-frame, rely on patches

    def __post_init__(self):
        if self.patch_dims is None:
            self.patch_dims = choose_patch_dims((self.width, self.height),
                                                self.k_patch)


def sender_encode_next(sender: SenderState, frame: RawFrame,
                       target_bytes: int) -> list:
    """Encode the next frame and return its wire packets.

    The encoder reference is the sender's own full-reception decode of
    the previous frame; receiver divergence heals via the scanning
    intra patches.
    """
    idx = sender.frame_index
    level = cd.bitrate_select(target_bytes, sender.levels, sender.size_history,
                              frame.width * frame.height)
    is_iframe = idx == 0 or (sender.iframe_interval and
                             idx % sender.iframe_interval == 0)
    if is_iframe:
        tensor = cd.encode_iframe(frame, level)
    else:
        rect = ipatch_rect(idx, sender.k_patch,
                           (frame.width, frame.height), sender.patch_dims)
        tensor = cd.encode_pframe(frame, sender.codec_state, level, rect)
    # sender-side full-reception decode becomes the next reference
    decode_state = cd.CodecState(decoder_reference=sender.codec_state.encoder_reference)
    sender.codec_state.encoder_reference = cd.decode(tensor, decode_state)
    k = packet_count_for(frame.width, frame.height)
    map_seed = sender.session_seed ^ idx
    pmap = make_map(tensor.num_elements, k, map_seed)
    model = ent.fit_model(tensor)
    packets = ent.frame_to_packets(tensor, pmap, model,
                                   frame_index=idx, map_seed=map_seed)
    total = sum(p.wire_size for p in packets)
    sender.size_history.setdefault(level.level_id, []).append(total)
    del sender.size_history[level.level_id][:-8]
    sender.frame_index += 1
    return packets
