"""Deterministic discrete-event simulation of a one-way bottleneck path.

A trace-driven link (one MTU packet per listed millisecond, cyclic),
a droptail queue, fixed propagation delay, feedback delayed by one
one-way delay, pluggable congestion control, and five delivery schemes.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import codec as cd
from . import delivery as dl
from . import entropy as ent
from .frames import InvalidInputError, RawFrame, psnr, ssim

RATE_FLOOR_BPS = 50_000


class TraceFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Link trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkTrace:
    opportunities: tuple     # sorted ms timestamps, one MTU packet each
    period: int              # trace wraps after this many ms

    def __post_init__(self):
        if not self.opportunities:
            raise TraceFormatError("empty trace")
        if self.period <= 0:
            raise TraceFormatError("period must be positive")
        prev = -1
        for t in self.opportunities:
            if t < 0:
                raise TraceFormatError("negative timestamp")
            if t < prev:
                raise TraceFormatError("timestamps must be non-decreasing")
            prev = t
        if prev > self.period:
            raise TraceFormatError("timestamp beyond period")

    def mean_rate_bps(self) -> float:
        return len(self.opportunities) * 1500 * 8 * 1000.0 / self.period


def load_trace(path: str) -> LinkTrace:
    """Parse a trace file: one integer millisecond per line, each line one
    1500-byte delivery opportunity; the schedule repeats cyclically."""
    values = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: not an integer: {line!r}")
    if not values:
        raise TraceFormatError(f"{path}: empty trace")
    return LinkTrace(tuple(values), max(values[-1], 1))


def constant_trace(rate_bps: float, period_ms: int = 1000) -> LinkTrace:
    """Evenly spaced opportunities approximating a constant rate."""
    n = max(1, round(rate_bps * period_ms / (1500 * 8 * 1000)))
    ops = tuple(int(i * period_ms / n) for i in range(1, n + 1))
    return LinkTrace(ops, period_ms)


def step_trace(schedule: list) -> LinkTrace:
    """Piecewise-constant schedule: list of (duration_ms, rate_bps)."""
    ops = []
    t = 0.0
    for duration, rate in schedule:
        interval = 1500 * 8 * 1000.0 / rate
        tick = t + interval
        end = t + duration
        while tick <= end:
            ops.append(int(round(tick)))
            tick += interval
        t = end
    if not ops:
        raise TraceFormatError("schedule produced no opportunities")
    return LinkTrace(tuple(sorted(ops)), int(t))


class _Cursor:
    """Monotone pointer into the cyclic opportunity schedule."""

    def __init__(self, trace: LinkTrace):
        self.ops = trace.opportunities
        self.period = trace.period
        self.n = len(self.ops)
        self.g = 0   # global opportunity index; each index used at most once

    def _time(self, g: int) -> float:
        return (g // self.n) * self.period + self.ops[g % self.n]

    def next_at(self, t: float) -> float:
        """Consume and return the first unused opportunity at or after t."""
        cycle = max(0, int(t) // self.period)
        local = bisect_left(self.ops, t - cycle * self.period)
        g = cycle * self.n + local
        g = max(g, self.g)
        while self._time(g) < t:
            g += 1
        self.g = g + 1
        return self._time(g)


# ---------------------------------------------------------------------------
# Path, scheme, and congestion control config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathConfig:
    one_way_delay: float = 100.0   # ms
    queue_capacity: int = 25       # packets
    mtu: int = 1500                # bytes

    def __post_init__(self):
        if self.one_way_delay < 0 or self.queue_capacity < 1:
            raise ConfigError("invalid path config")

    @property
    def rtt(self) -> float:
        return 2.0 * self.one_way_delay


SCHEMES = ("DataScalable", "IdealFEC", "IdealSVC", "Retransmit", "FrameSkip")


@dataclass(frozen=True)
class Scheme:
    variant: str
    fec_window_ms: float = 2000.0     # loss predictor window
    svc_layers: int = 4
    svc_base_fec: float = 0.5
    retransmit_extra_ms: float = 10.0  # timeout = RTT + this

    def __post_init__(self):
        if self.variant not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.variant!r}")


@dataclass
class CCState:
    algorithm: str = "gcc"            # "gcc" | "salsify"
    rate_bps: float = 1_000_000.0
    window: list = field(default_factory=list)   # (send_ts, recv_ts, size)
    prev_owd: Optional[float] = None
    overuse_threshold_ms: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ("gcc", "salsify"):
            raise ConfigError(f"unknown cc {self.algorithm!r}")


def cc_step(state: CCState, now: float, rtt: float, frame_interval: float,
            ceiling_bps: float) -> float:
    """Update and return the target rate from the feedback window.

    Window entries are (send_ts, recv_ts, size, heard_ts) where heard_ts
    is when the sender learned of the delivery; the window keeps the last
    RTT of feedback as heard by the sender.
    """
    state.window = [f for f in state.window if f[3] > now - max(rtt, 1.0)]
    if state.algorithm == "salsify":
        acked = sum(f[2] for f in state.window)
        if acked > 0:
            # probe above the measured goodput, else the estimate can
            # never exceed what was last sent; compound while the sender
            # keeps up with the target so coarse ladder steps stay reachable
            measured = acked * 8.0 * 1000.0 / max(rtt, 1.0)
            if measured >= 0.7 * state.rate_bps:
                state.rate_bps = max(1.2 * measured, 1.08 * state.rate_bps)
            else:
                state.rate_bps = 1.2 * measured
    else:
        recent = state.window
        if recent:
            owd = sum(f[1] - f[0] for f in recent) / len(recent)
            if state.prev_owd is not None and \
                    owd - state.prev_owd > state.overuse_threshold_ms:
                state.rate_bps *= 0.85
            else:
                state.rate_bps *= 1.05
            state.prev_owd = owd
    state.rate_bps = min(max(state.rate_bps, RATE_FLOOR_BPS), ceiling_bps)
    return state.rate_bps


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    frame_index: int
    encode_start: float
    decode_end: float = math.nan
    delay: float = math.nan
    packets_sent: int = 0
    packets_received: int = 0
    packets_late: int = 0
    bytes_sent: int = 0
    quality: float = math.nan
    ssim: float = math.nan
    skipped: bool = False


def percentile_nearest_rank(values: list, pct: float) -> float:
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class SessionReport:
    scheme: str
    frames: list
    duration_ms: float
    packets_sent: int = 0
    packets_delivered: int = 0
    packets_dropped: int = 0
    packets_in_flight: int = 0

    def aggregates(self) -> dict:
        delays = [f.delay for f in self.frames if not math.isnan(f.delay)]
        delivered = [f for f in self.frames if not f.skipped]
        qual = [f.quality for f in delivered if not math.isnan(f.quality)]
        sq = [f.ssim for f in delivered if not math.isnan(f.ssim)]
        # displayed quality counts skipped frames at their freeze quality
        # (last delivered frame shown against the current source)
        shown = [f.quality for f in self.frames if not math.isnan(f.quality)]
        return {
            "mean_quality": sum(qual) / len(qual) if qual else math.nan,
            "display_quality": sum(shown) / len(shown) if shown else math.nan,
            "mean_ssim": sum(sq) / len(sq) if sq else math.nan,
            "p95_delay": percentile_nearest_rank(delays, 95.0),
            "mean_delay": sum(delays) / len(delays) if delays else math.nan,
            "delivered_frames": len(delivered),
            "total_frames": len(self.frames),
            "delivered_fps": len(delivered) * 1000.0 / self.duration_ms
            if self.duration_ms else math.nan,
        }


# ---------------------------------------------------------------------------
# Conventional-coding quality table for the idealized baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityTable:
    """Per (frame, level): encoded bytes and lossless decode quality for a
    conventional (non-scalable) coding of the clip."""
    bytes_: np.ndarray    # (frames, levels) int
    psnr_: np.ndarray     # (frames, levels) float
    ssim_: np.ndarray     # (frames, levels) float
    level_ids: tuple

    def pick(self, frame: int, budget: int) -> int:
        """Column of the highest-quality level fitting the byte budget,
        else the smallest level."""
        row = self.bytes_[frame]
        fits = np.flatnonzero(row <= budget)
        if len(fits):
            return int(fits[0])      # levels ordered finest -> coarsest
        return int(np.argmin(row))


def build_quality_table(clip: list, levels: list) -> QualityTable:
    """Encode the clip conventionally (I then P, lossless references) at
    every level and record sizes and reconstruction quality."""
    ordered = sorted(levels, key=lambda l: l.level_id)
    nf, nl = len(clip), len(ordered)
    bytes_ = np.zeros((nf, nl), dtype=np.int64)
    psnr_ = np.zeros((nf, nl))
    ssim_ = np.zeros((nf, nl))
    for j, lv in enumerate(ordered):
        state = cd.CodecState()
        for i, frame in enumerate(clip):
            if i == 0:
                tensor = cd.encode_iframe(frame, lv)
            else:
                tensor = cd.encode_pframe(frame, state, lv)
            model = ent.fit_model(tensor)
            payload = ent.range_encode(tensor.symbols, model)
            bytes_[i, j] = len(payload) + len(model.serialize()) + 24
            out = cd.decode(tensor, cd.CodecState(
                decoder_reference=state.encoder_reference))
            state.encoder_reference = out
            state.decoder_reference = out
            psnr_[i, j] = psnr(frame, out)
            ssim_[i, j] = ssim(frame, out)
    return QualityTable(bytes_, psnr_, ssim_,
                        tuple(lv.level_id for lv in ordered))


# ---------------------------------------------------------------------------
# Simulation session
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    clip: list                      # RawFrame sequence
    scheme: Scheme
    trace: LinkTrace
    path: PathConfig = field(default_factory=PathConfig)
    levels: list = field(default_factory=cd.default_levels)
    policy: dl.DecodePolicy = field(default_factory=dl.DecodePolicy)
    cc: str = "gcc"
    cc_initial_bps: float = 1_000_000.0
    fps: float = 25.0
    k_patch: int = 10
    seed: int = 0
    table: Optional[QualityTable] = None   # reused across sessions if given

    def __post_init__(self):
        if not self.clip:
            raise ConfigError("empty clip")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")


@dataclass
class _LinkPacket:
    seq: int
    size: int
    frame_index: int
    send_ts: float = 0.0
    payload: object = None
    kind: str = ""        # scheme-specific tag ("src", "fec", "layerN", ...)
    is_retx: bool = False


_EV_FRAME = 0
_EV_SERVICE = 1
_EV_ARRIVE = 2
_EV_FEEDBACK = 3
_EV_DEADLINE = 4
_EV_RTO = 5
_EV_RESOLVE = 6
_EV_END = 7


class _Loop:
    """Shared event loop, queue, link, and feedback machinery."""

    def __init__(self, config: SimConfig):
        self.cfg = config
        self.path = config.path
        self.events = []
        self._seq = 0
        self.queue = []
        self.cursor = _Cursor(config.trace)
        self.service_pending = False
        self.cc = CCState(config.cc, config.cc_initial_bps)
        self.ceiling = config.trace.mean_rate_bps()
        self.frame_interval = 1000.0 / config.fps
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.pkt_seq = 0

    def push(self, time: float, kind: int, data=None):
        heapq.heappush(self.events, (time, self._seq, kind, data))
        self._seq += 1

    def send(self, now: float, pkt: _LinkPacket):
        pkt.send_ts = now
        self.sent += 1
        if len(self.queue) >= self.path.queue_capacity:
            self.dropped += 1
            self.on_drop(pkt)
            return
        self.queue.append(pkt)
        if not self.service_pending:
            self.service_pending = True
            self.push(self.cursor.next_at(now), _EV_SERVICE)

    def on_drop(self, pkt: _LinkPacket):
        pass

    def handle_service(self, now: float):
        self.service_pending = False
        if not self.queue:
            return
        pkt = self.queue.pop(0)
        self.push(now + self.path.one_way_delay, _EV_ARRIVE, pkt)
        if self.queue:
            self.service_pending = True
            self.push(self.cursor.next_at(now), _EV_SERVICE)

    def handle_arrive(self, now: float, pkt: _LinkPacket):
        self.delivered += 1
        self.push(now + self.path.one_way_delay, _EV_FEEDBACK,
                  (pkt.send_ts, now, pkt.size, pkt))
        self.on_arrival(now, pkt)

    def frame_budget(self, now: float) -> int:
        rate = cc_step(self.cc, now, self.path.rtt, self.frame_interval,
                       self.ceiling)
        return max(200, int(rate * self.frame_interval / 8000.0))

    def on_arrival(self, now: float, pkt: _LinkPacket):
        raise NotImplementedError

    def on_feedback(self, now: float, fb):
        self.cc.window.append((fb[0], fb[1], fb[2], now))


# ---------------------------------------------------------------------------
# DataScalable session: runs the real codec, packetizer, and range coder
# ---------------------------------------------------------------------------

class _DataScalableSession(_Loop):
    def __init__(self, config: SimConfig):
        super().__init__(config)
        clip = config.clip
        w, h = clip[0].width, clip[0].height
        self.k = dl.packet_count_for(w, h)
        self.levels = sorted(config.levels, key=lambda l: l.level_id)
        self.level_by_id = {lv.level_id: lv for lv in self.levels}
        self.sender = dl.SenderState(self.levels, w, h,
                                     k_patch=config.k_patch,
                                     session_seed=config.seed)
        self.dims = (6, h // 2, w // 2)
        # loss-sweep tables and packet-value history are tracked per
        # quality level: a coarse frame saturates at its level's lossless
        # quality, so waiting for its tail packets is worth far less than
        # for a fine frame
        self._tables = {}
        self._profiles = {}
        mid = self.levels[len(self.levels) // 2]
        self.profile = dl.estimate_profile([], self.k,
                                           offline_table=self._table_for(mid))
        self.receiver = dl.ReceiverState(self.k, self.profile, config.policy)
        self.dec_state = cd.CodecState()
        self.quality_history = {}     # level_id -> [(n, quality)]
        self.last_model = None
        self.records = {}
        self.fragments = {}     # (frame, packet_index) -> {frag_index}
        # packets that arrive after their frame was displayed still fix
        # the decoder reference: recent decodes are held and the chain is
        # replayed from the earliest late-updated frame before each decode
        self.held = {}          # frame -> {"packets", "lv", "rect", "ref_before", "out"}
        self.repair_from = None
        self.held_span = 12

    def on_frame(self, now: float, idx: int):
        frame = self.cfg.clip[idx]
        budget = self.frame_budget(now)
        packets = dl.sender_encode_next(self.sender, frame, budget)
        rec = FrameRecord(idx, now)
        self.records[idx] = rec
        # bundle wire packets into MTU-sized link packets so small frames
        # do not burn one delivery opportunity per tiny wire packet
        entries = []
        for wp in packets:
            frags = ent.split_wire(wp.serialize())
            for fi, blob in enumerate(frags):
                entries.append((wp, wp.packet_index, fi, len(frags), len(blob)))
        room = ent.MAX_WIRE_BYTES
        bundle, size = [], 0
        for e in entries:
            if bundle and size + e[4] > room:
                self._send_bundle(now, idx, rec, bundle, size)
                bundle, size = [], 0
            bundle.append(e[:4])
            size += e[4]
        if bundle:
            self._send_bundle(now, idx, rec, bundle, size)

    def _table_for(self, lv) -> list:
        if lv.level_id not in self._tables:
            tensor = cd.encode_iframe(self.cfg.clip[0], lv)
            self._tables[lv.level_id] = cd.quality_vs_packets(
                self.cfg.clip[0], cd.CodecState(), tensor, self.k,
                seed=self.cfg.seed)
        return self._tables[lv.level_id]

    def _profile_for(self, lv) -> dl.QualityProfile:
        if lv.level_id not in self._profiles:
            history = self.quality_history.get(lv.level_id, [])
            self._profiles[lv.level_id] = dl.estimate_profile(
                history, self.k, offline_table=self._table_for(lv))
        return self._profiles[lv.level_id]

    def _send_bundle(self, now, idx, rec, bundle, size):
        rec.packets_sent += 1
        rec.bytes_sent += size
        self.send(now, _LinkPacket(self.pkt_seq, size, idx,
                                   payload=tuple(bundle)))
        self.pkt_seq += 1

    def on_arrival(self, now: float, pkt: _LinkPacket):
        rec = self.records[pkt.frame_index]
        idx = pkt.frame_index
        if idx > self.receiver.decoded_through:
            # the queue is FIFO and each packet is sent once, so an
            # arrival for frame g means no packet of any earlier frame is
            # still in flight: older frames are final, resolve them now
            self._resolve_older(idx, now)
        if idx <= self.receiver.decoded_through:
            rec.packets_late += 1
            for wp, packet_index, fi, total in pkt.payload:
                got = self.fragments.setdefault((idx, packet_index), set())
                got.add(fi)
                if len(got) >= total:
                    self._late_refresh(idx, wp)
            return
        rec.packets_received += 1
        for wp, packet_index, fi, total in pkt.payload:
            got = self.fragments.setdefault((idx, packet_index), set())
            got.add(fi)
            if len(got) < total:
                continue   # wire packets reassemble all-or-nothing
            if idx <= self.receiver.decoded_through:
                # an earlier wire packet in this bundle may have hit the
                # count threshold and decoded the frame mid-bundle
                self._late_refresh(idx, wp)
                continue
            self.receiver.profile = self._profile_for(
                self.level_by_id[wp.level_id])
            action = dl.on_packet(self.receiver, wp, now)
            if isinstance(action, dl.Decode):
                self._decode(action.frame_index, now)
            elif isinstance(action, dl.Wait):
                self.push(action.until, _EV_DEADLINE,
                          (action.frame_index, action.until))

    def handle_deadline(self, now: float, data):
        frame_index, t_star = data
        pending = self.receiver.pending_deadline
        if pending and pending[0] == frame_index and pending[1] == t_star:
            self._decode(frame_index, now)

    def _resolve_older(self, frame_index: int, now: float):
        """Decode every older frame with whatever survived; frames with no
        complete wire packet are skipped when a newer frame decodes."""
        rx = self.receiver
        for f in range(rx.oldest_undecoded(), frame_index):
            if f > rx.decoded_through and rx.buffers.get(f):
                self._decode(f, now)

    def _decode(self, frame_index: int, now: float):
        self._repair_reference()
        rx = self.receiver
        packets = rx.packets_of(frame_index)
        # frames older than this one never got a packet: skipped
        for f in range(rx.decoded_through + 1, frame_index):
            old = self.records[f]
            old.skipped = True
            old.decode_end = now
            old.delay = now - old.encode_start
            if self.dec_state.decoder_reference is not None:
                prev = self.dec_state.decoder_reference
                old.quality = psnr(self.cfg.clip[f], prev)
                old.ssim = ssim(self.cfg.clip[f], prev)
        rec = self.records[frame_index]
        lv = self.level_by_id[packets[0].level_id]
        rect = None
        if packets[0].frame_kind == cd.FRAME_P_IPATCH:
            rect = dl.ipatch_rect(frame_index, self.cfg.k_patch,
                                  (self.cfg.clip[0].width, self.cfg.clip[0].height),
                                  self.sender.patch_dims)
        try:
            tensor, model = ent.packets_to_tensor(
                list(packets), self.dims, lv.quant_step,
                fallback_model=self.last_model, ipatch_rect=rect)
        except (ent.ModelMismatchError, ent.CorruptPacketError):
            rec.skipped = True
            rec.decode_end = now
            rec.delay = now - rec.encode_start
            rx.mark_decoded(frame_index)
            self._reschedule(now)
            return
        self.last_model = model
        if tensor.frame_kind != cd.FRAME_I and \
                self.dec_state.decoder_reference is None:
            rec.skipped = True
            rec.decode_end = now
            rec.delay = now - rec.encode_start
            rx.mark_decoded(frame_index)
            self._reschedule(now)
            return
        src = self.cfg.clip[frame_index]
        history = self.quality_history.setdefault(lv.level_id, [])
        # measure the marginal value of each received packet against the
        # same reference, so reference drift does not flatten the profile
        for m in range(1, len(packets)):
            part, _ = ent.packets_to_tensor(
                list(packets[:m]), self.dims, lv.quant_step,
                fallback_model=self.last_model, ipatch_rect=rect)
            history.append((m, psnr(src, cd.decode(part, self.dec_state))))
        ref_before = self.dec_state.decoder_reference
        out = cd.decode(tensor, self.dec_state)
        self.dec_state.decoder_reference = out
        self.held[frame_index] = {
            "packets": {p.packet_index: p for p in packets},
            "lv": lv, "rect": rect, "ref_before": ref_before, "out": out,
        }
        for f in list(self.held):
            if f < frame_index - self.held_span:
                del self.held[f]
        rec.decode_end = now
        rec.delay = now - rec.encode_start
        rec.quality = psnr(src, out)
        rec.ssim = ssim(src, out)
        history.append((len(packets), rec.quality))
        del history[:-200]
        self._profiles.pop(lv.level_id, None)
        rx.profile = self._profile_for(lv)
        rx.mark_decoded(frame_index)
        self._reschedule(now)

    def _late_refresh(self, frame_index: int, wp):
        entry = self.held.get(frame_index)
        if entry is None or wp.packet_index in entry["packets"]:
            return
        entry["packets"][wp.packet_index] = wp
        if self.repair_from is None or frame_index < self.repair_from:
            self.repair_from = frame_index

    def _repair_reference(self):
        """Replay held decodes from the earliest late-updated frame, each
        against the best-known output of the frame before it, and adopt
        the result as the decoder reference."""
        start = self.repair_from
        self.repair_from = None
        if start is None or not self.held:
            return
        newest = None
        for f in sorted(self.held):
            if f < start:
                newest = f
                continue
            entry = self.held[f]
            # frames absent from held (skipped) never updated the
            # reference, so the nearest older held output is the right one
            ref = self.held[newest]["out"] if newest is not None \
                else entry["ref_before"]
            try:
                tensor, _ = ent.packets_to_tensor(
                    sorted(entry["packets"].values(),
                           key=lambda p: p.packet_index),
                    self.dims, entry["lv"].quant_step,
                    fallback_model=self.last_model,
                    ipatch_rect=entry["rect"])
                entry["out"] = cd.decode(
                    tensor, cd.CodecState(decoder_reference=ref))
            except (ent.ModelMismatchError, ent.CorruptPacketError):
                pass
            newest = f
        self.dec_state.decoder_reference = self.held[newest]["out"]

    def _reschedule(self, now: float):
        """After a decode, the next buffered frame may already be waiting."""
        rx = self.receiver
        waiting = [f for f in rx.buffers if f > rx.decoded_through and rx.buffers[f]]
        if not waiting:
            return
        f = min(waiting)
        i = len(rx.buffers[f])
        if i >= self.k:
            self._decode(f, now)
        else:
            t_star = dl.decode_deadline(now, i, rx.profile, self.cfg.policy) \
                if i >= 1 else now
            rx.pending_deadline = (f, t_star)
            self.push(t_star, _EV_DEADLINE, (f, t_star))

    def flush(self, now: float):
        rx = self.receiver
        waiting = sorted(f for f in rx.buffers
                         if f > rx.decoded_through and rx.buffers[f])
        for f in waiting:
            if f > rx.decoded_through:
                self._decode(f, now)
        for f in range(rx.decoded_through + 1, len(self.cfg.clip)):
            rec = self.records.get(f)
            if rec is None:
                continue
            rec.skipped = True
            rec.decode_end = now
            rec.delay = now - rec.encode_start


# ---------------------------------------------------------------------------
# Idealized baselines: lossless rate-quality accounting from the table
# ---------------------------------------------------------------------------

class _BaselineSession(_Loop):
    """Common bookkeeping for table-driven baseline schemes."""

    def __init__(self, config: SimConfig):
        super().__init__(config)
        self.table = config.table or build_quality_table(config.clip,
                                                         config.levels)
        self.records = {}
        self.meta = {}          # frame -> scheme bookkeeping dict
        self.resolved = set()
        self.pending_skips = []
        self.last_decode_end = 0.0

    def payload_size(self) -> int:
        return self.path.mtu - 100   # header allowance

    def split_count(self, nbytes: int) -> int:
        return max(1, math.ceil(nbytes / self.payload_size()))

    def start_frame(self, now, idx, budget):
        col = self.table.pick(idx, budget)
        rec = FrameRecord(idx, now)
        self.records[idx] = rec
        return rec, col

    def record_delivery(self, idx: int, now: float, col: int):
        rec = self.records[idx]
        rec.decode_end = max(now, self.last_decode_end)
        rec.delay = rec.decode_end - rec.encode_start
        rec.quality = float(self.table.psnr_[idx, col])
        rec.ssim = float(self.table.ssim_[idx, col])
        self.last_decode_end = rec.decode_end
        self.resolved.add(idx)
        for f in self.pending_skips:
            r = self.records[f]
            r.decode_end = rec.decode_end
            r.delay = r.decode_end - r.encode_start
        self.pending_skips.clear()

    def record_skip(self, idx: int, now: float):
        rec = self.records[idx]
        rec.skipped = True
        rec.quality = psnr(self.cfg.clip[max(0, idx - 1)], self.cfg.clip[idx])
        self.resolved.add(idx)
        self.pending_skips.append(idx)

    def resolve_older(self, frame_index: int, now: float):
        """A later frame's packet arrived; earlier frames are final (the
        queue is FIFO, so their remaining packets were dropped)."""
        for f in sorted(self.meta):
            if f < frame_index and f not in self.resolved:
                self.finalize(f, now)

    def finalize(self, idx: int, now: float):
        raise NotImplementedError

    def flush(self, now: float):
        for f in sorted(self.meta):
            if f not in self.resolved:
                self.finalize(f, now)
        for f in self.pending_skips:
            r = self.records[f]
            r.decode_end = now
            r.delay = now - r.encode_start
        self.pending_skips.clear()


class _FrameSkipSession(_BaselineSession):
    def on_frame(self, now, idx):
        budget = self.frame_budget(now)
        rec, col = self.start_frame(now, idx, budget)
        nbytes = int(self.table.bytes_[idx, col])
        n = self.split_count(nbytes)
        self.meta[idx] = {"col": col, "need": n, "got": 0}
        size = math.ceil(nbytes / n)
        for _ in range(n):
            rec.packets_sent += 1
            rec.bytes_sent += size
            self.send(now, _LinkPacket(self.pkt_seq, size, idx))
            self.pkt_seq += 1

    def on_arrival(self, now, pkt):
        idx = pkt.frame_index
        self.resolve_older(idx, now)
        if idx in self.resolved:
            self.records[idx].packets_late += 1
            return
        m = self.meta[idx]
        rec = self.records[idx]
        rec.packets_received += 1
        m["got"] += 1
        if m["got"] >= m["need"]:
            self.record_delivery(idx, now, m["col"])

    def finalize(self, idx, now):
        self.record_skip(idx, now)


class _FECSession(_BaselineSession):
    def __init__(self, config):
        super().__init__(config)
        self.loss_samples = []      # (time_known, loss_fraction)
        self.loss_ewma = 0.0

    def predicted_loss(self, now: float) -> float:
        window = self.cfg.scheme.fec_window_ms
        samples = [l for t, l in self.loss_samples if t > now - window]
        est = self.loss_ewma
        for l in samples:
            est += 0.5 * (l - est)
        return min(max(est, 0.0), 0.95)

    def on_frame(self, now, idx):
        budget = self.frame_budget(now)
        r = self.predicted_loss(now)
        rec, col = self.start_frame(now, idx, int(budget * (1.0 - r)))
        nbytes = int(self.table.bytes_[idx, col])
        src = self.split_count(nbytes)
        total = math.ceil(src / (1.0 - r)) if r > 0 else src
        self.meta[idx] = {"col": col, "src": src, "total": total, "got": 0}
        size = math.ceil(nbytes / src)
        for j in range(total):
            rec.packets_sent += 1
            rec.bytes_sent += size
            self.send(now, _LinkPacket(self.pkt_seq, size, idx,
                                       kind="src" if j < src else "fec"))
            self.pkt_seq += 1
        self.push(now + self.path.rtt + 50.0, _EV_RESOLVE, idx)

    def on_arrival(self, now, pkt):
        idx = pkt.frame_index
        self.resolve_older(idx, now)
        if idx in self.resolved:
            self.records[idx].packets_late += 1
            return
        m = self.meta[idx]
        rec = self.records[idx]
        rec.packets_received += 1
        m["got"] += 1
        if m["got"] >= m["src"]:
            self.record_delivery(idx, now, m["col"])

    def handle_resolve(self, now, idx):
        # the sender learns this frame's loss fraction one RTT after sending
        m = self.meta[idx]
        rec = self.records[idx]
        got = rec.packets_received + rec.packets_late
        loss = 1.0 - got / m["total"]
        self.loss_samples.append((now, max(0.0, loss)))
        self.loss_ewma += 0.5 * (max(0.0, loss) - self.loss_ewma)
        self.loss_samples = [(t, l) for t, l in self.loss_samples
                             if t > now - self.cfg.scheme.fec_window_ms]
        if idx not in self.resolved:
            self.finalize(idx, now)

    def finalize(self, idx, now):
        self.record_skip(idx, now)


class _SVCSession(_BaselineSession):
    def on_frame(self, now, idx):
        budget = self.frame_budget(now)
        nl = self.cfg.scheme.svc_layers
        top = self.table.pick(idx, budget)
        ncols = self.table.bytes_.shape[1]
        # layers run coarsest -> finest, ending at the budget-fitting level
        cols = [min(top + (nl - 1 - h), ncols - 1) for h in range(nl)]
        rec = FrameRecord(idx, now)
        self.records[idx] = rec
        layers = []
        prev_bytes = 0
        for h, col in enumerate(cols):
            nbytes = int(self.table.bytes_[idx, col])
            extra = max(1, nbytes - prev_bytes)
            prev_bytes = max(nbytes, prev_bytes)
            n = self.split_count(extra)
            if h == 0:
                n_sent = math.ceil(n / (1.0 - self.cfg.scheme.svc_base_fec))
            else:
                n_sent = n
            layers.append({"col": col, "need": n, "got": 0, "sent": n_sent})
            size = math.ceil(extra / n)
            for _ in range(n_sent):
                rec.packets_sent += 1
                rec.bytes_sent += size
                self.send(now, _LinkPacket(self.pkt_seq, size, idx,
                                           kind=f"layer{h}"))
                self.pkt_seq += 1
        self.meta[idx] = {"layers": layers}
        self.push(now + self.path.rtt + 50.0, _EV_RESOLVE, idx)

    def on_arrival(self, now, pkt):
        idx = pkt.frame_index
        self.resolve_older(idx, now)
        if idx in self.resolved:
            self.records[idx].packets_late += 1
            return
        self.records[idx].packets_received += 1
        h = int(pkt.kind[5:])
        self.meta[idx]["layers"][h]["got"] += 1

    def handle_resolve(self, now, idx):
        if idx not in self.resolved:
            self.finalize(idx, now)

    def finalize(self, idx, now):
        layers = self.meta[idx]["layers"]
        best = None
        for layer in layers:
            if layer["got"] >= layer["need"]:
                best = layer["col"]
            else:
                break
        if best is None:
            self.record_skip(idx, now)
        else:
            self.record_delivery(idx, now, best)


class _RetransmitSession(_BaselineSession):
    def __init__(self, config):
        super().__init__(config)
        self.acked = set()

    def on_frame(self, now, idx):
        budget = self.frame_budget(now)
        rec, col = self.start_frame(now, idx, budget)
        nbytes = int(self.table.bytes_[idx, col])
        n = self.split_count(nbytes)
        self.meta[idx] = {"col": col, "need": n, "got": set()}
        size = math.ceil(nbytes / n)
        for j in range(n):
            self._send_numbered(now, idx, j, size, rec)

    def _send_numbered(self, now, idx, j, size, rec, retx=False):
        seq = self.pkt_seq
        self.pkt_seq += 1
        rec.packets_sent += 1
        rec.bytes_sent += size
        pkt = _LinkPacket(seq, size, idx, payload=(idx, j, size), is_retx=retx)
        self.send(now, pkt)
        timeout = self.path.rtt + self.cfg.scheme.retransmit_extra_ms
        self.push(now + timeout, _EV_RTO, (idx, j, size, seq))

    def on_arrival(self, now, pkt):
        idx, j, size = pkt.payload
        m = self.meta[idx]
        rec = self.records[idx]
        if j in m["got"]:
            rec.packets_late += 1
            return
        rec.packets_received += 1
        m["got"].add(j)
        if len(m["got"]) >= m["need"] and idx not in self.resolved:
            self.record_delivery(idx, now, m["col"])

    def on_feedback(self, now, fb):
        super().on_feedback(now, fb)
        pkt = fb[3]
        if pkt.payload is not None:
            self.acked.add(pkt.seq)

    def handle_rto(self, now, data):
        idx, j, size, seq = data
        if seq in self.acked or j in self.meta[idx]["got"]:
            return
        if idx in self.resolved:
            return
        self._send_numbered(now, idx, j, size, self.records[idx], retx=True)

    def finalize(self, idx, now):
        # retransmissions eventually complete every frame; only the
        # end-of-session flush lands here
        rec = self.records[idx]
        rec.skipped = True
        rec.decode_end = now
        rec.delay = now - rec.encode_start
        self.resolved.add(idx)


_SESSIONS = {
    "DataScalable": _DataScalableSession,
    "IdealFEC": _FECSession,
    "IdealSVC": _SVCSession,
    "Retransmit": _RetransmitSession,
    "FrameSkip": _FrameSkipSession,
}


def simulate(config: SimConfig) -> SessionReport:
    """Run one deterministic session and return its report."""
    session = _SESSIONS[config.scheme.variant](config)
    interval = 1000.0 / config.fps
    for i in range(len(config.clip)):
        session.push(i * interval, _EV_FRAME, i)
    end_time = len(config.clip) * interval + max(10 * config.path.rtt, 3000.0)
    session.push(end_time, _EV_END)
    finished = False
    while session.events and not finished:
        now, _, kind, data = heapq.heappop(session.events)
        if now > end_time and kind != _EV_END:
            continue
        if kind == _EV_FRAME:
            session.on_frame(now, data)
        elif kind == _EV_SERVICE:
            session.handle_service(now)
        elif kind == _EV_ARRIVE:
            session.handle_arrive(now, data)
        elif kind == _EV_FEEDBACK:
            session.on_feedback(now, data)
        elif kind == _EV_DEADLINE:
            session.handle_deadline(now, data)
        elif kind == _EV_RTO:
            session.handle_rto(now, data)
        elif kind == _EV_RESOLVE:
            session.handle_resolve(now, data)
        elif kind == _EV_END:
            session.flush(now)
            finished = True
    in_flight = session.sent - session.delivered - session.dropped
    frames = [session.records[i] for i in sorted(session.records)]
    return SessionReport(config.scheme.variant, frames,
                         duration_ms=end_time,
                         packets_sent=session.sent,
                         packets_delivered=session.delivered,
                         packets_dropped=session.dropped,
                         packets_in_flight=in_flight)
