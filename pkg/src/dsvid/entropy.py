"""Per-packet lossless range coding and wire serialization.

Every packet of a frame is coded against one shared per-frame symbol
model, so any packet is decodable on its own. The quantized model
histogram rides redundantly in the first three packets of each frame.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .codec import SYMBOL_BOUND, CodedTensor
from .frames import InvalidInputError
from .packetize import ElementList

ALPHABET = 2 * SYMBOL_BOUND + 1       # symbols -S..S
MODEL_TOTAL = (1 << 16) - 1           # frequency total, must stay below 2^16
MAX_EXPLICIT = 127                    # sparse histogram entries that fit 512 bytes
MAX_WIRE_BYTES = 1400
MODEL_COPIES = 3                      # packets that carry the model blob

MAGIC = 0xD5C0
VERSION = 1
_HEADER = struct.Struct("<HBIBHHIQBII")
_KIND_CODE = {"I": 0, "P": 1, "PI": 2}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


class ModelMismatchError(ValueError):
    """Packet was coded with a different symbol model."""


class CorruptPacketError(ValueError):
    """Payload fails its checksum or cannot be parsed."""


@dataclass(frozen=True)
class SymbolModel:
    cumulative: np.ndarray   # uint32, len ALPHABET + 1, cumulative[-1] == total

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])

    def freq(self, symbol: int) -> int:
        i = symbol + SYMBOL_BOUND
        return int(self.cumulative[i + 1] - self.cumulative[i])

    def serialize(self) -> bytes:
        freqs = np.diff(self.cumulative)
        explicit = np.flatnonzero(freqs > 1)
        parts = [struct.pack("<H", len(explicit))]
        for i in explicit:
            parts.append(struct.pack("<HH", int(i), int(freqs[i])))
        return b"".join(parts)

    @classmethod
    def deserialize(cls, blob: bytes) -> "SymbolModel":
        if len(blob) < 2:
            raise CorruptPacketError("model blob too short")
        (count,) = struct.unpack_from("<H", blob, 0)
        if len(blob) != 2 + 4 * count:
            raise CorruptPacketError("model blob length mismatch")
        freqs = np.ones(ALPHABET, dtype=np.uint32)
        for n in range(count):
            i, f = struct.unpack_from("<HH", blob, 2 + 4 * n)
            freqs[i] = f
        cum = np.zeros(ALPHABET + 1, dtype=np.uint32)
        np.cumsum(freqs, out=cum[1:])
        if cum[-1] != MODEL_TOTAL:
            raise CorruptPacketError("model total mismatch")
        return cls(cum)

    def digest(self) -> int:
        return zlib.crc32(self.serialize()) & 0xFFFFFFFF


def fit_model(tensor: CodedTensor) -> SymbolModel:
    """Adaptive per-frame histogram: floor 1 everywhere, remaining mass
    split among the most frequent symbols proportionally."""
    if tensor.num_elements == 0:
        raise InvalidInputError("empty tensor")
    return model_from_counts(np.bincount(tensor.symbols + SYMBOL_BOUND,
                                         minlength=ALPHABET))


def model_from_counts(counts: np.ndarray) -> SymbolModel:
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != ALPHABET:
        raise InvalidInputError("counts length must equal alphabet size")
    freqs = np.ones(ALPHABET, dtype=np.int64)
    present = np.flatnonzero(counts > 0)
    # keep only the heaviest symbols explicit so the blob stays <= 512 bytes
    if len(present) > MAX_EXPLICIT:
        order = np.lexsort((present, -counts[present]))
        present = np.sort(present[order[:MAX_EXPLICIT]])
    budget = MODEL_TOTAL - ALPHABET
    csel = counts[present]
    tot = int(csel.sum())
    if tot > 0 and budget > 0 and len(present) > 0:
        exact = csel * budget / tot
        alloc = np.floor(exact).astype(np.int64)
        rem = budget - int(alloc.sum())
        if rem > 0:
            # largest fractional remainder first; ties to lower symbol index
            frac = exact - alloc
            order = np.lexsort((present, -frac))
            alloc[order[:rem]] += 1
        freqs[present] += alloc
    else:
        freqs[0] += budget
    cum = np.zeros(ALPHABET + 1, dtype=np.uint32)
    np.cumsum(freqs, out=cum[1:])
    return SymbolModel(cum)


# ---------------------------------------------------------------------------
# 32-bit range coder core
# ---------------------------------------------------------------------------

_TOP = 1 << 24
_MASK = 0xFFFFFFFF


@njit(cache=True)
def _rc_encode(indices, cum, out):
    low = 0
    rng = _MASK
    pos = 0
    total = cum[-1]
    for s in indices:
        r = rng // total
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        if low > _MASK:
            i = pos - 1
            while out[i] == 0xFF:
                out[i] = 0
                i -= 1
            out[i] += 1
            low &= _MASK
        while rng < _TOP:
            out[pos] = (low >> 24) & 0xFF
            pos += 1
            low = (low << 8) & _MASK
            rng <<= 8
    # minimal flush: rng >= 2^24 here, so some multiple of 2^24 lies in
    # [low, low + rng); emit its top byte only and let the decoder
    # zero-fill the rest of the code register
    rem = low & 0xFFFFFF
    if rem:
        nlow = low + ((1 << 24) - rem)
        if nlow > _MASK and pos == 0:
            # no emitted byte to carry into; write low exactly instead
            for _ in range(4):
                out[pos] = (low >> 24) & 0xFF
                pos += 1
                low = (low << 8) & _MASK
            return pos
        if nlow > _MASK:
            i = pos - 1
            while out[i] == 0xFF:
                out[i] = 0
                i -= 1
            out[i] += 1
            nlow &= _MASK
        low = nlow
    out[pos] = (low >> 24) & 0xFF
    pos += 1
    return pos


@njit(cache=True)
def _rc_decode(buf, cum, n, out):
    low = 0
    rng = _MASK
    code = 0
    pos = 0
    for _ in range(4):
        b = buf[pos] if pos < len(buf) else 0
        code = ((code << 8) | b) & _MASK
        pos += 1
    total = cum[-1]
    for i in range(n):
        r = rng // total
        f = ((code - low) & _MASK) // r
        if f >= total:
            f = total - 1
        s = np.searchsorted(cum, f, side="right") - 1
        out[i] = s
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        if low > _MASK:
            low &= _MASK
        while rng < _TOP:
            b = buf[pos] if pos < len(buf) else 0
            code = ((code << 8) | b) & _MASK
            low = (low << 8) & _MASK
            rng <<= 8
            pos += 1
    return pos


def range_encode(symbols: np.ndarray, model: SymbolModel) -> bytes:
    idx = np.asarray(symbols, dtype=np.int64) + SYMBOL_BOUND
    if len(idx) and (idx.min() < 0 or idx.max() >= ALPHABET):
        raise InvalidInputError("symbol out of alphabet bounds")
    out = np.empty(8 * len(idx) + 16, dtype=np.uint8)
    n = _rc_encode(idx, model.cumulative.astype(np.int64), out)
    return out[:n].tobytes()


def range_decode(payload: bytes, count: int, model: SymbolModel) -> np.ndarray:
    buf = np.frombuffer(payload, dtype=np.uint8)
    out = np.empty(count, dtype=np.int64)
    _rc_decode(buf, model.cumulative.astype(np.int64), count, out)
    return (out - SYMBOL_BOUND).astype(np.int32)


def shannon_bytes(symbols: np.ndarray, model: SymbolModel) -> float:
    """Model cross-entropy of a symbol list, in bytes."""
    idx = np.asarray(symbols, dtype=np.int64) + SYMBOL_BOUND
    cum = model.cumulative.astype(np.float64)
    p = (cum[idx + 1] - cum[idx]) / model.total
    return float(-np.log2(p).sum() / 8.0)


# ---------------------------------------------------------------------------
# Wire packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WirePacket:
    frame_index: int
    frame_kind: str
    packet_index: int
    packet_count: int
    element_count: int
    map_seed: int
    level_id: int
    model_digest: int
    payload: bytes            # range-coded element bytes
    model_blob: bytes = b""   # non-empty only in the first MODEL_COPIES packets

    def serialize(self) -> bytes:
        body = struct.pack("<H", len(self.model_blob)) + self.model_blob + self.payload
        header = _HEADER.pack(
            MAGIC, VERSION, self.frame_index, _KIND_CODE[self.frame_kind],
            self.packet_index, self.packet_count, self.element_count,
            self.map_seed, self.level_id, self.model_digest,
            zlib.crc32(body) & 0xFFFFFFFF)
        return header + body

    @property
    def wire_size(self) -> int:
        return _HEADER.size + 2 + len(self.model_blob) + len(self.payload)

    @classmethod
    def parse(cls, data: bytes) -> "WirePacket":
        if len(data) < _HEADER.size + 2:
            raise CorruptPacketError("packet too short")
        (magic, version, frame_index, kind, packet_index, packet_count,
         element_count, map_seed, level_id, model_digest,
         checksum) = _HEADER.unpack_from(data, 0)
        if magic != MAGIC or version != VERSION:
            raise CorruptPacketError("bad magic/version")
        body = data[_HEADER.size:]
        if (zlib.crc32(body) & 0xFFFFFFFF) != checksum:
            raise CorruptPacketError("checksum mismatch")
        (model_len,) = struct.unpack_from("<H", body, 0)
        if len(body) < 2 + model_len:
            raise CorruptPacketError("truncated model blob")
        return cls(frame_index, _KIND_NAME[kind], packet_index, packet_count,
                   element_count, map_seed, level_id, model_digest,
                   body[2 + model_len:], bytes(body[2:2 + model_len]))


def encode_packet(elements: ElementList, model: SymbolModel, *,
                  frame_index: int, frame_kind: str, packet_count: int,
                  map_seed: int, level_id: int,
                  model_blob: bytes = b"") -> WirePacket:
    payload = range_encode(elements.element_values, model)
    return WirePacket(frame_index, frame_kind, elements.packet_index,
                      packet_count, elements.element_count, map_seed,
                      level_id, model.digest(), payload, model_blob)


def decode_packet(wire: WirePacket, model: SymbolModel) -> ElementList:
    if model.digest() != wire.model_digest:
        raise ModelMismatchError("model digest does not match packet header")
    values = range_decode(wire.payload, wire.element_count, model)
    return ElementList(wire.packet_index, values)


# ---------------------------------------------------------------------------
# Frame-level composition
# ---------------------------------------------------------------------------

def frame_to_packets(tensor: CodedTensor, pmap, model: SymbolModel, *,
                     frame_index: int, map_seed: int) -> list:
    from .packetize import packetize

    blob = model.serialize()
    lists = packetize(tensor, pmap)
    packets = []
    for el in lists:
        packets.append(encode_packet(
            el, model,
            frame_index=frame_index, frame_kind=tensor.frame_kind,
            packet_count=pmap.num_packets, map_seed=map_seed,
            level_id=tensor.level_id,
            model_blob=blob if el.packet_index < MODEL_COPIES else b""))
    return packets


def packets_to_tensor(packets: list, dims: tuple, quant_step: float,
                      fallback_model: Optional[SymbolModel] = None,
                      ipatch_rect=None) -> tuple:
    """Decode any non-empty packet subset back to a zero-filled tensor.

    Returns (tensor, model); the model comes from a carried blob when
    available, else from fallback_model.
    """
    from .packetize import depacketize, make_map

    if not packets:
        raise InvalidInputError("need at least one packet")
    head = packets[0]
    model = None
    for p in packets:
        if p.model_blob:
            model = SymbolModel.deserialize(p.model_blob)
            break
    if model is None:
        model = fallback_model
    if model is None:
        raise ModelMismatchError("no model blob received and no fallback model")
    n = dims[0] * dims[1] * dims[2]
    pmap = make_map(n, head.packet_count, head.map_seed)
    received = {p.packet_index: decode_packet(p, model) for p in packets}
    tensor = depacketize(received, pmap, dims,
                         frame_kind=head.frame_kind, quant_step=quant_step,
                         level_id=head.level_id, ipatch_rect=ipatch_rect)
    return tensor, model


# ---------------------------------------------------------------------------
# MTU fragmentation: oversize wire packets split into continuation
# fragments that share one packet_index and are all-or-nothing.
# ---------------------------------------------------------------------------

_FRAG_CHUNK = MAX_WIRE_BYTES - 2   # 2-byte (frag_index, frag_total) prefix


def split_wire(data: bytes) -> list:
    total = max(1, -(-len(data) // _FRAG_CHUNK))
    if total > 255:
        raise InvalidInputError("packet too large to fragment")
    return [bytes([i, total]) + data[i * _FRAG_CHUNK:(i + 1) * _FRAG_CHUNK]
            for i in range(total)]


def join_wire(frags: list) -> bytes:
    if not frags:
        raise CorruptPacketError("no fragments")
    total = frags[0][1]
    if len(frags) != total:
        raise CorruptPacketError("missing fragments")
    ordered = sorted(frags, key=lambda f: f[0])
    if [f[0] for f in ordered] != list(range(total)):
        raise CorruptPacketError("fragment indices inconsistent")
    return b"".join(bytes(f[2:]) for f in ordered)
