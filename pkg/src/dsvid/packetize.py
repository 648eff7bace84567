"""Reversible pseudo-random element-to-packet mapping with zero-fill.

Element i of an N-element tensor is sent through the permutation
sigma(i) = (i * p) mod N with p prime and gcd(p, N) = 1, then position
q = sigma(i) lands in packet q mod k at slot q div k. Lost packets zero
their elements on depacketization.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np

from .codec import CodedTensor
from .frames import InvalidInputError


@dataclass(frozen=True)
class PacketizationMap:
    num_elements: int
    num_packets: int
    prime: int
    prime_inverse: int

    def packet_size(self, j: int) -> int:
        return len(range(j, self.num_elements, self.num_packets))


@dataclass(frozen=True)
class ElementList:
    packet_index: int
    element_values: np.ndarray

    @property
    def element_count(self) -> int:
        return len(self.element_values)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    d = 3
    while d * d <= n:
        if n % d == 0:
            return False
        d += 2
    return True


def make_map(num_elements: int, num_packets: int, seed: int) -> PacketizationMap:
    """Deterministic map for (N, k, seed): first prime at or above a
    seed-derived offset that is coprime with N."""
    n, k = num_elements, num_packets
    if k > n:
        raise InvalidInputError(f"num_packets {k} exceeds num_elements {n}")
    if k < 1 or n < 1:
        raise InvalidInputError("num_elements and num_packets must be positive")
    # Knuth multiplicative hash scatters seeds over [0, N)
    offset = (seed * 2654435761 + 12345) % max(n, 2)
    p = max(2, offset)
    while not (_is_prime(p) and gcd(p, n) == 1):
        p += 1
    p_inv = pow(p, -1, n) if n > 1 else 0
    return PacketizationMap(n, k, p, p_inv)


def _origin_indices(pmap: PacketizationMap, packet_index: int) -> np.ndarray:
    """Original element indices carried by one packet, in slot order."""
    q = np.arange(packet_index, pmap.num_elements, pmap.num_packets, dtype=np.int64)
    return (q * pmap.prime_inverse) % pmap.num_elements


def packetize(tensor: CodedTensor, pmap: PacketizationMap) -> list:
    if pmap.num_elements != tensor.num_elements:
        raise InvalidInputError("map size does not match tensor")
    symbols = tensor.symbols
    return [ElementList(j, symbols[_origin_indices(pmap, j)])
            for j in range(pmap.num_packets)]


def depacketize(received: dict, pmap: PacketizationMap, dims: tuple,
                frame_kind: str = "I", quant_step: float = 1.0,
                level_id: int = 0, ipatch_rect=None) -> CodedTensor:
    """Restore received elements to their positions; absent packets are zero."""
    c, r, k = dims
    n = c * r * k
    if n != pmap.num_elements:
        raise InvalidInputError("dims do not match map size")
    seen = set()
    symbols = np.zeros(n, dtype=np.int32)
    for idx, elist in received.items():
        j = elist.packet_index
        if j != idx:
            raise InvalidInputError("packet_index key mismatch")
        if j in seen:
            raise InvalidInputError(f"duplicate packet_index {j}")
        if not (0 <= j < pmap.num_packets):
            raise InvalidInputError(f"packet_index {j} out of range")
        seen.add(j)
        orig = _origin_indices(pmap, j)
        if len(orig) != elist.element_count:
            raise InvalidInputError("element count does not match map")
        symbols[orig] = elist.element_values
    return CodedTensor(frame_kind, dims, symbols, quant_step, level_id, ipatch_rect)
