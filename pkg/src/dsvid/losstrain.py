"""Toy linear autoencoder trained under simulated packet erasures.

The code vector is split into pseudo-packets with the same reversible
random mapping used on the wire; a sampled loss rate erases whole
packets, and encoder gradients flow only through surviving elements.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .frames import InvalidInputError
from .packetize import make_map, _origin_indices


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LinearCodec:
    enc: np.ndarray   # (code_dim, patch_dim)
    dec: np.ndarray   # (patch_dim, code_dim)

    def __post_init__(self):
        if self.enc.shape[0] != self.dec.shape[1] or self.enc.shape[1] != self.dec.shape[0]:
            raise InvalidInputError("encoder/decoder shapes inconsistent")
        if not (np.isfinite(self.enc).all() and np.isfinite(self.dec).all()):
            raise InvalidInputError("non-finite weights")

    @property
    def patch_dim(self) -> int:
        return self.enc.shape[1]

    @property
    def code_dim(self) -> int:
        return self.enc.shape[0]

    def save(self, path: str):
        with open(path, "wb") as f:
            f.write(struct.pack("<II", self.code_dim, self.patch_dim))
            f.write(self.enc.astype("<f8").tobytes())
            f.write(self.dec.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "LinearCodec":
        with open(path, "rb") as f:
            m, d = struct.unpack("<II", f.read(8))
            enc = np.frombuffer(f.read(8 * m * d), dtype="<f8").reshape(m, d)
            dec = np.frombuffer(f.read(8 * m * d), dtype="<f8").reshape(d, m)
        return cls(enc.copy(), dec.copy())


@dataclass(frozen=True)
class ErasureDistribution:
    support: tuple           # ((loss_rate, probability), ...)
    packet_count: int = 8

    def __post_init__(self):
        if abs(sum(p for _, p in self.support) - 1.0) > 1e-9:
            raise InvalidInputError("probabilities must sum to 1")
        if any(not (0.0 <= r <= 1.0) for r, _ in self.support):
            raise InvalidInputError("loss rates must lie in [0, 1]")

    def sample_rate(self, rng: np.random.Generator) -> float:
        rates = [r for r, _ in self.support]
        probs = [p for _, p in self.support]
        return float(rng.choice(rates, p=probs))

    def mean_rate(self) -> float:
        return sum(r * p for r, p in self.support)


DISTRIBUTION_1 = ErasureDistribution(((0.3, 1.0),))
DISTRIBUTION_2 = ErasureDistribution(((0.0, 0.5), (0.3, 0.5)))
DISTRIBUTION_3 = ErasureDistribution(tuple((r, 0.25) for r in (0.0, 0.2, 0.4, 0.6)))


@dataclass
class TrainConfig:
    alpha: float = 0.0
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 16
    seed: int = 0
    erasure: ErasureDistribution = field(default_factory=lambda: DISTRIBUTION_2)
    code_dim: int | None = None   # None: match the patch dimension

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidInputError("alpha must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward(codec: LinearCodec, x: np.ndarray, mask: np.ndarray):
    """Returns (z, x_hat, loss) with loss = ||x_hat - x||^2 + alpha-free
    size proxy added by the caller; here loss is distortion + 0. See
    forward_loss for the full objective."""
    return forward_loss(codec, x, mask, alpha=0.0)


def forward_loss(codec: LinearCodec, x: np.ndarray, mask: np.ndarray,
                 alpha: float = 0.0):
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise InvalidInputError("non-finite input")
    z = codec.enc @ x
    x_hat = codec.dec @ (mask * z)
    dist = float(np.sum((x_hat - x) ** 2))
    # the size term sees pre-mask z: the sender pays for bytes regardless
    # of whether they arrive
    size_proxy = float(np.sum(np.abs(z)))
    return z, x_hat, dist + alpha * size_proxy


def backward(codec: LinearCodec, x: np.ndarray, mask: np.ndarray,
             alpha: float = 0.0):
    """Analytic gradients of forward_loss w.r.t. encoder and decoder.

    Distortion gradients reach the encoder only through unmasked code
    elements; the size term flows through all of z.
    """
    x = np.asarray(x, dtype=np.float64)
    z = codec.enc @ x
    zm = mask * z
    x_hat = codec.dec @ zm
    d_xhat = 2.0 * (x_hat - x)
    g_dec = np.outer(d_xhat, zm)
    d_z = mask * (codec.dec.T @ d_xhat) + alpha * np.sign(z)
    g_enc = np.outer(d_z, x)
    return g_enc, g_dec


def saliency(codec: LinearCodec, x: np.ndarray) -> np.ndarray:
    """|d distortion / d z_i| at the unperturbed code point."""
    x = np.asarray(x, dtype=np.float64)
    z = codec.enc @ x
    x_hat = codec.dec @ z
    return np.abs(codec.dec.T @ (2.0 * (x_hat - x)))


# ---------------------------------------------------------------------------
# Mask sampling and training
# ---------------------------------------------------------------------------

def sample_mask(code_dim: int, rate: float, packet_count: int,
                rng: np.random.Generator) -> np.ndarray:
    """Erase exactly round(rate * m) positions, grouped into pseudo-packets."""
    m = code_dim
    target = int(round(rate * m))
    mask = np.ones(m, dtype=np.float64)
    if target == 0:
        return mask
    pmap = make_map(m, min(packet_count, m), int(rng.integers(1 << 30)))
    order = rng.permutation(pmap.num_packets)
    erased = 0
    for j in order:
        idx = _origin_indices(pmap, int(j))
        take = min(len(idx), target - erased)
        mask[idx[:take]] = 0.0
        erased += take
        if erased >= target:
            break
    return mask


def train(dataset: np.ndarray, config: TrainConfig,
          curve_path: str | None = None) -> LinearCodec:
    """Plain SGD on the erasure objective; deterministic for (dataset, config)."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise InvalidInputError("dataset must be a non-empty (n, d) array")
    d = data.shape[1]
    m = config.code_dim if config.code_dim else d
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(d)
    codec = LinearCodec(rng.normal(0, scale, (m, d)),
                        rng.normal(0, scale, (d, m)))
    curve = []
    ewma = None
    for it in range(config.iterations):
        rows = rng.integers(0, len(data), size=config.batch_size)
        rate = config.erasure.sample_rate(rng)
        g_enc = np.zeros_like(codec.enc)
        g_dec = np.zeros_like(codec.dec)
        batch_loss = 0.0
        batch_dist = 0.0
        batch_size_proxy = 0.0
        for r in rows:
            x = data[r]
            mask = sample_mask(m, rate, config.erasure.packet_count, rng)
            z, x_hat, loss = forward_loss(codec, x, mask, config.alpha)
            ge, gd = backward(codec, x, mask, config.alpha)
            g_enc += ge
            g_dec += gd
            batch_loss += loss
            batch_dist += float(np.sum((x_hat - x) ** 2))
            batch_size_proxy += float(np.sum(np.abs(z)))
        if not np.isfinite(batch_loss):
            raise TrainingDivergedError(f"loss diverged at iteration {it}")
        lr = config.learning_rate / config.batch_size
        codec.enc -= lr * g_enc
        codec.dec -= lr * g_dec
        batch_loss /= config.batch_size
        ewma = batch_loss if ewma is None else ewma + (batch_loss - ewma) / 100.0
        curve.append((it, ewma, batch_dist / config.batch_size,
                      batch_size_proxy / config.batch_size))
    if not (np.isfinite(codec.enc).all() and np.isfinite(codec.dec).all()):
        raise TrainingDivergedError("weights diverged")
    if curve_path:
        with open(curve_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "distortion", "size_proxy"])
            for row in curve:
                w.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", f"{row[3]:.10g}"])
    return codec


def eval_distortion(codec: LinearCodec, dataset: np.ndarray, rate: float,
                    packet_count: int = 8, seeds: int = 20,
                    seed0: int = 10_000) -> float:
    """Mean reconstruction distortion at a fixed test erasure rate."""
    data = np.asarray(dataset, dtype=np.float64)
    total = 0.0
    count = 0
    for s in range(seeds):
        rng = np.random.default_rng(seed0 + s)
        for x in data:
            mask = sample_mask(codec.code_dim, rate, packet_count, rng)
            _, x_hat, _ = forward_loss(codec, x, mask)
            total += float(np.sum((x_hat - x) ** 2))
            count += 1
    return total / count
