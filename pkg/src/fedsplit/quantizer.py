"""Stochastic quantizer over a uniform knob grid, its exact output law,
the shrinking-interval scheduler, the (0, delta)-DP calculator, and the
bit-exact upload codec.

A quantizer state is a per-coordinate box [lo, hi] of shared scalar width
holding l knobs c_tau = lo + tau (hi - lo)/(l - 1).  A coordinate in
[c_tau, c_{tau+1}) rounds down with probability (c_{tau+1} - w)/bin and up
otherwise, which is unbiased; a coordinate exactly on a knob maps there with
probability one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ConfigError, ProtocolIntegrityError

_HEADER = struct.Struct("<QQQdd")  # d, l, B, lo[0], hi[0]


@dataclass(frozen=True)
class QuantizerState:
    lo: np.ndarray
    hi: np.ndarray
    level: int

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape:
            raise ConfigError("lo and hi must share a shape")
        if np.any(hi <= lo):
            raise ConfigError("need hi > lo per coordinate")
        if self.level < 2:
            raise ConfigError("need at least two knobs")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    @property
    def bits(self) -> int:
        return max(1, math.ceil(math.log2(self.level)))

    @property
    def width(self) -> float:
        return float(self.hi[0] - self.lo[0])

    @property
    def bin(self) -> float:
        return self.width / (self.level - 1)

    def knob(self, indices: np.ndarray) -> np.ndarray:
        """Knob values for integer indices (vectorized)."""
        return self.lo + np.asarray(indices) * ((self.hi - self.lo) / (self.level - 1))

    def contains(self, w: np.ndarray, tol: float = 0.0) -> bool:
        w = np.asarray(w)
        slack = tol * max(1.0, self.width)
        return bool(np.all(w >= self.lo - slack) and np.all(w <= self.hi + slack))


@dataclass(frozen=True)
class QuantizedVector:
    indices: np.ndarray
    state: QuantizerState

    def values(self) -> np.ndarray:
        return self.state.knob(self.indices)


def _bracket(w: np.ndarray, qs: QuantizerState):
    """Per coordinate: bracketing knob index tau (clipped to l-2), the two
    knob values, and the round-up probability."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != qs.lo.shape:
        raise ConfigError("input dimension mismatch")
    if not qs.contains(w):
        raise ProtocolIntegrityError("quantizer input outside the current interval")
    step = (qs.hi - qs.lo) / (qs.level - 1)
    tau = np.clip(np.floor((w - qs.lo) / step).astype(np.int64), 0, qs.level - 2)
    c_lo = qs.lo + tau * step
    c_hi = qs.lo + (tau + 1) * step
    p_up = np.clip((w - c_lo) / (c_hi - c_lo), 0.0, 1.0)
    return tau, c_lo, c_hi, p_up


def quantize(w: np.ndarray, qs: QuantizerState, rng: np.random.Generator) -> QuantizedVector:
    """Randomized rounding to the two bracketing knobs; coordinates independent."""
    tau, _, _, p_up = _bracket(w, qs)
    up = rng.random(size=tau.shape) < p_up
    return QuantizedVector(indices=tau + up.astype(np.int64), state=qs)


def output_distribution(w: np.ndarray, qs: QuantizerState) -> list[list[tuple[float, float]]]:
    """Exact per-coordinate atom list [(value, probability), ...].

    Knob inputs give a single unit atom; probabilities of a two-atom law sum
    to exactly 1.0 (the down-probability is computed as 1 - p_up).
    """
    _, c_lo, c_hi, p_up = _bracket(w, qs)
    out = []
    for j in range(qs.d):
        p = float(p_up[j])
        if p == 0.0:
            out.append([(float(c_lo[j]), 1.0)])
        elif p == 1.0:
            out.append([(float(c_hi[j]), 1.0)])
        else:
            out.append([(float(c_lo[j]), 1.0 - p), (float(c_hi[j]), p)])
    return out


def distribution_mean_var(atoms: list[tuple[float, float]]) -> tuple[float, float]:
    mean = sum(v * p for v, p in atoms)
    var = sum(p * (v - mean) ** 2 for v, p in atoms)
    return mean, var


def tv_distance(atoms_a: list[tuple[float, float]], atoms_b: list[tuple[float, float]]) -> float:
    """Total variation distance between two finite atom lists."""
    support = sorted({v for v, _ in atoms_a} | {v for v, _ in atoms_b})
    pa = {v: 0.0 for v in support}
    pb = {v: 0.0 for v in support}
    for v, p in atoms_a:
        pa[v] += p
    for v, p in atoms_b:
        pb[v] += p
    return 0.5 * sum(abs(pa[v] - pb[v]) for v in support)


def shrink_interval(q: QuantizedVector, pi_t: float, a_max_k: float) -> QuantizerState:
    """Next-round box centered at the quantized values, width pi_t * a_max_k."""
    if pi_t <= 0 or a_max_k <= 0:
        raise ConfigError("interval width factors must be positive")
    half = 0.5 * pi_t * a_max_k
    center = q.values()
    return QuantizerState(lo=center - half, hi=center + half, level=q.state.level)


def compute_pi_t(epsilon: float, lambda2_u: float, w_tilde_max: float) -> float:
    """Interval-width constant 8(eps + eps~ + eps~ W~)/(1 - lambda2)."""
    if lambda2_u >= 1.0:
        raise ConfigError("lambda2(U) must be below 1")
    eps_t = max(1.0, epsilon)
    return 8.0 * (epsilon + eps_t + eps_t * w_tilde_max) / (1.0 - lambda2_u)


def error_bound(qs: QuantizerState, d: int | None = None) -> float:
    """Static worst-case error sqrt(d) (hi - lo)/(l - 1)."""
    dd = qs.d if d is None else d
    return math.sqrt(dd) * qs.width / (qs.level - 1)


def dynamic_error_bound(pi_t: float, B: int, a_max_k: float, d: int) -> float:
    """Shrinking-interval error bound sqrt(d) pi a / (2^B - 1)."""
    return math.sqrt(d) * pi_t * a_max_k / (2**B - 1)


def dp_delta(C4: float, pi_t: float, a_max_k: float, level: int, B: int) -> float:
    """(0, delta) privacy level of one quantized upload:
    min{ C4 (l-1)/(pi a), (l-1)/(2^B - 1) }."""
    if pi_t <= 0 or a_max_k <= 0 or C4 < 0:
        raise ConfigError("need positive width factors and C4 >= 0")
    return min(C4 * (level - 1) / (pi_t * a_max_k), (level - 1) / (2**B - 1))


# -- wire format --------------------------------------------------------------
#
# Fixed 40-byte header: d, l, B as uint64 LE, then lo[0] and hi[0] as float64
# LE, followed by ceil(B*d/8) payload bytes.  The payload packs the indices
# most-significant group first into one integer serialized little-endian, so
# e.g. d=3, l=5, B=3, indices [0,4,2] give the integer 0b000_100_010 = 0x22
# and the payload bytes 22 00.


def encoded_size(d: int, B: int) -> int:
    return _HEADER.size + (B * d + 7) // 8


def encode(q: QuantizedVector) -> bytes:
    qs = q.state
    B = qs.bits
    indices = np.asarray(q.indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= qs.level):
        raise CodecError("index out of range for the quantization level")
    packed = 0
    for idx in indices:
        packed = (packed << B) | int(idx)
    payload = packed.to_bytes((B * qs.d + 7) // 8, "little")
    header = _HEADER.pack(qs.d, qs.level, B, float(qs.lo[0]), float(qs.hi[0]))
    return header + payload


def decode(blob: bytes, qs: QuantizerState) -> QuantizedVector:
    """Exact inverse of encode against the caller's quantizer state."""
    if len(blob) < _HEADER.size:
        raise CodecError("truncated header")
    d, level, B, lo0, hi0 = _HEADER.unpack_from(blob)
    if d != qs.d or level != qs.level or B != qs.bits:
        raise CodecError("header does not match the quantizer state")
    if lo0 != float(qs.lo[0]) or hi0 != float(qs.hi[0]):
        raise CodecError("header interval does not match the quantizer state")
    expected = (B * d + 7) // 8
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise CodecError("truncated or oversized payload")
    packed = int.from_bytes(payload, "little")
    mask = (1 << B) - 1
    indices = np.empty(d, dtype=np.int64)
    for j in range(d - 1, -1, -1):
        indices[j] = packed & mask
        packed >>= B
    if packed != 0:
        raise CodecError("payload carries excess bits")
    if np.any(indices >= level):
        raise CodecError("decoded index exceeds the quantization level")
    return QuantizedVector(indices=indices, state=qs)
