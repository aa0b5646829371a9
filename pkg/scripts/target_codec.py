#!/usr/bin/env python3
"""
Bitwise Target Codec

Turns a continuous target in [lo, hi] into B binary decisions, most
significant first. Bit i answers whether the value lies in the upper half of
the interval left by bits 0..i-1, so each extra bit halves the resolution.
Values outside the range are clamped; decoding returns bin centres.
"""

import math

import numpy as np

from errors import ConfigurationError, ContractError, DomainError, ParameterError

DECODE_MODES = ("threshold", "expected")


class BitCodec:
    """Quantisation range plus bit depth"""

    def __init__(self, lo, hi, bits=16):
        if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
            raise ConfigurationError(f"codec range must satisfy lo < hi, got [{lo}, {hi}]")
        if int(bits) != bits or bits < 1:
            raise ParameterError(f"bit depth must be a positive integer, got {bits}")
        self.lo = float(lo)
        self.hi = float(hi)
        self.bits = int(bits)
        self._weights = 2.0 ** np.arange(self.bits - 1, -1, -1)

    @property
    def levels(self):
        return 2 ** self.bits

    @property
    def bin_width(self):
        return (self.hi - self.lo) / self.levels

    @property
    def max_error(self):
        """Half-bin bound on |decode(encode(v)) - v| for v in range"""
        return self.bin_width / 2.0

    def __repr__(self):
        return f"BitCodec(lo={self.lo}, hi={self.hi}, bits={self.bits})"

    def __eq__(self, other):
        return isinstance(other, BitCodec) and (self.lo, self.hi, self.bits) == (other.lo, other.hi, other.bits)

    def quantize(self, values):
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise DomainError("cannot encode non-finite values")
        q = np.floor((v - self.lo) / (self.hi - self.lo) * self.levels)
        return np.clip(q, 0, self.levels - 1).astype(np.int64)

    def encode(self, value):
        """MSB-first bit vector (int8) of length B"""
        return self.encode_batch(np.array([value]))[0]

    def encode_batch(self, values):
        q = self.quantize(np.asarray(values, dtype=np.float64).reshape(-1))
        shifts = np.arange(self.bits - 1, -1, -1)
        return ((q[:, None] >> shifts[None, :]) & 1).astype(np.int8)

    def _centre(self, q):
        return self.lo + (q + 0.5) / self.levels * (self.hi - self.lo)

    def decode(self, bits):
        b = np.asarray(bits)
        if b.ndim != 1 or b.shape[0] != self.bits:
            raise ContractError(f"expected a bit vector of length {self.bits}, got shape {b.shape}")
        return float(self.decode_batch(b[None, :])[0])

    def decode_batch(self, bits):
        b = np.asarray(bits)
        if b.ndim != 2 or b.shape[1] != self.bits:
            raise ContractError(f"expected n×{self.bits} bits, got shape {b.shape}")
        if not np.all((b == 0) | (b == 1)):
            raise DomainError("bits must be 0 or 1")
        return self._centre(b.astype(np.float64) @ self._weights)

    def decode_probabilistic(self, probs, mode="expected"):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.shape[0] != self.bits:
            raise ContractError(f"expected {self.bits} bit probabilities, got shape {p.shape}")
        return float(self.decode_probabilistic_batch(p[None, :], mode)[0])

    def decode_probabilistic_batch(self, probs, mode="expected"):
        """
        threshold: bit = 1 iff p >= 0.5 (ties go to 1), then bin-centre decode.
        expected: bits treated as independent, E[q] = sum_i p_i 2^(B-1-i).
        """
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != self.bits:
            raise ContractError(f"expected n×{self.bits} probabilities, got shape {p.shape}")
        if not np.all((p >= 0.0) & (p <= 1.0)):
            raise DomainError("bit probabilities must lie in [0, 1]")
        if mode == "threshold":
            return self._centre((p >= 0.5).astype(np.float64) @ self._weights)
        if mode == "expected":
            return self._centre(p @ self._weights)
        raise ParameterError(f"unknown decode mode '{mode}'. Available: {list(DECODE_MODES)}")


def encode(codec, value):
    return codec.encode(value)


def decode(codec, bits):
    return codec.decode(bits)


def decode_probabilistic(codec, probs, mode="expected"):
    return codec.decode_probabilistic(probs, mode)
