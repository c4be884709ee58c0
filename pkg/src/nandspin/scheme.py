"""Fixed-point constant derivation for the layer post-processing stages.

A convolution or fully-connected layer produces unsigned integer window
sums.  The stages that follow (normalization scale/offset, rectification,
output quantization) are real-valued transforms; both the in-memory
execution and the pure-integer reference evaluate them through one shared
integerized form,

    p  = s1[c] * sum + o1[c]           (two's complement, t2 bits)
    r  = max(0, p)
    r' = r >> shift_r                  (drop surplus fraction bits)
    n  = r' * c1 + c0                  (two's complement, t3 bits)
    q  = min(max(0, n) >> f3, 2^k - 1)

whose constants this module derives.  The constants are shared; the two
arithmetic paths are not.  Fraction widths are sized from the value bounds
so the three rounding points (s1/o1, the r truncation, c1/c0) together
stay strictly inside one step of the output grid; intermediate values can
exceed 64 bits, so the reference evaluates with plain Python integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DegenerateRange


def round_half_up(x: float) -> int:
    """Round to nearest integer, ties toward positive infinity."""
    return int(math.floor(x + 0.5))


def _signed_width(lo: int, hi: int) -> int:
    """Smallest two's complement width holding every value in [lo, hi]."""
    width = 1
    while hi > (1 << (width - 1)) - 1 or lo < -(1 << (width - 1)):
        width += 1
    return width


def reciprocal_constants(divisor: int, numer_max: int) -> Tuple[int, int]:
    """Multiplier and fraction width for exact round-half-up division.

    For integers 0 <= x <= numer_max,
        (x * recip + 2^(frac-1)) >> frac == round_half_up(x / divisor).
    Exactness needs 2^frac >= 2 * divisor * numer_max; see the test suite
    for the exhaustive check.
    """
    if divisor <= 0:
        raise DegenerateRange(f"divisor must be positive, got {divisor}")
    frac = max(1, math.ceil(math.log2(max(2, 2 * divisor * max(1, numer_max)))))
    recip = -(-(1 << frac) // divisor)  # ceiling division
    return recip, frac


def quantize_real(values, qmin: float, qmax: float, k: int):
    """Map values in [qmin, qmax] onto the k-bit grid, round half up."""
    if not qmax > qmin:
        raise DegenerateRange(f"quantization range [{qmin}, {qmax}] is empty")
    if not 1 <= k <= 16:
        raise DegenerateRange(f"quantization width {k} out of range")
    levels = (1 << k) - 1
    scaled = (np.asarray(values, dtype=np.float64) - qmin) * (levels / (qmax - qmin))
    return np.clip(np.floor(scaled + 0.5), 0, levels).astype(np.int64)


def batch_norm_real(values, mu, sigma, gamma, beta, eps: float):
    """Normalize to zero mean / unit deviation, then scale and shift."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma * sigma + eps <= 0):
        raise DegenerateRange("sigma^2 + eps must be positive")
    inv = np.asarray(gamma, dtype=np.float64) / np.sqrt(sigma * sigma + eps)
    return (np.asarray(values, dtype=np.float64) - mu) * inv + beta


@dataclass(frozen=True)
class ConvStage:
    """Integer constants for one layer's post-processing chain.

    s1/o1 are per output channel; widths are maxima over channels so every
    channel runs through one row layout.
    """

    sum_bits: int
    k_out: int
    f2: int
    s1: Tuple[int, ...]
    o1: Tuple[int, ...]
    mb1: int
    t2: int
    shift_r: int
    f3: int
    c1: int
    c0: int
    mb2: int
    t3: int

    @property
    def prod1_bits(self) -> int:
        return self.sum_bits + self.mb1

    @property
    def r_bits(self) -> int:
        """Rows of the truncated rectified value feeding the second scale."""
        return max(1, self.t2 - 1 - self.shift_r)

    @property
    def prod2_bits(self) -> int:
        return self.r_bits + self.mb2

    @property
    def q_rows(self) -> range:
        """Rows of the clamped-low stage value holding the output bits."""
        return range(self.f3, self.f3 + self.k_out)

    @property
    def overflow_rows(self) -> range:
        """Rows above the output bits; any set bit means clamp high."""
        return range(self.f3 + self.k_out, self.t3 - 1)


def derive_conv_stage(
    sum_max: int,
    k_out: int,
    qmin: float,
    qmax: float,
    mu: Sequence[float],
    sigma: Sequence[float],
    gamma: Sequence[float],
    beta: Sequence[float],
    eps: float,
) -> ConvStage:
    """Derive the shared constants for one conv/fc layer.

    sum_max bounds the raw window sums; mu/sigma/gamma/beta are per output
    channel.  The error budget splits 0.3 output steps to the first-stage
    rounding, 0.3 to the truncation, 0.3 to the second-stage rounding, so
    the chain stays under one step in total.
    """
    if not qmax > qmin:
        raise DegenerateRange(f"quantization range [{qmin}, {qmax}] is empty")
    if not 1 <= k_out <= 8:
        raise DegenerateRange(f"output width {k_out} out of range")
    d = float(qmax - qmin)
    levels = (1 << k_out) - 1
    mu, sigma, gamma, beta = (
        np.asarray(a, dtype=np.float64) for a in (mu, sigma, gamma, beta)
    )
    if np.any(sigma * sigma + eps <= 0):
        raise DegenerateRange("sigma^2 + eps must be positive")
    scale = gamma / np.sqrt(sigma * sigma + eps)
    offset = beta - mu * scale

    f2 = max(1, math.ceil(math.log2((sum_max + 2) * levels / (0.6 * d))))
    s1 = tuple(round_half_up(float(s) * (1 << f2)) for s in scale)
    o1 = tuple(round_half_up(float(o) * (1 << f2)) for o in offset)

    p_lo = min(min(o, s * sum_max + o) for s, o in zip(s1, o1))
    p_hi = max(max(o, s * sum_max + o) for s, o in zip(s1, o1))
    t2 = _signed_width(min(p_lo, 0), max(p_hi, 0)) + 1

    f2_keep = min(f2, max(1, math.ceil(math.log2(levels / (0.3 * d)))))
    shift_r = f2 - f2_keep
    rp_max = max(0, p_hi) >> shift_r

    f3 = max(1, math.ceil(math.log2((rp_max + 1) / 0.6)))
    c1 = round_half_up(levels * float(1 << f3) / (d * float(1 << f2_keep)))
    c0 = round_half_up(-qmin * levels * float(1 << f3) / d) + (1 << (f3 - 1))
    n_lo = min(c0, rp_max * c1 + c0)
    n_hi = max(c0, rp_max * c1 + c0)
    t3 = max(_signed_width(min(n_lo, 0), max(n_hi, 0)) + 1, f3 + k_out + 2)

    return ConvStage(
        sum_bits=max(1, sum_max.bit_length()),
        k_out=k_out,
        f2=f2,
        s1=s1,
        o1=o1,
        mb1=max(1, max(abs(s) for s in s1).bit_length()),
        t2=t2,
        shift_r=shift_r,
        f3=f3,
        c1=c1,
        c0=c0,
        mb2=max(1, c1.bit_length()),
        t3=t3,
    )


def apply_stage_reference(stage: ConvStage, channel: int, sums):
    """Evaluate the integerized chain directly (the reference path).

    Intermediates exceed 64 bits for wide layers, so this works in plain
    Python integers.
    """
    levels = (1 << stage.k_out) - 1
    out = []
    for s in np.asarray(sums).reshape(-1).tolist():
        p = stage.s1[channel] * int(s) + stage.o1[channel]
        rp = max(0, p) >> stage.shift_r
        n = max(0, rp * stage.c1 + stage.c0)
        out.append(min(n >> stage.f3, levels))
    return np.array(out, dtype=np.int64).reshape(np.asarray(sums).shape)
