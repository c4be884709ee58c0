"""Fixed-point tensors, bit-plane decomposition, and row-mask helpers.

Bit-planes are indexed LSB-first: plane 0 carries the 2^0 bits.  Row
vectors travel through the array model as Python ints, bit c of the int
being column c; numpy arrays appear only at the tensor boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .errors import DimMismatch

UNSIGNED = "unsigned"
TWOS_COMPLEMENT = "twos_complement"


def mask_from_bits(bits: Union[np.ndarray, Sequence[int]]) -> int:
    arr = np.ascontiguousarray(bits, dtype=np.uint8)
    if arr.ndim != 1:
        raise DimMismatch("bit vector must be one-dimensional")
    if arr.size == 0:
        return 0
    if not np.all(arr <= 1):
        raise ValueError("bit vector entries must be 0 or 1")
    packed = np.packbits(arr, bitorder="little").tobytes()
    return int.from_bytes(packed, "little")


def bits_from_mask(mask: int, width: int) -> np.ndarray:
    if mask < 0:
        raise ValueError("mask must be nonnegative")
    nbytes = (width + 7) // 8
    raw = np.frombuffer(mask.to_bytes(nbytes, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:width].copy()


@dataclass(frozen=True)
class FixedPointTensor:
    """Integer tensor with an explicit width and signedness."""

    values: np.ndarray
    bit_width: int
    signedness: str = UNSIGNED

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        object.__setattr__(self, "values", values)
        if self.bit_width < 1:
            raise DimMismatch("bit width must be positive")
        if self.signedness not in (UNSIGNED, TWOS_COMPLEMENT):
            raise ValueError(f"unknown signedness {self.signedness!r}")
        if self.signedness == UNSIGNED:
            lo, hi = 0, (1 << self.bit_width) - 1
        else:
            lo, hi = -(1 << (self.bit_width - 1)), (1 << (self.bit_width - 1)) - 1
        if values.size and (values.min() < lo or values.max() > hi):
            raise DimMismatch(
                f"values outside the representable range [{lo}, {hi}] "
                f"for {self.signedness} width {self.bit_width}"
            )


@dataclass(frozen=True)
class BitPlaneTensor:
    """One significance slice of a fixed-point tensor (plane 0 = 2^0)."""

    plane_index: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", bits)
        if self.plane_index < 0:
            raise DimMismatch("plane index must be nonnegative")
        if bits.size and bits.max() > 1:
            raise ValueError("plane entries must be 0 or 1")


def decompose(tensor: FixedPointTensor) -> List[BitPlaneTensor]:
    """Split into bit planes; signed values contribute their k-bit pattern."""
    pattern = tensor.values & ((1 << tensor.bit_width) - 1)
    return [
        BitPlaneTensor(plane_index=k, bits=((pattern >> k) & 1).astype(np.uint8))
        for k in range(tensor.bit_width)
    ]


def reconstruct(
    planes: Sequence[BitPlaneTensor], bit_width: int, signedness: str = UNSIGNED
) -> FixedPointTensor:
    if len(planes) != bit_width:
        raise DimMismatch(f"expected {bit_width} planes, got {len(planes)}")
    shape = planes[0].bits.shape
    acc = np.zeros(shape, dtype=np.int64)
    for plane in planes:
        if plane.bits.shape != shape:
            raise DimMismatch("plane shapes differ")
        if plane.plane_index >= bit_width:
            raise DimMismatch("plane index exceeds bit width")
        acc |= plane.bits.astype(np.int64) << plane.plane_index
    if signedness == TWOS_COMPLEMENT:
        sign = 1 << (bit_width - 1)
        acc = np.where(acc >= sign, acc - (1 << bit_width), acc)
    return FixedPointTensor(values=acc, bit_width=bit_width, signedness=signedness)
