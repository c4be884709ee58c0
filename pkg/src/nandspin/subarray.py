"""Subarray model: a grid of NAND-SPIN devices with sensing peripherals.

Geometry: device_rows x columns strips, each strip holding group_size MTJs
stacked along the row axis, so bit-row b of the array lives in device row
b // group_size at MTJ index b % group_size.  The default 32 x 128 grid
with groups of 8 exposes 256 bit-rows by 128 columns.

Storage convention: a set bit means the MTJ is parallel and stores data 1;
erased strips read all zero.  Writes are group-granular: one erase resets
all group_size bit-rows of a device row (every column), after which
program steps set the 1 bits row by row.  Programming a bit that is
already parallel without an intervening erase is rejected in strict mode.

Peripherals: a weight buffer whose rows can drive the sense amplifiers'
second operand (row-parallel AND), and one saturating bit-counter per
column.  Counter overflow is a hard error, never a wrap.

Rows and counters are held as Python ints (bit c = column c); the public
operations accept and return numpy 0/1 vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .bitplane import bits_from_mask, mask_from_bits
from .costmodel import CostLedger, CostParams
from .device import MtjState, NandSpinDevice
from .errors import (
    BufferIndexOutOfRange,
    BufferRowEmpty,
    CounterOverflow,
    GeometryMismatch,
    ProgramWithoutErase,
    RowOutOfRange,
)


@dataclass(frozen=True)
class SubarrayGeometry:
    device_rows: int = 32
    columns: int = 128
    group_size: int = 8

    def __post_init__(self):
        for name in ("device_rows", "columns", "group_size"):
            if getattr(self, name) < 1:
                raise GeometryMismatch(f"{name} must be positive")

    @property
    def bit_rows(self) -> int:
        return self.device_rows * self.group_size


@dataclass(frozen=True)
class BitCounter:
    """Inspection snapshot of one column counter."""

    value: int
    width: int


class BufferRows:
    """Small row buffer feeding the sense amplifiers' operand inputs."""

    def __init__(self, capacity: int, columns: int):
        if capacity < 1:
            raise GeometryMismatch("buffer capacity must be positive")
        self.capacity = capacity
        self.columns = columns
        self._rows: List[Optional[int]] = [None] * capacity

    def _check(self, index: int) -> None:
        if not 0 <= index < self.capacity:
            raise BufferIndexOutOfRange(f"buffer row {index} outside capacity {self.capacity}")

    def store(self, index: int, mask: int) -> None:
        self._check(index)
        self._rows[index] = mask & ((1 << self.columns) - 1)

    def mask(self, index: int) -> int:
        self._check(index)
        row = self._rows[index]
        if row is None:
            raise BufferRowEmpty(f"buffer row {index} has not been loaded")
        return row

    def clear(self) -> None:
        self._rows = [None] * self.capacity


class Subarray:
    """One cost-annotated subarray with buffer and column counters."""

    def __init__(
        self,
        geometry: Optional[SubarrayGeometry] = None,
        *,
        ledger: Optional[CostLedger] = None,
        params: Optional[CostParams] = None,
        buffer_capacity: int = 4,
        counter_width: int = 16,
        strict_program: bool = True,
        subarray_id: int = 0,
    ):
        self.geometry = geometry or SubarrayGeometry()
        if counter_width < 1:
            raise GeometryMismatch("counter width must be positive")
        self.counter_width = counter_width
        self.strict_program = strict_program
        self.subarray_id = subarray_id
        self.lane = f"sub{subarray_id}"
        self.ledger = ledger if ledger is not None else CostLedger(params, self.geometry.group_size)
        self.buffer = BufferRows(buffer_capacity, self.geometry.columns)
        self._rows: List[int] = [0] * self.geometry.bit_rows
        self._cplanes: List[int] = [0] * counter_width
        self._col_mask = (1 << self.geometry.columns) - 1

    # -- address checks --------------------------------------------------------

    def _check_bit_row(self, bit_row: int) -> None:
        if not 0 <= bit_row < self.geometry.bit_rows:
            raise RowOutOfRange(f"bit row {bit_row} outside 0..{self.geometry.bit_rows - 1}")

    def _check_device_row(self, device_row: int) -> None:
        if not 0 <= device_row < self.geometry.device_rows:
            raise GeometryMismatch(
                f"device row {device_row} outside 0..{self.geometry.device_rows - 1}"
            )

    # -- mask-level operations (interpreter fast path) ---------------------------

    def erase_group_m(self, device_row: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> None:
        self._check_device_row(device_row)
        g = self.geometry.group_size
        base = device_row * g
        for r in range(base, base + g):
            self._rows[r] = 0
        ledger.charge(
            "erase",
            category=category,
            lane=lane or self.lane,
            energy_mult=self.geometry.columns,
            latency_mult=g,
        )

    def program_row_m(self, bit_row: int, mask: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> None:
        self._check_bit_row(bit_row)
        mask &= self._col_mask
        if self.strict_program and (self._rows[bit_row] & mask):
            raise ProgramWithoutErase(
                f"bit row {bit_row} holds programmed bits in the target columns"
            )
        self._rows[bit_row] |= mask
        ledger.charge(
            "program",
            category=category,
            lane=lane or self.lane,
            energy_mult=mask.bit_count(),
            latency_mult=1,
        )

    def read_m(self, bit_row: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> int:
        self._check_bit_row(bit_row)
        ledger.charge("read", category=category, lane=lane or self.lane)
        return self._rows[bit_row]

    def and_m(self, bit_row: int, operand_mask: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> int:
        self._check_bit_row(bit_row)
        ledger.charge("and", category=category, lane=lane or self.lane)
        return self._rows[bit_row] & operand_mask & self._col_mask

    def peek_row(self, bit_row: int) -> int:
        """Stored mask without sensing (no cost); debug/verification only."""
        self._check_bit_row(bit_row)
        return self._rows[bit_row]

    def acc_m(self, mask: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> None:
        carry = mask & self._col_mask
        planes = self._cplanes
        for i in range(self.counter_width):
            if not carry:
                break
            plane = planes[i]
            planes[i] = plane ^ carry
            carry = plane & carry
        if carry:
            raise CounterOverflow(
                f"column counters exceeded {self.counter_width} bits in subarray {self.subarray_id}"
            )
        ledger.charge("counter", category=category, lane=lane or self.lane)

    def cshift_m(self, ledger: CostLedger, category: str, lane: Optional[str] = None) -> int:
        lsb = self._cplanes[0]
        del self._cplanes[0]
        self._cplanes.append(0)
        ledger.charge("counter", category=category, lane=lane or self.lane)
        return lsb

    def creset_m(self, ledger: CostLedger, category: str, lane: Optional[str] = None) -> None:
        self._cplanes = [0] * self.counter_width
        ledger.charge("counter", category=category, lane=lane or self.lane)

    def bufload_m(self, index: int, mask: int, ledger: CostLedger, category: str, lane: Optional[str] = None) -> None:
        self.buffer.store(index, mask)
        ledger.charge("buffer_write", category=category, lane=lane or self.lane)

    def counters_zero(self) -> bool:
        return not any(self._cplanes)

    # -- public contract operations (numpy boundary) ------------------------------

    def write_row_group(self, device_row: int, data, *, category: str = "load") -> None:
        """Erase one device row, then program its group_size bit-rows.

        data is a (group_size, columns) 0/1 matrix.  Every program step is
        issued (a zero row still costs a pulse slot); program energy scales
        with the number of 1 bits actually switched.
        """
        arr = np.asarray(data, dtype=np.uint8)
        g = self.geometry.group_size
        if arr.shape != (g, self.geometry.columns):
            raise GeometryMismatch(
                f"expected data of shape ({g}, {self.geometry.columns}), got {arr.shape}"
            )
        self._check_device_row(device_row)
        self.erase_group_m(device_row, self.ledger, category)
        base = device_row * g
        for i in range(g):
            self.program_row_m(base + i, mask_from_bits(arr[i]), self.ledger, category)

    def read_bit_row(self, bit_row: int, *, category: str = "load") -> np.ndarray:
        return bits_from_mask(self.read_m(bit_row, self.ledger, category), self.geometry.columns)

    def and_bit_row(self, bit_row: int, buffer_row: int, *, category: str = "load") -> np.ndarray:
        operand = self.buffer.mask(buffer_row)
        return bits_from_mask(
            self.and_m(bit_row, operand, self.ledger, category), self.geometry.columns
        )

    def load_buffer_row(self, index: int, bits, *, category: str = "load") -> None:
        self.bufload_m(index, mask_from_bits(np.asarray(bits, dtype=np.uint8)), self.ledger, category)

    def accumulate_counters(self, bits, *, category: str = "load") -> None:
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.shape != (self.geometry.columns,):
            raise GeometryMismatch(f"expected {self.geometry.columns} bits, got shape {arr.shape}")
        self.acc_m(mask_from_bits(arr), self.ledger, category)

    def counter_lsb_and_shift(self, *, category: str = "load") -> np.ndarray:
        return bits_from_mask(self.cshift_m(self.ledger, category), self.geometry.columns)

    def reset_counters(self, *, category: str = "load") -> None:
        self.creset_m(self.ledger, category)

    @property
    def counters(self) -> List[BitCounter]:
        values = self.counter_values()
        return [BitCounter(value=int(v), width=self.counter_width) for v in values]

    def counter_values(self) -> np.ndarray:
        values = np.zeros(self.geometry.columns, dtype=np.int64)
        for i, plane in enumerate(self._cplanes):
            if plane:
                values |= bits_from_mask(plane, self.geometry.columns).astype(np.int64) << i
        return values

    def device_at(self, device_row: int, column: int) -> NandSpinDevice:
        """Value snapshot of one strip, for inspection and cross-checks."""
        self._check_device_row(device_row)
        if not 0 <= column < self.geometry.columns:
            raise GeometryMismatch(f"column {column} outside 0..{self.geometry.columns - 1}")
        g = self.geometry.group_size
        base = device_row * g
        states = tuple(
            MtjState.P if (self._rows[base + i] >> column) & 1 else MtjState.AP for i in range(g)
        )
        return NandSpinDevice(mtjs=states)

    def dump_bits(self) -> str:
        """Text grid of 0/1, one line per bit-row, column 0 leftmost."""
        width = self.geometry.columns
        return "\n".join(
            "".join("1" if (row >> c) & 1 else "0" for c in range(width)) for row in self._rows
        )
