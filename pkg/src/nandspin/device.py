"""NAND-SPIN device model: one heavy-metal strip carrying a group of MTJs.

State encoding: each MTJ is either antiparallel (AP) or parallel (P).
AP stores data 0, P stores data 1; a write is therefore two-phase:
a bulk erase drives every MTJ of the strip to AP, after which the bits
that must hold 1 are programmed individually to P.

The signal-level interface mirrors the four supported control patterns:

  op        WE  ER  C     R        FU  REF   effect
  erase      1   1  all 0 all 0     0   0    every MTJ -> AP
  program d  1   0  data  one-hot   0   0    selected MTJ -> P iff d = 1
  read       0   1  all 0 one-hot   1   1    OUT = stored bit
  and w      0   1  all 0 one-hot   w   1    OUT = w AND stored bit

Read and AND share one current path: the sense amplifier resolves 1
only when the reference-side operand (FU) is high and the selected MTJ
is parallel.  With w = 1 the AND pattern is indistinguishable from a
read, and the decoder reports it as a read.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

from .errors import ProgramWithoutErase, RowOutOfRange, SignalDecodeError

DEFAULT_GROUP_SIZE = 8


class MtjState(Enum):
    AP = 0  # antiparallel, high resistance, data 0
    P = 1   # parallel, low resistance, data 1


@dataclass(frozen=True)
class NandSpinDevice:
    """Immutable snapshot of one strip; operations return new devices."""

    mtjs: Tuple[MtjState, ...]

    @classmethod
    def erased(cls, group_size: int = DEFAULT_GROUP_SIZE) -> "NandSpinDevice":
        if group_size < 1:
            raise ValueError("group size must be positive")
        return cls(mtjs=(MtjState.AP,) * group_size)

    @property
    def group_size(self) -> int:
        return len(self.mtjs)

    def data_bits(self) -> Tuple[int, ...]:
        return tuple(1 if s is MtjState.P else 0 for s in self.mtjs)

    def _check_index(self, index: int) -> None:
        if not 0 <= index < len(self.mtjs):
            raise RowOutOfRange(f"MTJ index {index} outside group of {len(self.mtjs)}")


def erase(device: NandSpinDevice) -> NandSpinDevice:
    """Bulk SOT erase: every MTJ of the strip returns to AP."""
    return NandSpinDevice(mtjs=(MtjState.AP,) * device.group_size)


def program(device: NandSpinDevice, index: int, d: int, strict: bool = True) -> NandSpinDevice:
    """STT program of one MTJ: d = 1 switches AP -> P, d = 0 leaves it alone.

    In strict mode programming a 1 into an MTJ that is already parallel is
    rejected: the architecture only programs freshly erased bits, so such a
    request indicates a scheduling bug rather than a legal state change.
    """
    device._check_index(index)
    if d not in (0, 1):
        raise ValueError(f"program data must be 0 or 1, got {d!r}")
    if d == 0:
        return device
    if device.mtjs[index] is MtjState.P:
        if strict:
            raise ProgramWithoutErase(
                f"MTJ {index} is already parallel; erase before reprogramming"
            )
        return device
    mtjs = list(device.mtjs)
    mtjs[index] = MtjState.P
    return NandSpinDevice(mtjs=tuple(mtjs))


def read(device: NandSpinDevice, index: int) -> int:
    """Sense the stored bit: 1 iff the selected MTJ is parallel."""
    device._check_index(index)
    return 1 if device.mtjs[index] is MtjState.P else 0


def and_sense(device: NandSpinDevice, index: int, w: int) -> int:
    """In-place AND: the operand w drives FU, the stored bit the MTJ side."""
    if w not in (0, 1):
        raise ValueError(f"AND operand must be 0 or 1, got {w!r}")
    return w & read(device, index)


def sense_output(fu: int, state: MtjState) -> int:
    """Sense-amplifier decision: output 1 only for FU = 1 over a parallel MTJ."""
    return 1 if (fu == 1 and state is MtjState.P) else 0


# --- control-signal decoding -------------------------------------------------


@dataclass(frozen=True)
class ControlSignals:
    """One cycle of control inputs.

    c carries per-column data (program) and r selects one bit-row; their
    widths are the column count and the group size of the addressed slice.
    """

    we: int
    er: int
    c: Tuple[int, ...]
    r: Tuple[int, ...]
    fu: int
    ref: int


@dataclass(frozen=True)
class EraseOp:
    pass


@dataclass(frozen=True)
class ProgramOp:
    row: int
    data: Tuple[int, ...]


@dataclass(frozen=True)
class ReadOp:
    row: int


@dataclass(frozen=True)
class AndOp:
    row: int
    w: int


DecodedOp = Union[EraseOp, ProgramOp, ReadOp, AndOp]


def _one_hot(bits: Tuple[int, ...]) -> Optional[int]:
    hot = [i for i, b in enumerate(bits) if b]
    return hot[0] if len(hot) == 1 else None


def decode_signals(signals: ControlSignals) -> DecodedOp:
    """Match a signal combination against the four supported patterns.

    Exactly one pattern may match; anything else raises SignalDecodeError.
    The read pattern equals AND with w = 1, so FU = 1 decodes as a read and
    FU = 0 with read-shaped selects decodes as AND with operand 0.
    """
    for bit, name in ((signals.we, "WE"), (signals.er, "ER"), (signals.fu, "FU"), (signals.ref, "REF")):
        if bit not in (0, 1):
            raise SignalDecodeError(f"{name} must be 0 or 1, got {bit!r}")
    if any(b not in (0, 1) for b in signals.c) or any(b not in (0, 1) for b in signals.r):
        raise SignalDecodeError("C and R lines must be 0/1 vectors")

    c_all_zero = not any(signals.c)
    row = _one_hot(signals.r)

    if signals.we == 1 and signals.er == 1:
        if c_all_zero and not any(signals.r) and signals.fu == 0 and signals.ref == 0:
            return EraseOp()
        raise SignalDecodeError("WE=ER=1 only supports the erase pattern")
    if signals.we == 1 and signals.er == 0:
        if row is not None and signals.fu == 0 and signals.ref == 0:
            return ProgramOp(row=row, data=tuple(signals.c))
        raise SignalDecodeError("malformed program pattern")
    if signals.we == 0 and signals.er == 1:
        if row is not None and c_all_zero and signals.ref == 1:
            return ReadOp(row=row) if signals.fu == 1 else AndOp(row=row, w=0)
        raise SignalDecodeError("malformed read/AND pattern")
    raise SignalDecodeError(f"unsupported WE/ER combination ({signals.we}, {signals.er})")


def apply_signals(
    device: NandSpinDevice, signals: ControlSignals, strict: bool = True
) -> Tuple[NandSpinDevice, Optional[int]]:
    """Apply a decoded signal pattern to a single device column.

    For program the data line of column 0 is taken; returns the next device
    state and the sense output (None for operations that do not sense).
    """
    op = decode_signals(signals)
    if isinstance(op, EraseOp):
        return erase(device), None
    if isinstance(op, ProgramOp):
        d = op.data[0] if op.data else 0
        return program(device, op.row, d, strict=strict), None
    if isinstance(op, ReadOp):
        return device, read(device, op.row)
    return device, and_sense(device, op.row, op.w)
