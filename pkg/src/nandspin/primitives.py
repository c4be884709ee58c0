"""In-memory computing primitives built as micro-op schedules.

Four operations cover the acceleration mode: bitwise convolution,
bit-serial addition, bit-serial multiplication, and bit-serial
comparison.  Each is a pure schedule builder: given a layout it returns
the ordered micro-op list, and the interpreter replays it against real
subarray state.  Values live one element per column; the bit planes of
an element occupy bit rows listed LSB first.

Additions stream sum bits out of the column counters: at each bit
position the operands' planes are sensed-and-accumulated, the counter
LSB plane is written back as the sum bit, and the halved counters carry
into the next position.  Constant addends are injected by complement
reads of a permanently erased row (one +1 per set constant bit), which
is why several builders take a ``blank_row``.

All result writes go through column-routed programs restricted to the
layout's active columns, so schedules never disturb neighbours sharing
the same physical rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .bitplane import BitPlaneTensor, FixedPointTensor, bits_from_mask
from .costmodel import CostLedger, CostParams
from .errors import (
    DimMismatch,
    InsufficientResultRows,
    LayoutError,
    StrideInvalid,
)
from .schedule import Interpreter, MicroOp, TraceRecorder
from .subarray import Subarray, SubarrayGeometry


def device_group(row: int, group_size: int) -> int:
    return row // group_size


def groups_covering(rows: Sequence[int], group_size: int) -> List[int]:
    return sorted({device_group(r, group_size) for r in rows})


class Term(NamedTuple):
    """One addend: bit rows (LSB first), scaled by 2^shift.

    ``invert`` complements the listed planes only; a full two's-complement
    negation additionally needs the high filler ones and the +1 folded
    into the builder's ``const`` argument by the caller.
    """

    rows: Tuple[int, ...]
    shift: int = 0
    invert: bool = False


@dataclass(frozen=True)
class ColumnVectorLayout:
    """Where a batch of column vectors lives inside one subarray.

    operand_rows[i] lists operand i's bit rows LSB first.  result_rows
    receive sums/products; tag_row and result_row are the comparison
    bookkeeping rows.  The comparison erases the device group holding
    tag_row/result_row every bit step, so that group must contain no
    other layout rows.
    """

    subarray_id: int
    col_start: int
    n_cols: int
    operand_rows: Tuple[Tuple[int, ...], ...] = ()
    result_rows: Tuple[int, ...] = ()
    tag_row: Optional[int] = None
    result_row: Optional[int] = None

    def active_columns(self) -> range:
        return range(self.col_start, self.col_start + self.n_cols)

    def identity_pairs(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((c, c) for c in self.active_columns())

    def active_mask(self) -> int:
        return ((1 << self.n_cols) - 1) << self.col_start

    def all_rows(self) -> List[int]:
        rows = [r for op in self.operand_rows for r in op]
        rows.extend(self.result_rows)
        if self.tag_row is not None:
            rows.append(self.tag_row)
        if self.result_row is not None:
            rows.append(self.result_row)
        return rows

    def validate(self, geometry: SubarrayGeometry) -> None:
        if self.n_cols < 1:
            raise LayoutError("layout needs at least one column")
        if self.col_start < 0 or self.col_start + self.n_cols > geometry.columns:
            raise LayoutError("column range outside the subarray")
        rows = self.all_rows()
        for r in rows:
            if not 0 <= r < geometry.bit_rows:
                raise LayoutError(f"bit row {r} outside the subarray")
        if len(set(rows)) != len(rows):
            raise LayoutError("layout rows overlap")
        book = [r for r in (self.tag_row, self.result_row) if r is not None]
        if book:
            book_groups = {device_group(r, geometry.group_size) for r in book}
            others = [r for r in rows if r not in book]
            for r in others:
                if device_group(r, geometry.group_size) in book_groups:
                    raise LayoutError(
                        "tag/result group must hold no other layout rows"
                    )


# -- schedule builders ----------------------------------------------------------


def build_store(
    layout: ColumnVectorLayout, values, geometry: SubarrayGeometry
) -> List[MicroOp]:
    """Erase the operand groups, then program each operand's bit planes.

    values[i][c] is operand i's integer in column c of the active range.
    Any other layout rows sharing those device groups are wiped too;
    results are always written after operands, so this only constrains
    row allocation, not call order.
    """
    values = np.asarray(values, dtype=np.int64)
    if values.ndim != 2 or values.shape[0] != len(layout.operand_rows):
        raise DimMismatch("need one value row per operand")
    if values.shape[1] != layout.n_cols:
        raise DimMismatch("need one value per active column")
    sid = layout.subarray_id
    for i, rows in enumerate(layout.operand_rows):
        width = len(rows)
        if values[i].min() < 0 or (values[i].max() >> width):
            raise DimMismatch(f"operand {i} values exceed {width} bits")
    op_rows = [r for rows in layout.operand_rows for r in rows]
    ops: List[MicroOp] = [
        ("erase", sid, grp) for grp in groups_covering(op_rows, geometry.group_size)
    ]
    for i, rows in enumerate(layout.operand_rows):
        for b, row in enumerate(rows):
            mask = 0
            col_bits = (values[i] >> b) & 1
            for c in range(layout.n_cols):
                if col_bits[c]:
                    mask |= 1 << (layout.col_start + c)
            ops.append(("program", sid, row, mask))
    return ops


def build_erase(sid: int, geometry: SubarrayGeometry, rows: Sequence[int]) -> List[MicroOp]:
    return [("erase", sid, g) for g in groups_covering(rows, geometry.group_size)]


def build_add(
    layout: ColumnVectorLayout,
    terms: Sequence[Term],
    *,
    out_rows: Optional[Sequence[int]] = None,
    n_bits: Optional[int] = None,
    const: int = 0,
    blank_row: Optional[int] = None,
    carry_out: bool = False,
) -> List[MicroOp]:
    """Sum the terms (plus a constant) per column into out_rows, LSB first.

    Streams n_bits sum bits; the counter halving after each write-back
    carries into the next position, and whatever remains above the top
    bit is discarded by the closing counter reset (modulo-2^n_bits
    arithmetic).  With carry_out one extra bit is written instead.
    """
    sid = layout.subarray_id
    out = tuple(out_rows) if out_rows is not None else layout.result_rows
    if n_bits is None:
        n_bits = len(out)
    needed = n_bits + (1 if carry_out else 0)
    if needed > len(out):
        raise InsufficientResultRows(
            f"need {needed} result rows, layout reserves {len(out)}"
        )
    if n_bits < 1:
        raise InsufficientResultRows("need at least one result bit")
    const &= (1 << needed) - 1
    if const and blank_row is None:
        raise LayoutError("constant addend needs a blank_row to sense ones from")
    pairs = layout.identity_pairs()
    ops: List[MicroOp] = []
    for b in range(n_bits):
        if (const >> b) & 1:
            ops.append(("read", sid, blank_row, True, True))
        for term in terms:
            plane = b - term.shift
            if 0 <= plane < len(term.rows):
                ops.append(("read", sid, term.rows[plane], term.invert, True))
        ops.append(("cshift", sid))
        ops.append(("program_gather", sid, out[b], pairs))
    if carry_out:
        if (const >> n_bits) & 1:
            ops.append(("read", sid, blank_row, True, True))
        ops.append(("cshift", sid))
        ops.append(("program_gather", sid, out[n_bits], pairs))
    ops.append(("creset", sid))
    return ops


def build_mul(
    layout: ColumnVectorLayout,
    multiplier: int,
    multiplier_bits: int,
    *,
    a_index: int = 0,
    out_rows: Optional[Sequence[int]] = None,
    mult_buf: int = 0,
) -> List[MicroOp]:
    """Multiply each column by one shared constant, LSB-first product stream.

    Every multiplier bit is staged through a buffer row as an all-ones
    or all-zeros operand and ANDed against the multiplicand planes, so
    zero bits cost the same as one bits; partial products of equal
    significance accumulate in the counters and the halving rule carries
    between product bits.
    """
    if multiplier_bits < 1:
        raise DimMismatch("multiplier needs at least one bit")
    if multiplier < 0 or (multiplier >> multiplier_bits):
        raise DimMismatch(
            f"multiplier {multiplier} does not fit {multiplier_bits} bits"
        )
    sid = layout.subarray_id
    a_rows = layout.operand_rows[a_index]
    ka = len(a_rows)
    out = tuple(out_rows) if out_rows is not None else layout.result_rows
    n_bits = ka + multiplier_bits
    if n_bits > len(out):
        raise InsufficientResultRows(
            f"product needs {n_bits} result rows, layout reserves {len(out)}"
        )
    pairs = layout.identity_pairs()
    ones = layout.active_mask()
    ops: List[MicroOp] = []
    loaded: Optional[int] = None
    for p in range(n_bits):
        for j in range(max(0, p - ka + 1), min(multiplier_bits - 1, p) + 1):
            mask = ones if (multiplier >> j) & 1 else 0
            if mask != loaded:
                ops.append(("bufload", sid, mult_buf, mask))
                loaded = mask
            ops.append(("and", sid, a_rows[p - j], mult_buf, False, True))
        ops.append(("cshift", sid))
        ops.append(("program_gather", sid, out[p], pairs))
    ops.append(("creset", sid))
    return ops


def build_compare(
    layout: ColumnVectorLayout,
    geometry: SubarrayGeometry,
    *,
    a_index: int = 0,
    b_index: int = 1,
    buf_base: int = 0,
) -> List[MicroOp]:
    """Per-column strict A > B into result_row, walking bits MSB to LSB.

    Tag marks columns already decided (it starts 0 with everything
    open); the first differing bit decides a column and later bits
    leave it alone.  Equal columns never flag a difference and Result
    stays 0.  Tag and Result are erased and reprogrammed from buffers
    each step, which is why their device group is exclusive.
    """
    sid = layout.subarray_id
    a_rows = layout.operand_rows[a_index]
    b_rows = layout.operand_rows[b_index]
    if len(a_rows) != len(b_rows):
        raise DimMismatch("comparison operands must have equal widths")
    if layout.tag_row is None or layout.result_row is None:
        raise LayoutError("comparison needs tag_row and result_row")
    tag, res = layout.tag_row, layout.result_row
    g = device_group(tag, geometry.group_size)
    if device_group(res, geometry.group_size) != g:
        raise LayoutError("tag_row and result_row must share a device group")
    buf_und, buf_diff, buf_tag = buf_base, buf_base + 1, buf_base + 2
    ops: List[MicroOp] = [("erase", sid, g)]
    for b in reversed(range(len(a_rows))):
        ops.extend(
            [
                ("read", sid, tag, True, False),
                ("bufload_latch", sid, buf_und, False),
                ("and", sid, a_rows[b], buf_und, False, True),
                ("and", sid, b_rows[b], buf_und, False, True),
                ("cshift", sid),
                ("creset", sid),
                ("bufload_latch", sid, buf_diff, False),
                ("acc", sid),
                ("read", sid, tag, False, True),
                ("cshift", sid),
                ("bufload_latch", sid, buf_tag, False),
                ("and", sid, a_rows[b], buf_diff, False, True),
                ("read", sid, res, False, True),
                ("cshift", sid),
                ("bufload_latch", sid, buf_und, False),
                ("erase", sid, g),
                ("program_buf", sid, tag, buf_tag),
                ("program_buf", sid, res, buf_und),
            ]
        )
    return ops


def build_select(
    layout: ColumnVectorLayout,
    a_rows: Sequence[int],
    b_rows: Sequence[int],
    out_rows: Sequence[int],
    *,
    flag_row: Optional[int] = None,
    invert_flag: bool = False,
    buf_base: int = 0,
) -> List[MicroOp]:
    """Per column, copy A where the flag is set, else B (swapped if inverted)."""
    if not len(a_rows) == len(b_rows) == len(out_rows):
        raise DimMismatch("select needs equal-width a, b, and out rows")
    sid = layout.subarray_id
    flag = flag_row if flag_row is not None else layout.result_row
    if flag is None:
        raise LayoutError("select needs a flag row")
    pairs = layout.identity_pairs()
    buf_a, buf_b = buf_base, buf_base + 1
    ops: List[MicroOp] = [
        ("read", sid, flag, invert_flag, False),
        ("bufload_latch", sid, buf_a, False),
        ("read", sid, flag, not invert_flag, False),
        ("bufload_latch", sid, buf_b, False),
    ]
    for b in range(len(out_rows)):
        ops.append(("and", sid, a_rows[b], buf_a, False, True))
        ops.append(("and", sid, b_rows[b], buf_b, False, True))
        ops.append(("cshift", sid))
        ops.append(("program_gather", sid, out_rows[b], pairs))
    ops.append(("creset", sid))
    return ops


def build_shift_placement(
    sid: int, stream_masks: Sequence[int], target_rows: Sequence[int]
) -> List[MicroOp]:
    """Write an LSB-first bit stream to ascending rows; row i scales by 2^i."""
    if len(stream_masks) > len(target_rows):
        raise InsufficientResultRows(
            f"stream has {len(stream_masks)} bits, only "
            f"{len(target_rows)} target rows"
        )
    return [
        ("program", sid, target_rows[i], mask)
        for i, mask in enumerate(stream_masks)
    ]


# -- convolution engine ---------------------------------------------------------


def alignment_phases(kw: int, stride: int) -> int:
    """Windows of outputs spaced this many positions apart never overlap."""
    return -(-kw // stride)


def period_table(n_planes: int, phases: int, out_w: int) -> List[List[Tuple[int, int]]]:
    """Cross-writing schedule: periods of (plane, phase) counting rounds.

    Period p activates plane subarray n on phase (p - n) mod S when that
    lands below the phase count, S being max(phases, planes).  Distinct
    active planes always get distinct phases, so their bit-count
    deposits touch disjoint accumulation columns.
    """
    s = max(phases, n_planes)
    table = []
    for p in range(s):
        active = []
        for n in range(n_planes):
            a = (p - n) % s
            if a < phases and a < out_w:
                active.append((n, a))
        table.append(active)
    return table


def validate_period_table(
    table: List[List[Tuple[int, int]]], n_planes: int, phases: int, out_w: int
) -> None:
    """Structural cross-writing check: disjoint columns per period, full coverage."""
    seen: Dict[Tuple[int, int], int] = {}
    for p, active in enumerate(table):
        cols_used: set = set()
        for n, a in active:
            cols = set(range(a, out_w, phases))
            if cols & cols_used:
                raise LayoutError(
                    f"period {p}: accumulation columns collide between subarrays"
                )
            cols_used |= cols
            seen[(n, a)] = seen.get((n, a), 0) + 1
    expect = {
        (n, a)
        for n in range(n_planes)
        for a in range(min(phases, out_w))
    }
    if set(seen) != expect or any(v != 1 for v in seen.values()):
        raise LayoutError("period table must cover each (plane, phase) exactly once")


class ConvEngine:
    """Drives one convolution across plane subarrays and an accumulation subarray.

    Plane subarray n stores input bit-plane n (channel c, image row y at
    bit row c*in_h + y).  Weight tiles are broadcast to subarray buffers
    once.  For each output row, periods from the cross-writing table
    alternate counting rounds (parallel across plane subarrays) with
    deposit rounds (count bits routed into accumulation operand slots,
    serialized on the accumulation lane); folds then add the deposited
    operands into a ping-pong partial until the row's sums are complete.
    """

    def __init__(
        self,
        interp: Interpreter,
        ledger: CostLedger,
        plane_sids: Sequence[int],
        acc_sid: int,
        *,
        in_h: int,
        in_w: int,
        channels: int,
        kh: int,
        kw: int,
        stride: int,
        n_weight_planes: int,
        bus_beats: int = 1,
        reserve_rows: int = 0,
        trace: Optional[TraceRecorder] = None,
    ):
        if stride < 1:
            raise StrideInvalid(f"stride must be positive, got {stride}")
        if kh < 1 or kw < 1:
            raise DimMismatch("window must be at least 1x1")
        if kh > in_h or kw > in_w:
            raise DimMismatch(
                f"window {kh}x{kw} does not fit input {in_h}x{in_w}"
            )
        self.interp = interp
        self.ledger = ledger
        self.plane_sids = list(plane_sids)
        self.acc_sid = acc_sid
        self.acc = interp.subarrays[acc_sid]
        self.geometry = self.acc.geometry
        self.in_h, self.in_w, self.channels = in_h, in_w, channels
        self.kh, self.kw, self.stride = kh, kw, stride
        self.bus_beats = bus_beats
        self.trace = trace
        self.out_h = (in_h - kh) // stride + 1
        self.out_w = (in_w - kw) // stride + 1
        self.n_planes = len(plane_sids)
        self.phases = alignment_phases(kw, stride)
        self.table = period_table(self.n_planes, self.phases, self.out_w)
        validate_period_table(self.table, self.n_planes, self.phases, self.out_w)
        self.count_bits = max(1, (kh * channels).bit_length())
        if n_weight_planes < 1:
            raise DimMismatch("need at least one weight plane")
        self.n_weight_planes = n_weight_planes
        g = self.geometry
        if in_w > g.columns or self.out_w > g.columns:
            raise LayoutError("image wider than the subarray")
        if channels * in_h > g.bit_rows:
            raise LayoutError("input planes exceed subarray rows")
        self._plan_acc_rows(reserve_rows)
        per_period = min(self.n_planes, self.phases) * kw * self.count_bits
        if per_period > len(self._opd_rows):
            raise LayoutError("operand region too small for a single period")
        self._positions = [
            tuple(range(a, self.out_w, self.phases)) for a in range(self.phases)
        ]
        self._pairs = [
            [
                tuple((j * self.stride + t, j) for j in self._positions[a])
                for t in range(self.kw)
            ]
            for a in range(self.phases)
        ]
        self._operands: List[Term] = []
        self._grids: Dict[Tuple[int, int], List[Tuple[int, ...]]] = {}
        self._opd_used = 0
        self._partial: Optional[Tuple[int, ...]] = None
        self._cur = 0  # which partial region receives the next fold

    # -- accumulation row plan ---------------------------------------------------

    def _plan_acc_rows(self, reserve_rows: int) -> None:
        g = self.geometry
        gs = g.group_size
        total_groups = g.bit_rows // gs
        reserve_groups = -(-reserve_rows // gs) if reserve_rows else 0
        self.blank_row = 0  # group 0 stays erased for constant injection
        next_group = 1
        self.sum_bits = self._sum_width_bound()
        part_groups = -(-self.sum_bits // gs)
        self.partial_rows = []
        for _ in range(2):
            base = next_group * gs
            self.partial_rows.append(
                tuple(range(base, base + self.sum_bits))
            )
            next_group += part_groups
        opd_first = next_group
        opd_last = total_groups - reserve_groups
        if opd_last - opd_first < 1:
            raise LayoutError("accumulation subarray has no room for operand slots")
        self._opd_rows = list(range(opd_first * gs, opd_last * gs))
        self.reserved_rows = tuple(range(opd_last * gs, total_groups * gs))
        self._managed_groups = list(range(0, opd_last))

    def _sum_width_bound(self) -> int:
        # worst case: every activation and weight bit set at every tap
        v = (
            ((1 << self.n_planes) - 1)
            * ((1 << self.n_weight_planes) - 1)
            * self.kh
            * self.kw
            * self.channels
        )
        return max(1, v.bit_length())

    # -- data loading ------------------------------------------------------------

    def prepare(self) -> None:
        """Erase the managed accumulation groups (mode switch to compute)."""
        ops = [("erase", self.acc_sid, grp) for grp in self._managed_groups]
        self.interp.run(ops, self.ledger, "load", self.trace)
        self.ledger.barrier()

    def load_inputs(self, plane_bits: Sequence[np.ndarray]) -> None:
        """plane_bits[n][c][y][x] -> plane subarray n, bit row c*in_h + y."""
        if len(plane_bits) != self.n_planes:
            raise DimMismatch("one bit array per plane subarray required")
        for n, sid in enumerate(self.plane_sids):
            arr = np.asarray(plane_bits[n], dtype=np.uint8)
            if arr.shape != (self.channels, self.in_h, self.in_w):
                raise DimMismatch(
                    f"plane {n} must be {self.channels}x{self.in_h}x{self.in_w}"
                )
            gs = self.interp.subarrays[sid].geometry.group_size
            n_rows = self.channels * self.in_h
            ops: List[MicroOp] = [
                ("erase", sid, grp) for grp in groups_covering(range(n_rows), gs)
            ]
            for c in range(self.channels):
                for y in range(self.in_h):
                    mask = 0
                    row_bits = arr[c, y]
                    for x in range(self.in_w):
                        if row_bits[x]:
                            mask |= 1 << x
                    ops.append(("program", sid, c * self.in_h + y, mask))
            self.interp.run(ops, self.ledger, "load", self.trace)
        self.ledger.barrier()

    def load_weights(self, weight_bits: Sequence[np.ndarray]) -> None:
        """weight_bits[m][c][ky][kx] -> every plane subarray's buffer, once.

        Buffer row index packs (channel, kernel row, weight plane); the
        whole working set stays resident so no tile is ever rewritten
        during the layer.
        """
        m_planes = len(weight_bits)
        if m_planes != self.n_weight_planes:
            raise DimMismatch(
                f"expected {self.n_weight_planes} weight planes, got {m_planes}"
            )
        self._buf_map = {}
        tiles = []
        for m in range(m_planes):
            arr = np.asarray(weight_bits[m], dtype=np.uint8)
            if arr.shape != (self.channels, self.kh, self.kw):
                raise DimMismatch(
                    f"weight plane {m} must be {self.channels}x{self.kh}x{self.kw}"
                )
            for c in range(self.channels):
                for ky in range(self.kh):
                    mask = 0
                    for kx in range(self.kw):
                        if arr[c, ky, kx]:
                            mask |= 1 << kx
                    idx = len(tiles)
                    self._buf_map[(c, ky, m)] = idx
                    tiles.append(mask)
        for sid in self.plane_sids:
            cap = self.interp.subarrays[sid].buffer.capacity
            if len(tiles) > cap:
                raise LayoutError(
                    f"weight tiles ({len(tiles)}) exceed buffer capacity ({cap})"
                )
            ops = [("bufload", sid, i, mask) for i, mask in enumerate(tiles)]
            self.interp.run(ops, self.ledger, "load", self.trace)
        self.ledger.barrier()

    # -- per-output-row execution --------------------------------------------------

    def _alloc_grid(self, n: int, m: int) -> List[Tuple[int, ...]]:
        need = self.kw * self.count_bits
        if self._opd_used + need > len(self._opd_rows):
            raise LayoutError("operand slots exhausted; fold must run first")
        base = self._opd_used
        grid = []
        for t in range(self.kw):
            start = base + t * self.count_bits
            grid.append(tuple(self._opd_rows[start + r] for r in range(self.count_bits)))
        self._opd_used += need
        self._grids[(n, m)] = grid
        for t in range(self.kw):
            self._operands.append(Term(rows=grid[t], shift=n + m))
        return grid

    def _fold(self) -> None:
        """Add pending operands (and the standing partial) into the other region."""
        if not self._operands:
            return
        if self._partial is not None:
            target = self.partial_rows[self._cur ^ 1]
            terms = list(self._operands) + [Term(rows=self._partial)]
        else:
            target = self.partial_rows[self._cur]
            terms = list(self._operands)
        gs = self.geometry.group_size
        layout = ColumnVectorLayout(
            subarray_id=self.acc_sid, col_start=0, n_cols=self.out_w
        )
        ops: List[MicroOp] = [
            ("erase", self.acc_sid, grp) for grp in groups_covering(target, gs)
        ]
        ops += build_add(
            layout, terms, out_rows=target, n_bits=self.sum_bits
        )
        # consumed operand slots are erased for reuse
        used_rows = self._opd_rows[: self._opd_used]
        ops += [
            ("erase", self.acc_sid, grp) for grp in groups_covering(used_rows, gs)
        ]
        if self._partial is not None:
            ops += [
                ("erase", self.acc_sid, grp)
                for grp in groups_covering(self._partial, gs)
            ]
            self._cur ^= 1
        self.interp.run(ops, self.ledger, "convolution", self.trace, lane=self.acc.lane)
        self._partial = self.partial_rows[self._cur]
        self._operands = []
        self._grids = {}
        self._opd_used = 0

    def _count_ops(self, n: int, a: int, yp: int, m: int) -> List[MicroOp]:
        sid = self.plane_sids[n]
        starts = tuple(j * self.stride for j in self._positions[a])
        ops: List[MicroOp] = []
        for c in range(self.channels):
            base = c * self.in_h + yp * self.stride
            for ky in range(self.kh):
                ops.append(
                    (
                        "and_placed",
                        sid,
                        base + ky,
                        self._buf_map[(c, ky, m)],
                        self.kw,
                        starts,
                        True,
                    )
                )
        return ops

    def _deposit_ops(self, n: int, a: int, grid: List[Tuple[int, ...]]) -> List[MicroOp]:
        sid = self.plane_sids[n]
        pairs = self._pairs[a]
        ops: List[MicroOp] = []
        for r in range(self.count_bits):
            ops.append(("cshift", sid))
            ops.append(("bus", self.bus_beats))
            for t in range(self.kw):
                ops.append(("program_gather", self.acc_sid, grid[t][r], pairs[t]))
        ops.append(("creset", sid))
        return ops

    def run_output_row(self, yp: int) -> Tuple[Tuple[int, ...], int]:
        """Compute all column sums for output row yp; returns their rows."""
        if yp < 0 or yp >= self.out_h:
            raise DimMismatch(f"output row {yp} outside 0..{self.out_h - 1}")
        self._partial = None
        self._operands = []
        self._grids = {}
        self._opd_used = 0
        for m in range(self.n_weight_planes):
            for active in self.table:
                live = [(n, a) for n, a in active]
                if not live:
                    continue
                # reserve the whole period's slots up front so a fold can
                # never consume a grid that still has deposits coming
                missing = [n for n, a in live if (n, m) not in self._grids]
                need = len(missing) * self.kw * self.count_bits
                if self._opd_used + need > len(self._opd_rows):
                    self._fold()
                grids = {}
                for n, a in live:
                    key = (n, m)
                    grids[key] = self._grids.get(key) or self._alloc_grid(n, m)
                for n, a in live:
                    self.interp.run(
                        self._count_ops(n, a, yp, m),
                        self.ledger,
                        "convolution",
                        self.trace,
                    )
                self.ledger.barrier()
                for n, a in live:
                    self.interp.run(
                        self._deposit_ops(n, a, grids[(n, m)]),
                        self.ledger,
                        "convolution",
                        self.trace,
                        lane=self.acc.lane,
                    )
                self.ledger.barrier()
        self._fold()
        self.ledger.barrier()
        assert self._partial is not None
        return self._partial, self.sum_bits

    def release_row(self) -> None:
        """Erase both partial regions before the next output row."""
        gs = self.geometry.group_size
        rows = [r for region in self.partial_rows for r in region]
        ops = [("erase", self.acc_sid, grp) for grp in groups_covering(rows, gs)]
        self.interp.run(ops, self.ledger, "convolution", self.trace, lane=self.acc.lane)
        self.ledger.barrier()

    def read_rows(self, rows: Sequence[int], category: str = "transfer") -> np.ndarray:
        """Sense the given rows; returns uint8 bits [len(rows)][out_w]."""
        out = np.zeros((len(rows), self.out_w), dtype=np.uint8)
        for i, row in enumerate(rows):
            self.interp.run(
                [("read", self.acc_sid, row, False, False), ("bus", self.bus_beats)],
                self.ledger,
                category,
                self.trace,
                lane=self.acc.lane,
            )
            out[i] = bits_from_mask(self.interp.latch, self.out_w)
        self.ledger.barrier()
        return out


def bitwise_convolution(
    input_planes: Sequence[BitPlaneTensor],
    weight_planes: Sequence[BitPlaneTensor],
    window: Tuple[int, int],
    stride: int,
    *,
    params: Optional[CostParams] = None,
    ledger: Optional[CostLedger] = None,
    trace: Optional[TraceRecorder] = None,
) -> FixedPointTensor:
    """Per-position dot products of a fixed-point image against one kernel.

    Output[p] = sum over plane pairs (n, m) of 2^(n+m) times the popcount
    of input plane n AND weight plane m inside window p; equal to the
    integer sliding-window dot product.
    """
    if stride < 1:
        raise StrideInvalid(f"stride must be positive, got {stride}")
    in_sorted = _check_planes(input_planes, "input")
    w_sorted = _check_planes(weight_planes, "weight")
    kh, kw = window
    in_h, in_w = in_sorted[0].bits.shape
    if w_sorted[0].bits.shape != (kh, kw):
        raise DimMismatch("weight planes must match the window shape")
    if kh > in_h or kw > in_w:
        raise DimMismatch(f"window {kh}x{kw} does not fit input {in_h}x{in_w}")
    n, m = len(in_sorted), len(w_sorted)
    geom = SubarrayGeometry()
    if ledger is None:
        ledger = CostLedger(params, geom.group_size)
    buffer_cap = max(4, kh * m)
    subs = {
        i: Subarray(geom, ledger=ledger, buffer_capacity=buffer_cap, subarray_id=i)
        for i in range(n + 1)
    }
    interp = Interpreter(subs)
    engine = ConvEngine(
        interp,
        ledger,
        plane_sids=list(range(n)),
        acc_sid=n,
        in_h=in_h,
        in_w=in_w,
        channels=1,
        kh=kh,
        kw=kw,
        stride=stride,
        n_weight_planes=m,
        trace=trace,
    )
    engine.prepare()
    engine.load_inputs([p.bits[np.newaxis, :, :] for p in in_sorted])
    engine.load_weights([p.bits[np.newaxis, :, :] for p in w_sorted])
    out = np.zeros((engine.out_h, engine.out_w), dtype=np.int64)
    for yp in range(engine.out_h):
        rows, width = engine.run_output_row(yp)
        bits = engine.read_rows(rows[:width])
        for b in range(width):
            out[yp] |= bits[b].astype(np.int64) << b
        engine.release_row()
    return FixedPointTensor(values=out, bit_width=max(1, engine.sum_bits))


def _check_planes(planes: Sequence[BitPlaneTensor], what: str) -> List[BitPlaneTensor]:
    if not planes:
        raise DimMismatch(f"{what} needs at least one bit plane")
    ordered = sorted(planes, key=lambda p: p.plane_index)
    if [p.plane_index for p in ordered] != list(range(len(ordered))):
        raise DimMismatch(f"{what} planes must be indices 0..k-1 exactly once")
    shape = ordered[0].bits.shape
    if len(shape) != 2:
        raise DimMismatch(f"{what} planes must be two-dimensional")
    for p in ordered:
        if p.bits.shape != shape:
            raise DimMismatch(f"{what} plane shapes differ")
    return ordered
