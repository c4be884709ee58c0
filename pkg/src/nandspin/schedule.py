"""Micro-op schedules and their interpreter.

Every bit-serial primitive is expressed as an ordered list of micro-ops,
plain tuples whose first element names the operation.  The interpreter
executes them against a set of subarrays, threading sensed bit-vectors
through a single latch register (the bus-visible sense latch) and charging
every step to a cost ledger.  Schedules contain no data-dependent control
flow: stream lengths are fixed worst-case bounds computed when the
schedule is built, so a schedule replays identically on identical state.

Micro-ops (sid = subarray id, masks are column bitmasks):

  ("erase", sid, device_row)                  erase one device row group
  ("program", sid, bit_row, mask)             program immediate data
  ("program_latch", sid, bit_row)             program the latch contents
  ("program_buf", sid, bit_row, buf_row)      program from a buffer row
  ("program_gather", sid, bit_row, pairs)     program latch bits routed
                                              through (src_col, dst_col) pairs
  ("read", sid, bit_row, invert, acc)         latch = row (or complement);
                                              acc also adds it to the counters
  ("and", sid, bit_row, buf_row, invert, acc) latch = row AND buffer row
  ("and_placed", sid, bit_row, buf_row, width, starts, acc)
                                              buffer bits 0..width-1 tiled at
                                              each start column before the AND
  ("acc", sid)                                counters += latch
  ("cshift", sid)                             latch = counter LSBs; halve
  ("creset", sid)                             counters = 0
  ("bufload", sid, buf_row, mask)             load immediate buffer data
  ("bufload_latch", sid, buf_row, invert)     load buffer from the latch
  ("bus", beats)                              internal bus transfer beats

The complemented read path mirrors the differential sense amplifier's
inverted output; it costs the same as the plain read.
"""

from __future__ import annotations

import json
from typing import Dict, Iterable, List, Optional, Tuple

from .costmodel import CostLedger
from .errors import NandSpinError
from .subarray import Subarray


class UnknownOp(NandSpinError):
    """Schedule contains a micro-op the interpreter does not know."""


MicroOp = tuple


class TraceRecorder:
    """Collects one JSON-serializable record per executed micro-op."""

    def __init__(self):
        self.records: List[dict] = []

    def emit(self, op: str, sid, rows: List[int], category: str, energy_fj: float, latency_ns: float) -> None:
        self.records.append(
            {
                "op": op,
                "subarray": sid,
                "rows": rows,
                "category": category,
                "energy_fj": energy_fj,
                "latency_ns": latency_ns,
            }
        )

    def extend(self, other: "TraceRecorder") -> None:
        self.records.extend(other.records)

    def dump_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class Interpreter:
    """Executes micro-op schedules against a set of subarrays."""

    def __init__(self, subarrays: Dict[int, Subarray]):
        self.subarrays = dict(subarrays)
        self.latch = 0

    def run(
        self,
        ops: Iterable[MicroOp],
        ledger: CostLedger,
        category: str,
        trace: Optional[TraceRecorder] = None,
        lane: Optional[str] = None,
    ) -> None:
        subs = self.subarrays
        for op in ops:
            kind = op[0]
            if kind == "and":
                _, sid, row, buf_row, invert, acc = op
                sub = subs[sid]
                operand = sub.buffer.mask(buf_row)
                value = sub.and_m(row, operand, ledger, category, lane)
                if invert:
                    value = ~value & sub._col_mask
                self.latch = value
                if acc:
                    sub.acc_m(value, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("and")
                    if acc:
                        e2, l2 = ledger.event_cost("counter")
                        e, l = e + e2, l + l2
                    trace.emit("and_acc" if acc else "and", sid, [row], category, e, l)
            elif kind == "read":
                _, sid, row, invert, acc = op
                sub = subs[sid]
                value = sub.read_m(row, ledger, category, lane)
                if invert:
                    value = ~value & sub._col_mask
                self.latch = value
                if acc:
                    sub.acc_m(value, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("read")
                    if acc:
                        e2, l2 = ledger.event_cost("counter")
                        e, l = e + e2, l + l2
                    trace.emit("read_acc" if acc else "read", sid, [row], category, e, l)
            elif kind == "and_placed":
                _, sid, row, buf_row, width, starts, acc = op
                sub = subs[sid]
                low = sub.buffer.mask(buf_row) & ((1 << width) - 1)
                operand = 0
                for start in starts:
                    operand |= low << start
                value = sub.and_m(row, operand, ledger, category, lane)
                self.latch = value
                if acc:
                    sub.acc_m(value, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("and")
                    if acc:
                        e2, l2 = ledger.event_cost("counter")
                        e, l = e + e2, l + l2
                    trace.emit("and_placed_acc" if acc else "and_placed", sid, [row], category, e, l)
            elif kind == "cshift":
                _, sid = op
                self.latch = subs[sid].cshift_m(ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("counter")
                    trace.emit("cshift", sid, [], category, e, l)
            elif kind == "acc":
                _, sid = op
                subs[sid].acc_m(self.latch, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("counter")
                    trace.emit("acc", sid, [], category, e, l)
            elif kind == "creset":
                _, sid = op
                subs[sid].creset_m(ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("counter")
                    trace.emit("creset", sid, [], category, e, l)
            elif kind == "program_latch":
                _, sid, row = op
                sub = subs[sid]
                mask = self.latch & sub._col_mask
                sub.program_row_m(row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("program", energy_mult=mask.bit_count())
                    trace.emit("program_latch", sid, [row], category, e, l)
            elif kind == "program_gather":
                _, sid, row, pairs = op
                latch = self.latch
                mask = 0
                for src, dst in pairs:
                    if (latch >> src) & 1:
                        mask |= 1 << dst
                sub = subs[sid]
                sub.program_row_m(row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("program", energy_mult=mask.bit_count())
                    trace.emit("program_gather", sid, [row], category, e, l)
            elif kind == "program_buf":
                _, sid, row, buf_row = op
                sub = subs[sid]
                mask = sub.buffer.mask(buf_row)
                sub.program_row_m(row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("program", energy_mult=mask.bit_count())
                    trace.emit("program_buf", sid, [row], category, e, l)
            elif kind == "program":
                _, sid, row, mask = op
                subs[sid].program_row_m(row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("program", energy_mult=mask.bit_count())
                    trace.emit("program", sid, [row], category, e, l)
            elif kind == "erase":
                _, sid, device_row = op
                sub = subs[sid]
                sub.erase_group_m(device_row, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost(
                        "erase",
                        energy_mult=sub.geometry.columns,
                        latency_mult=sub.geometry.group_size,
                    )
                    trace.emit("erase", sid, [device_row], category, e, l)
            elif kind == "bufload":
                _, sid, buf_row, mask = op
                subs[sid].bufload_m(buf_row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("buffer_write")
                    trace.emit("bufload", sid, [buf_row], category, e, l)
            elif kind == "bufload_latch":
                _, sid, buf_row, invert = op
                sub = subs[sid]
                mask = self.latch & sub._col_mask
                if invert:
                    mask = ~mask & sub._col_mask
                sub.bufload_m(buf_row, mask, ledger, category, lane)
                if trace is not None:
                    e, l = ledger.event_cost("buffer_write")
                    trace.emit("bufload_latch", sid, [buf_row], category, e, l)
            elif kind == "bus":
                _, beats = op
                ledger.charge("bus", category=category, lane=lane or "bus", energy_mult=beats, latency_mult=beats, count=beats)
                if trace is not None:
                    e, l = ledger.event_cost("bus", energy_mult=beats, latency_mult=beats)
                    trace.emit("bus", None, [], category, e, l)
            else:
                raise UnknownOp(f"unknown micro-op kind {kind!r}")
