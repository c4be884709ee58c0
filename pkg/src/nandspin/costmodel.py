"""Energy/latency accounting for simulated array operations.

Measured per-operation costs (erase, program, read/AND) default to the
values reported for the fabricated-characterized device: 180 fJ per strip
erase with 0.3 ns per MTJ, 840 fJ per strip program (105 fJ per bit at
group size 8) with 5 ns per programmed bit-row, and 4.0 fJ / 0.17 ns per
row read.  Bus, buffer and counter costs are desk estimates with no
measured source; they are kept small, configurable, and flagged as
estimates in every report.

The ledger stores integer multiplicities per (category, op-kind) cell and
multiplies by the per-kind rate only when queried.  Totals are therefore
exact single products summed in a fixed order, and identical regardless of
how charges were interleaved or distributed across worker threads.

Wall-clock latency uses a lane model: between barriers, charges on
distinct lanes run in parallel; a barrier folds max-over-lanes into the
running total.  Serial work on one lane simply accumulates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Tuple

CATEGORIES = (
    "load",
    "convolution",
    "transfer",
    "pooling_compare",
    "batch_norm",
    "quantization",
)

OP_KINDS = ("erase", "program", "read", "and", "bus", "buffer_write", "counter")

# Parameters whose defaults are desk estimates rather than measured values.
ESTIMATED_PARAMS = (
    "bus_beat_energy_fj",
    "bus_beat_latency_ns",
    "buffer_write_energy_fj",
    "buffer_write_latency_ns",
    "counter_op_energy_fj",
    "counter_op_latency_ns",
)


@dataclass(frozen=True)
class CostParams:
    erase_energy_per_device_fj: float = 180.0
    erase_latency_per_mtj_ns: float = 0.3
    program_energy_per_device_fj: float = 840.0
    program_latency_per_bit_ns: float = 5.0
    read_energy_fj: float = 4.0
    read_latency_ns: float = 0.17
    # AND shares the read current path; identical cost by default.
    and_energy_fj: float = 4.0
    and_latency_ns: float = 0.17
    # Desk estimates with no measured source: bus beat, buffer row write,
    # one bit-counter step across all columns.
    bus_beat_energy_fj: float = 24.0
    bus_beat_latency_ns: float = 0.5
    buffer_write_energy_fj: float = 30.0
    buffer_write_latency_ns: float = 0.5
    counter_op_energy_fj: float = 16.0
    counter_op_latency_ns: float = 0.1

    def program_energy_per_bit_fj(self, group_size: int) -> float:
        return self.program_energy_per_device_fj / group_size

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"cost parameter {name} must be nonnegative")


def _rate_tables(params: CostParams, group_size: int) -> Tuple[Dict[str, float], Dict[str, float]]:
    energy = {
        "erase": params.erase_energy_per_device_fj,
        "program": params.program_energy_per_bit_fj(group_size),
        "read": params.read_energy_fj,
        "and": params.and_energy_fj,
        "bus": params.bus_beat_energy_fj,
        "buffer_write": params.buffer_write_energy_fj,
        "counter": params.counter_op_energy_fj,
    }
    latency = {
        "erase": params.erase_latency_per_mtj_ns,  # charged per MTJ of the strip
        "program": params.program_latency_per_bit_ns,
        "read": params.read_latency_ns,
        "and": params.and_latency_ns,
        "bus": params.bus_beat_latency_ns,
        "buffer_write": params.buffer_write_latency_ns,
        "counter": params.counter_op_latency_ns,
    }
    return energy, latency


class CostLedger:
    """Accumulates (category, kind) multiplicities plus lane wall time."""

    def __init__(self, params: Optional[CostParams] = None, group_size: int = 8):
        self.params = params or CostParams()
        self.params.validate()
        if group_size < 1:
            raise ValueError("group size must be positive")
        self.group_size = group_size
        self._energy_rate, self._latency_rate = _rate_tables(self.params, group_size)
        # (category, kind) -> [energy_mult, latency_mult, event_count], all ints
        self._cells: Dict[Tuple[str, str], List[int]] = {}
        # lane -> kind -> latency_mult for the currently open parallel phase
        self._lanes: Dict[str, Dict[str, int]] = {}
        self._wall_closed = 0.0

    # -- charging ------------------------------------------------------------

    def charge(
        self,
        kind: str,
        *,
        category: str,
        lane: str,
        energy_mult: int = 1,
        latency_mult: int = 1,
        count: int = 1,
    ) -> None:
        if kind not in self._energy_rate:
            raise ValueError(f"unknown op kind {kind!r}")
        if category not in CATEGORIES:
            raise ValueError(f"unknown cost category {category!r}")
        if energy_mult < 0 or latency_mult < 0 or count < 0:
            raise ValueError("multiplicities must be nonnegative")
        cell = self._cells.get((category, kind))
        if cell is None:
            cell = self._cells[(category, kind)] = [0, 0, 0]
        cell[0] += energy_mult
        cell[1] += latency_mult
        cell[2] += count
        lane_mults = self._lanes.get(lane)
        if lane_mults is None:
            lane_mults = self._lanes[lane] = {}
        lane_mults[kind] = lane_mults.get(kind, 0) + latency_mult

    def event_cost(self, kind: str, energy_mult: int = 1, latency_mult: int = 1) -> Tuple[float, float]:
        """Energy/latency of one charge, for trace annotation."""
        return (
            energy_mult * self._energy_rate[kind],
            latency_mult * self._latency_rate[kind],
        )

    # -- lane / wall model -----------------------------------------------------

    def _lane_time(self, mults: Dict[str, int]) -> float:
        return sum(mults[kind] * self._latency_rate[kind] for kind in sorted(mults))

    def barrier(self) -> None:
        """Close the open phase: lanes ran in parallel, keep the slowest."""
        if self._lanes:
            self._wall_closed += max(self._lane_time(m) for m in self._lanes.values())
            self._lanes.clear()

    @property
    def wall_ns(self) -> float:
        pending = max((self._lane_time(m) for m in self._lanes.values()), default=0.0)
        return self._wall_closed + pending

    def lane_time_ns(self, lane: str) -> float:
        """Serial time charged to one lane in the open phase."""
        return self._lane_time(self._lanes.get(lane, {}))

    # -- merging ---------------------------------------------------------------

    def _absorb_cells(self, other: "CostLedger") -> None:
        for key, cell in other._cells.items():
            mine = self._cells.get(key)
            if mine is None:
                mine = self._cells[key] = [0, 0, 0]
            mine[0] += cell[0]
            mine[1] += cell[1]
            mine[2] += cell[2]

    def absorb_parallel(self, children: Iterable["CostLedger"]) -> None:
        """Merge sibling ledgers whose work overlapped in time."""
        self.barrier()
        walls = []
        for child in children:
            self._absorb_cells(child)
            walls.append(child.wall_ns)
        if walls:
            self._wall_closed += max(walls)

    def absorb_serial(self, child: "CostLedger") -> None:
        self.barrier()
        self._absorb_cells(child)
        self._wall_closed += child.wall_ns

    # -- queries ---------------------------------------------------------------

    def energy_fj(self, category: Optional[str] = None) -> float:
        total = 0.0
        for (cat, kind) in sorted(self._cells):
            if category is None or cat == category:
                total += self._cells[(cat, kind)][0] * self._energy_rate[kind]
        return total

    def latency_ns(self, category: Optional[str] = None) -> float:
        """Serialized latency attribution (sum of op latencies by category)."""
        total = 0.0
        for (cat, kind) in sorted(self._cells):
            if category is None or cat == category:
                total += self._cells[(cat, kind)][1] * self._latency_rate[kind]
        return total

    def events(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for (_, kind) in sorted(self._cells):
            counts[kind] = counts.get(kind, 0) + self._cells[(_, kind)][2]
        return counts

    def report(self, params_echo: Optional[Dict] = None) -> Dict:
        energy = {cat: self.energy_fj(cat) for cat in CATEGORIES}
        latency = {cat: self.latency_ns(cat) for cat in CATEGORIES}
        e_total = sum(energy[cat] for cat in CATEGORIES)
        l_total = sum(latency[cat] for cat in CATEGORIES)
        pct = {
            "energy_fj": {
                cat: (100.0 * energy[cat] / e_total if e_total else 0.0) for cat in CATEGORIES
            },
            "latency_ns": {
                cat: (100.0 * latency[cat] / l_total if l_total else 0.0) for cat in CATEGORIES
            },
        }
        echo = dict(params_echo or {})
        echo["cost_params"] = asdict(self.params)
        echo["group_size"] = self.group_size
        echo["estimated_params"] = list(ESTIMATED_PARAMS)
        return {
            "energy_fj": energy,
            "energy_total_fj": e_total,
            "latency_ns": latency,
            "latency_total_ns": l_total,
            "wall_latency_ns": self.wall_ns,
            "percentages": pct,
            "events": self.events(),
            "params_echo": echo,
        }

    def report_csv(self) -> str:
        rep = self.report()
        lines = ["category,energy_fj,energy_pct,latency_ns,latency_pct"]
        for cat in CATEGORIES:
            lines.append(
                f"{cat},{rep['energy_fj'][cat]!r},{rep['percentages']['energy_fj'][cat]!r},"
                f"{rep['latency_ns'][cat]!r},{rep['percentages']['latency_ns'][cat]!r}"
            )
        lines.append(f"total,{rep['energy_total_fj']!r},100.0,{rep['latency_total_ns']!r},100.0")
        return "\n".join(lines) + "\n"


def total_latency(ledger: CostLedger) -> float:
    """Wall latency under the lane model: max over parallel lanes of summed
    serial op latencies, accumulated across barriers."""
    return ledger.wall_ns
