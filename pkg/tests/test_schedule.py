"""Interpreter tests: each micro-op against hand-computed state transitions."""

import pytest

from nandspin.costmodel import CostLedger, CostParams
from nandspin.errors import NandSpinError
from nandspin.schedule import Interpreter, TraceRecorder, UnknownOp
from nandspin.subarray import Subarray, SubarrayGeometry


def make_interp(n_subs=1, columns=16, device_rows=4, group_size=4, buffer_capacity=4):
    ledger = CostLedger(CostParams(), group_size)
    geom = SubarrayGeometry(device_rows=device_rows, columns=columns, group_size=group_size)
    subs = {
        i: Subarray(geom, ledger=ledger, buffer_capacity=buffer_capacity, subarray_id=i)
        for i in range(n_subs)
    }
    return Interpreter(subs), ledger


def test_program_then_read_latches_row():
    interp, ledger = make_interp()
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 2, 0b1010),
            ("read", 0, 2, False, False),
        ],
        ledger,
        "load",
    )
    assert interp.latch == 0b1010
    assert interp.subarrays[0].peek_row(2) == 0b1010


def test_inverted_read_is_column_masked_complement():
    interp, ledger = make_interp(columns=8)
    interp.run(
        [("erase", 0, 0), ("program", 0, 0, 0b0011_0101), ("read", 0, 0, True, False)],
        ledger,
        "load",
    )
    assert interp.latch == (~0b0011_0101) & 0xFF


def test_and_uses_buffer_operand():
    interp, ledger = make_interp()
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 1, 0b1100),
            ("bufload", 0, 0, 0b1010),
            ("and", 0, 1, 0, False, False),
        ],
        ledger,
        "load",
    )
    assert interp.latch == 0b1000


def test_and_placed_tiles_buffer_bits_at_start_columns():
    interp, ledger = make_interp(columns=16)
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0xFFFF),
            ("bufload", 0, 0, 0b11),  # two live weight bits
            ("and_placed", 0, 0, 0, 2, (0, 5, 10), False),
        ],
        ledger,
        "load",
    )
    assert interp.latch == (0b11 << 0) | (0b11 << 5) | (0b11 << 10)


def test_and_placed_width_truncates_buffer():
    interp, ledger = make_interp(columns=16)
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0xFFFF),
            ("bufload", 0, 0, 0b111),
            ("and_placed", 0, 0, 0, 2, (4,), False),
        ],
        ledger,
        "load",
    )
    assert interp.latch == 0b11 << 4


def test_acc_cshift_stream_counters_lsb_first():
    interp, ledger = make_interp(columns=8)
    sub = interp.subarrays[0]
    # accumulate 3 into column 0, 1 into column 1
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b01),
            ("program", 0, 1, 0b01),
            ("program", 0, 2, 0b11),
            ("read", 0, 0, False, True),
            ("read", 0, 1, False, True),
            ("read", 0, 2, False, True),
        ],
        ledger,
        "load",
    )
    assert list(sub.counter_values()[:2]) == [3, 1]
    interp.run([("cshift", 0)], ledger, "load")
    first = interp.latch
    interp.run([("cshift", 0)], ledger, "load")
    second = interp.latch
    # col0 counts 3 = 0b11, col1 counts 1 = 0b01; LSB plane first
    assert first == 0b11
    assert second == 0b01
    interp.run([("creset", 0)], ledger, "load")
    assert sub.counters_zero()


def test_acc_op_adds_latch_to_counters():
    interp, ledger = make_interp(columns=8)
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b101),
            ("read", 0, 0, False, False),
            ("acc", 0),
            ("acc", 0),
        ],
        ledger,
        "load",
    )
    assert list(interp.subarrays[0].counter_values()[:3]) == [2, 0, 2]


def test_program_latch_writes_sensed_value():
    interp, ledger = make_interp()
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b0110),
            ("read", 0, 0, False, False),
            ("program_latch", 0, 5),
        ],
        ledger,
        "load",
    )
    assert interp.subarrays[0].peek_row(5) == 0b0110


def test_program_gather_routes_columns():
    interp, ledger = make_interp(columns=16)
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b0101),  # live columns 0 and 2
            ("read", 0, 0, False, False),
            ("program_gather", 0, 4, ((0, 7), (2, 3), (1, 9))),
        ],
        ledger,
        "load",
    )
    # src 0 -> dst 7, src 2 -> dst 3; src 1 held no bit so dst 9 stays clear
    assert interp.subarrays[0].peek_row(4) == (1 << 7) | (1 << 3)


def test_program_buf_writes_buffer_contents():
    interp, ledger = make_interp()
    interp.run(
        [("erase", 0, 0), ("bufload", 0, 2, 0b1001), ("program_buf", 0, 3, 2)],
        ledger,
        "load",
    )
    assert interp.subarrays[0].peek_row(3) == 0b1001


def test_bufload_latch_with_invert():
    interp, ledger = make_interp(columns=8)
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b1100_0011),
            ("read", 0, 0, False, False),
            ("bufload_latch", 0, 1, True),
        ],
        ledger,
        "load",
    )
    assert interp.subarrays[0].buffer.mask(1) == 0b0011_1100


def test_bus_charge_scales_with_beats():
    interp, ledger = make_interp()
    params = CostParams()
    interp.run([("bus", 5)], ledger, "transfer")
    assert ledger.energy_fj("transfer") == 5 * params.bus_beat_energy_fj
    assert ledger.latency_ns("transfer") == 5 * params.bus_beat_latency_ns


def test_unknown_op_rejected():
    interp, ledger = make_interp()
    with pytest.raises(UnknownOp):
        interp.run([("warp", 0)], ledger, "load")
    assert isinstance(UnknownOp("x"), NandSpinError)


def test_cross_subarray_schedule():
    interp, ledger = make_interp(n_subs=2)
    interp.run(
        [
            ("erase", 0, 0),
            ("erase", 1, 0),
            ("program", 0, 0, 0b0111),
            ("read", 0, 0, False, False),
            ("program_latch", 1, 0),
            ("read", 1, 0, False, False),
        ],
        ledger,
        "load",
    )
    assert interp.latch == 0b0111
    assert interp.subarrays[1].peek_row(0) == 0b0111


def test_trace_energy_matches_ledger():
    interp, ledger = make_interp(columns=8)
    trace = TraceRecorder()
    interp.run(
        [
            ("erase", 0, 0),
            ("program", 0, 0, 0b1011),
            ("bufload", 0, 0, 0b1111),
            ("and", 0, 0, 0, False, True),
            ("cshift", 0),
            ("program_latch", 0, 4),
            ("bus", 2),
        ],
        ledger,
        "convolution",
        trace=trace,
    )
    assert len(trace.records) == 7
    total = sum(r["energy_fj"] for r in trace.records)
    assert total == pytest.approx(ledger.energy_fj("convolution"))
    lines = trace.dump_jsonl().strip().splitlines()
    assert len(lines) == 7
    assert all(line.startswith("{") for line in lines)


def test_lane_override_serializes_onto_one_lane():
    interp, ledger = make_interp(n_subs=2)
    params = CostParams()
    interp.run(
        [("erase", 0, 0), ("erase", 1, 0)],
        ledger,
        "load",
        lane="acc",
    )
    # both erases forced onto the same lane: serial, not parallel
    expected = 2 * 4 * params.erase_latency_per_mtj_ns
    assert ledger.lane_time_ns("acc") == pytest.approx(expected)
    assert ledger.wall_ns == pytest.approx(expected)


def test_schedule_replay_is_deterministic():
    ops = [
        ("erase", 0, 0),
        ("program", 0, 1, 0b0110),
        ("bufload", 0, 0, 0b1010),
        ("and", 0, 1, 0, False, True),
        ("cshift", 0),
        ("program_latch", 0, 6),
    ]
    outs = []
    for _ in range(2):
        interp, ledger = make_interp()
        trace = TraceRecorder()
        interp.run(ops, ledger, "convolution", trace=trace)
        outs.append((trace.dump_jsonl(), interp.subarrays[0].peek_row(6), ledger.energy_fj("convolution")))
    assert outs[0] == outs[1]
