"""Device-level truth tables and signal decoding.

The expected outputs are stated directly from the device's published
operation table: erase drives every MTJ antiparallel, program switches the
selected MTJ parallel only for data 1, read returns the stored bit, and
AND returns operand & stored bit.
"""

import itertools
import random

import pytest

from nandspin.device import (
    AndOp,
    ControlSignals,
    EraseOp,
    MtjState,
    NandSpinDevice,
    ProgramOp,
    ReadOp,
    and_sense,
    apply_signals,
    decode_signals,
    erase,
    program,
    read,
    sense_output,
)
from nandspin.errors import ProgramWithoutErase, RowOutOfRange, SignalDecodeError


def device_from_bits(bits):
    return NandSpinDevice(mtjs=tuple(MtjState.P if b else MtjState.AP for b in bits))


def test_erase_resets_every_state_exhaustively():
    # All 16 states of a 4-MTJ strip end antiparallel after erase.
    for combo in itertools.product((0, 1), repeat=4):
        dev = erase(device_from_bits(combo))
        assert dev.mtjs == (MtjState.AP,) * 4
        assert dev.data_bits() == (0, 0, 0, 0)


def test_program_truth_table_from_erased():
    dev = NandSpinDevice.erased(8)
    for index in range(8):
        assert program(dev, index, 1).mtjs[index] is MtjState.P
        assert program(dev, index, 0).mtjs[index] is MtjState.AP
    # d = 0 leaves the rest of the strip alone too
    after = program(dev, 3, 1)
    assert [after.mtjs[i] for i in range(8) if i != 3] == [MtjState.AP] * 7


def test_program_without_erase_is_rejected_in_strict_mode():
    dev = program(NandSpinDevice.erased(8), 2, 1)
    with pytest.raises(ProgramWithoutErase):
        program(dev, 2, 1)
    # permissive mode keeps the state instead
    assert program(dev, 2, 1, strict=False).mtjs[2] is MtjState.P


def test_read_and_and_truth_tables():
    for d in (0, 1):
        dev = program(NandSpinDevice.erased(4), 1, d)
        assert read(dev, 1) == d
        for w in (0, 1):
            assert and_sense(dev, 1, w) == (w & d)


def test_sense_amplifier_decision():
    assert sense_output(1, MtjState.P) == 1
    assert sense_output(1, MtjState.AP) == 0
    assert sense_output(0, MtjState.P) == 0
    assert sense_output(0, MtjState.AP) == 0


def test_operations_preserve_value_semantics():
    dev = NandSpinDevice.erased(8)
    programmed = program(dev, 0, 1)
    assert dev.mtjs[0] is MtjState.AP  # original untouched
    read(programmed, 0)
    assert programmed.mtjs[0] is MtjState.P


@pytest.mark.parametrize("group_size", [1, 4, 8])
def test_write_read_round_trip(group_size):
    rng = random.Random(1234 + group_size)
    for _ in range(50):
        data = [rng.randint(0, 1) for _ in range(group_size)]
        dev = erase(NandSpinDevice.erased(group_size))
        for i, d in enumerate(data):
            dev = program(dev, i, d)
        assert [read(dev, i) for i in range(group_size)] == data


def test_mtj_index_bounds():
    dev = NandSpinDevice.erased(4)
    with pytest.raises(RowOutOfRange):
        read(dev, 4)
    with pytest.raises(RowOutOfRange):
        program(dev, -1, 1)


# -- signal decoding -----------------------------------------------------------


def _sig(we, er, c, r, fu, ref):
    return ControlSignals(we=we, er=er, c=tuple(c), r=tuple(r), fu=fu, ref=ref)


def test_decode_matches_operation_table():
    assert decode_signals(_sig(1, 1, [0], [0, 0, 0, 0], 0, 0)) == EraseOp()
    assert decode_signals(_sig(1, 0, [1], [0, 1, 0, 0], 0, 0)) == ProgramOp(row=1, data=(1,))
    assert decode_signals(_sig(1, 0, [0], [0, 1, 0, 0], 0, 0)) == ProgramOp(row=1, data=(0,))
    assert decode_signals(_sig(0, 1, [0], [0, 0, 1, 0], 1, 1)) == ReadOp(row=2)
    # AND with operand 0; operand 1 is electrically identical to a read
    assert decode_signals(_sig(0, 1, [0], [0, 0, 1, 0], 0, 1)) == AndOp(row=2, w=0)


def test_decode_rejects_unsupported_combinations():
    bad = [
        _sig(1, 1, [0], [1, 0, 0, 0], 0, 0),  # erase with a row selected
        _sig(1, 1, [0], [0, 0, 0, 0], 1, 0),  # erase with FU high
        _sig(1, 0, [1], [1, 1, 0, 0], 0, 0),  # program with two rows selected
        _sig(1, 0, [1], [0, 0, 0, 0], 0, 0),  # program with no row selected
        _sig(1, 0, [1], [0, 1, 0, 0], 0, 1),  # program with REF high
        _sig(0, 1, [1], [0, 1, 0, 0], 1, 1),  # read with data lines driven
        _sig(0, 1, [0], [0, 1, 0, 0], 1, 0),  # read without REF
        _sig(0, 0, [0], [0, 1, 0, 0], 1, 1),  # WE=ER=0 is no operation
    ]
    for signals in bad:
        with pytest.raises(SignalDecodeError):
            decode_signals(signals)
    with pytest.raises(SignalDecodeError):
        decode_signals(ControlSignals(we=2, er=0, c=(0,), r=(0,), fu=0, ref=0))


def test_apply_signals_reproduces_operation_table_rows():
    g = 4
    # erase row: any state -> all AP, no output
    dev, out = apply_signals(device_from_bits([1, 0, 1, 1]), _sig(1, 1, [0], [0] * g, 0, 0))
    assert out is None and dev.mtjs == (MtjState.AP,) * g
    # program row: erased MTJ takes the complement-coded state of the data bit
    for d in (0, 1):
        dev2, out = apply_signals(
            NandSpinDevice.erased(g), _sig(1, 0, [d], [0, 0, 1, 0], 0, 0)
        )
        assert out is None
        assert dev2.mtjs[2] is (MtjState.P if d else MtjState.AP)
    # read row: OUT equals the stored bit, state untouched
    for d in (0, 1):
        stored = program(NandSpinDevice.erased(g), 2, d)
        dev3, out = apply_signals(stored, _sig(0, 1, [0], [0, 0, 1, 0], 1, 1))
        assert out == d and dev3 == stored
    # AND row: OUT = W AND stored bit for all four operand/state pairs
    for d in (0, 1):
        stored = program(NandSpinDevice.erased(g), 2, d)
        for w in (0, 1):
            _, out = apply_signals(stored, _sig(0, 1, [0], [0, 0, 1, 0], w, 1))
            assert out == (w & d)
