"""Acceptance gate: seven checks, one printed pass/fail line each.

Each check states its time budget and runs the relevant layer of the
stack against an independent integer oracle (or against the frozen cost
table for the exactness check).  Budgets are asserted with
time.perf_counter; the pass/fail lines always reach the terminal.
"""

import json
import time

import numpy as np
import pytest

from nandspin.bitplane import FixedPointTensor, decompose
from nandspin.cli import main
from nandspin.costmodel import CATEGORIES, CostLedger
from nandspin.device import (
    AndOp,
    ControlSignals,
    EraseOp,
    MtjState,
    NandSpinDevice,
    ProgramOp,
    ReadOp,
    and_sense,
    decode_signals,
    erase,
    program,
    read,
    sense_output,
)
from nandspin.errors import ProgramWithoutErase
from nandspin.model import BatchNorm, LayerSpec, ModelSpec, model_to_json, tensor_to_json
from nandspin.primitives import (
    ColumnVectorLayout,
    Term,
    bitwise_convolution,
    build_add,
    build_compare,
    build_mul,
    build_store,
)
from nandspin.reference import run_reference
from nandspin.runtime import run_model
from nandspin.schedule import Interpreter
from nandspin.subarray import Subarray, SubarrayGeometry

GEOM = SubarrayGeometry()  # 32 device rows x 128 columns, 8 MTJs per device


def report_line(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, f"criterion {number}: {detail}"


def budget(capsys, number: int, elapsed: float, limit: float) -> None:
    ok = elapsed < limit
    if not ok:
        report_line(capsys, number, False, f"took {elapsed:.2f}s, budget {limit:.0f}s")


def fresh(buffer_capacity=4):
    ledger = CostLedger(None, GEOM.group_size)
    sub = Subarray(GEOM, ledger=ledger, buffer_capacity=buffer_capacity, subarray_id=0)
    return Interpreter({0: sub}), ledger


def read_columns(sub, rows, layout):
    vals = np.zeros(layout.n_cols, dtype=np.int64)
    for b, row in enumerate(rows):
        mask = sub.peek_row(row)
        for c in range(layout.n_cols):
            if (mask >> (layout.col_start + c)) & 1:
                vals[c] |= 1 << b
    return vals


def test_criterion_1_device_truth_tables(capsys):
    t0 = time.perf_counter()
    # sense amplifier decision, all four input rows
    assert sense_output(0, MtjState.AP) == 0
    assert sense_output(0, MtjState.P) == 0
    assert sense_output(1, MtjState.AP) == 0
    assert sense_output(1, MtjState.P) == 1
    # every 8-bit stored pattern: program from erased, read back, AND senses
    for pattern in range(256):
        dev = NandSpinDevice.erased(8)
        for i in range(8):
            dev = program(dev, i, (pattern >> i) & 1)
        assert dev.data_bits() == tuple((pattern >> i) & 1 for i in range(8))
        for i in range(8):
            bit = (pattern >> i) & 1
            assert read(dev, i) == bit
            assert and_sense(dev, i, 0) == 0
            assert and_sense(dev, i, 1) == bit
        wiped = erase(dev)
        assert wiped.data_bits() == (0,) * 8
        assert erase(wiped).data_bits() == (0,) * 8  # erase is idempotent
    # reprogramming a parallel MTJ without an erase is a scheduling bug
    dev = program(NandSpinDevice.erased(8), 3, 1)
    with pytest.raises(ProgramWithoutErase):
        program(dev, 3, 1)
    # the four control-signal rows decode to the four operations
    zero_c, zero_r = (0,) * 4, (0,) * 8
    sel = tuple(1 if i == 5 else 0 for i in range(8))
    assert decode_signals(
        ControlSignals(we=1, er=1, c=zero_c, r=zero_r, fu=0, ref=0)) == EraseOp()
    assert decode_signals(
        ControlSignals(we=1, er=0, c=(1, 0, 1, 1), r=sel, fu=0, ref=0)
    ) == ProgramOp(row=5, data=(1, 0, 1, 1))
    assert decode_signals(
        ControlSignals(we=0, er=1, c=zero_c, r=sel, fu=1, ref=1)) == ReadOp(row=5)
    assert decode_signals(
        ControlSignals(we=0, er=1, c=zero_c, r=sel, fu=0, ref=1)) == AndOp(row=5, w=0)
    elapsed = time.perf_counter() - t0
    budget(capsys, 1, elapsed, 1.0)
    report_line(capsys, 1, True,
                f"device truth tables exhaustive over 256 patterns ({elapsed:.2f}s)")


def conv_oracle(inp, wgt, stride):
    kh, kw = wgt.shape
    oh = (inp.shape[0] - kh) // stride + 1
    ow = (inp.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow), dtype=np.int64)
    for y in range(oh):
        for x in range(ow):
            win = inp[y * stride : y * stride + kh, x * stride : x * stride + kw]
            out[y, x] = int((win * wgt).sum())
    return out


def test_criterion_2_convolution_bit_exact(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(200):
        k_in = int(rng.integers(1, 9))
        k_w = int(rng.integers(1, 9))
        kh = int(rng.integers(1, 4))
        kw = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        in_h = int(rng.integers(kh, 9))
        in_w = int(rng.integers(kw, 9))
        inp = rng.integers(0, 1 << k_in, size=(in_h, in_w))
        wgt = rng.integers(0, 1 << k_w, size=(kh, kw))
        got = bitwise_convolution(
            decompose(FixedPointTensor(values=inp, bit_width=k_in)),
            decompose(FixedPointTensor(values=wgt, bit_width=k_w)),
            wgt.shape,
            stride,
        )
        want = conv_oracle(inp, wgt, stride)
        assert got.values.tolist() == want.tolist(), (inp, wgt, stride)
    elapsed = time.perf_counter() - t0
    budget(capsys, 2, elapsed, 10.0)
    report_line(capsys, 2, True,
                f"200 random window instances bit-exact ({elapsed:.2f}s)")


def test_criterion_3_primitive_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)

    # addition: 2 to 16 operands of 8 bits across full-width batches
    for n_ops in (2, 4, 8, 16):
        interp, ledger = fresh()
        sub = interp.subarrays[0]
        rows = tuple(
            tuple(range(8 + 8 * i, 16 + 8 * i)) for i in range(n_ops)
        )
        out_bits = int(n_ops * 255).bit_length()
        out_rows = tuple(range(8 + 8 * n_ops, 8 + 8 * n_ops + out_bits))
        layout = ColumnVectorLayout(0, 0, 128, rows)
        vals = rng.integers(0, 256, size=(n_ops, 128))
        interp.run(build_store(layout, vals, GEOM), ledger, "load")
        interp.run(
            build_add(layout, [Term(r) for r in rows],
                      out_rows=out_rows, n_bits=out_bits),
            ledger, "convolution",
        )
        got = read_columns(sub, out_rows, layout)
        assert got.tolist() == vals.sum(axis=0).tolist(), n_ops

    # multiplication: 8-bit columns times an 8-bit shared constant
    for mult in (0, 1, 255, int(rng.integers(2, 255))):
        interp, ledger = fresh()
        sub = interp.subarrays[0]
        rows = tuple(range(8, 16))
        out_rows = tuple(range(16, 32))
        layout = ColumnVectorLayout(0, 0, 128, (rows,))
        vals = rng.integers(0, 256, size=(1, 128))
        interp.run(build_store(layout, vals, GEOM), ledger, "load")
        interp.run(build_mul(layout, mult, 8, out_rows=out_rows),
                   ledger, "convolution")
        got = read_columns(sub, out_rows, layout)
        assert got.tolist() == (vals[0] * mult).tolist(), mult

    # comparison: exhaustive 4-bit pairs, then random 8-bit pairs;
    # equality must land on the documented strict side (result 0)
    pairs = [(a, b) for a in range(16) for b in range(16)]
    for chunk in (pairs[:128], pairs[128:]):
        interp, ledger = fresh()
        sub = interp.subarrays[0]
        a_rows, b_rows = tuple(range(8, 12)), tuple(range(12, 16))
        layout = ColumnVectorLayout(0, 0, len(chunk), (a_rows, b_rows), (), 16, 17)
        vals = np.array(chunk).T
        interp.run(build_store(layout, vals, GEOM), ledger, "load")
        interp.run(build_compare(layout, GEOM), ledger, "pooling_compare")
        got = read_columns(sub, (layout.result_row,), layout)
        want = (vals[0] > vals[1]).astype(np.int64)
        assert got.tolist() == want.tolist()
        eq_cols = np.flatnonzero(vals[0] == vals[1])
        assert not got[eq_cols].any()  # ties are never reported as greater

    interp, ledger = fresh()
    sub = interp.subarrays[0]
    a_rows, b_rows = tuple(range(8, 16)), tuple(range(16, 24))
    layout = ColumnVectorLayout(0, 0, 128, (a_rows, b_rows), (), 24, 25)
    vals = rng.integers(0, 256, size=(2, 128))
    vals[1, :16] = vals[0, :16]  # force some ties
    interp.run(build_store(layout, vals, GEOM), ledger, "load")
    interp.run(build_compare(layout, GEOM), ledger, "pooling_compare")
    got = read_columns(sub, (layout.result_row,), layout)
    assert got.tolist() == (vals[0] > vals[1]).astype(np.int64).tolist()

    elapsed = time.perf_counter() - t0
    budget(capsys, 3, elapsed, 30.0)
    report_line(capsys, 3, True,
                f"add/mul/compare match integer oracles ({elapsed:.2f}s)")


def toy_cnn(rng):
    """2 convs with normalization+rectification+quantization, a 2x2 max
    pool, and a classifier head, sized for an 8x8 single-channel input."""
    def bn(m):
        return BatchNorm(
            mu=rng.uniform(-6, 6, m), sigma=rng.uniform(0.5, 3, m),
            gamma=rng.uniform(-2, 3, m), beta=rng.uniform(-6, 6, m), eps=1e-5)

    m1 = int(rng.integers(2, 4))
    m2 = int(rng.integers(2, 5))
    d_out = int(rng.integers(2, 6))
    k1 = int(rng.integers(3, 5))
    k2 = int(rng.integers(2, 5))
    k3 = int(rng.integers(2, 5))
    q1 = float(rng.uniform(-8, 2))
    q2 = float(rng.uniform(-8, 2))
    q3 = float(rng.uniform(-8, 2))
    layers = [
        LayerSpec("conv", (m1, 3, 3), stride=1, k_i=4, k_w=2, k=k1,
                  qmin=q1, qmax=q1 + float(rng.uniform(4, 40)), bn=bn(m1),
                  weights=rng.integers(0, 4, (m1, 1, 3, 3), dtype=np.int64)),
        LayerSpec("maxpool", (2, 2), stride=2, k_i=k1),
        LayerSpec("conv", (m2, 2, 2), stride=1, k_i=k1, k_w=2, k=k2,
                  qmin=q2, qmax=q2 + float(rng.uniform(4, 40)), bn=bn(m2),
                  weights=rng.integers(0, 4, (m2, m1, 2, 2), dtype=np.int64)),
        LayerSpec("fc", (d_out,), k_i=k2, k_w=2, k=k3,
                  qmin=q3, qmax=q3 + float(rng.uniform(4, 40)), bn=bn(d_out),
                  weights=rng.integers(0, 4, (d_out, m2 * 4), dtype=np.int64)),
    ]
    inp = rng.integers(0, 16, size=(1, 8, 8), dtype=np.int64)
    return ModelSpec(layers), inp


def test_criterion_4_toy_cnn_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    for trial in range(50):
        model, inp = toy_cnn(rng)
        want = run_reference(model, inp)
        got = run_model(model, inp).output
        assert np.array_equal(want, got), f"trial {trial}"
    # anchor two parameterizations through the actual command line
    rng = np.random.default_rng(404)
    for trial in range(2):
        model, inp = toy_cnn(rng)
        mp, ip = tmp_path / f"m{trial}.json", tmp_path / f"i{trial}.json"
        mp.write_text(model_to_json(model), encoding="utf-8")
        ip.write_text(tensor_to_json(inp), encoding="utf-8")
        run_dir, ref_dir = tmp_path / f"run{trial}", tmp_path / f"ref{trial}"
        assert main(["infer", "--model", str(mp), "--input", str(ip),
                     "--out", str(run_dir)]) == 0
        assert main(["oracle", "--model", str(mp), "--input", str(ip),
                     "--out", str(ref_dir)]) == 0
        assert main(["diff", str(run_dir / "output.json"),
                     str(ref_dir / "output.json")]) == 0
    elapsed = time.perf_counter() - t0
    budget(capsys, 4, elapsed, 60.0)
    report_line(capsys, 4, True,
                f"toy CNN bit-exact over 50 parameterizations ({elapsed:.2f}s)")


def test_criterion_5_cost_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    masks = [int.from_bytes(rng.bytes(16), "little") for _ in range(8)]
    popcount = sum(bin(m).count("1") for m in masks)
    n_reads = 23
    ledger = CostLedger(None, GEOM.group_size)
    sub = Subarray(GEOM, ledger=ledger, subarray_id=0)
    interp = Interpreter({0: sub})
    ops = [("erase", 0, 2)]
    ops += [("program", 0, 16 + i, masks[i]) for i in range(8)]
    ops += [("read", 0, int(rng.integers(16, 24)), False, False)
            for _ in range(n_reads)]
    interp.run(ops, ledger, "load", lane="sub0")
    ledger.barrier()
    want_energy = 128 * 180 + popcount * 105 + n_reads * 4.0
    want_wall = 1 * 2.4 + 8 * 5.0 + n_reads * 0.17
    ok = ledger.energy_fj("load") == want_energy and ledger.wall_ns == want_wall
    elapsed = time.perf_counter() - t0
    budget(capsys, 5, elapsed, 1.0)
    report_line(
        capsys, 5, ok,
        f"energy {ledger.energy_fj('load'):.1f} fJ == {want_energy:.1f}, "
        f"wall {ledger.wall_ns:.4f} ns == {want_wall:.4f} ({elapsed:.2f}s)",
    )


def test_criterion_6_energy_breakdown_ordering(capsys):
    rng = np.random.default_rng(606)
    model, inp = toy_cnn(rng)
    ledger = run_model(model, inp).ledger
    energy = {cat: ledger.energy_fj(cat) for cat in CATEGORIES}
    joint = energy["load"] + energy["convolution"]
    others = {c: e for c, e in energy.items() if c not in ("load", "convolution")}
    ok = all(joint > e for e in others.values())
    parts = ", ".join(f"{c} {e:.0f}" for c, e in energy.items())
    report_line(capsys, 6, ok,
                f"load+convolution {joint:.0f} fJ exceed each other category ({parts})")


def test_criterion_7_thread_determinism(capsys, tmp_path):
    rng = np.random.default_rng(707)
    model, inp = toy_cnn(rng)
    mp, ip = tmp_path / "m.json", tmp_path / "i.json"
    mp.write_text(model_to_json(model), encoding="utf-8")
    ip.write_text(tensor_to_json(inp), encoding="utf-8")
    for threads, sub in ((1, "t1"), (8, "t8")):
        assert main(["infer", "--model", str(mp), "--input", str(ip),
                     "--trace", "--threads", str(threads),
                     "--out", str(tmp_path / sub)]) == 0
    ok = True
    for name in ("output.json", "trace.jsonl", "report.json", "report.csv"):
        a = (tmp_path / "t1" / name).read_bytes()
        b = (tmp_path / "t8" / name).read_bytes()
        ok = ok and a == b
    report_line(capsys, 7, ok,
                "--threads 1 and --threads 8 outputs, traces, ledgers byte-identical")
