"""Whole-model execution on mats of subarrays.

Layers are lowered onto groups of subarrays, one group per mat: the input
bit planes occupy one subarray each, window counting streams through the
per-column counters, and the accumulated sums move over the bus into a
post-processing subarray that runs the shared fixed-point chain
(scale/offset, sign-masked rectification, output quantization with
compare/select clamping) entirely with the bit-serial primitives.  Output
channels are distributed round-robin over the mats; groups never share
subarrays, so they can execute concurrently and their ledgers merge as
parallel lanes in a fixed order, which keeps outputs, traces, and cost
reports identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bitplane import bits_from_mask
from .costmodel import CostLedger, CostParams
from .errors import CapacityExceeded, LayoutError
from .model import POOL_KINDS, LayerShape, LayerSpec, ModelSpec
from .primitives import (
    ColumnVectorLayout,
    ConvEngine,
    MicroOp,
    Term,
    build_add,
    build_compare,
    build_mul,
    build_select,
    build_store,
    groups_covering,
)
from .reference import check_input_range, stage_for_layer
from .scheme import ConvStage, reciprocal_constants
from .schedule import Interpreter, TraceRecorder
from .subarray import Subarray, SubarrayGeometry

RELU_BUF = 3  # compare uses 0..2, select 0..1; the mask row stays clear of both


@dataclass(frozen=True)
class MatModel:
    """Array organization: mats of subarrays sharing a buffer and a bus."""

    geometry: SubarrayGeometry = SubarrayGeometry()
    subs_per_mat: int = 16  # 4x4 subarrays per mat
    n_mats: int = 16  # 4x4 mats per group
    bus_bits: int = 128
    counter_width: int = 16
    buffer_limit: int = 256

    @property
    def bus_beats(self) -> int:
        return max(1, -(-self.geometry.columns // self.bus_bits))


@dataclass(frozen=True)
class GroupPlan:
    """One mat's share of a layer: which units it computes and on what."""

    mat: int
    units: Tuple[int, ...]
    plane_sids: Tuple[int, ...]
    acc_sid: int
    post_sid: int


@dataclass
class LayerPlan:
    layer: LayerSpec
    shape: LayerShape
    groups: List[GroupPlan]
    stage: Optional[ConvStage]
    conv_dims: Optional[Tuple[int, int, int, int, int, int, int]]
    weights4: Optional[np.ndarray]
    buffer_rows: int
    period_table: Optional[List[List[Tuple[int, int]]]]


@dataclass
class MappingPlan:
    arch: MatModel
    layers: List[LayerPlan]


class PostRegions:
    """Row layout of the post-processing subarray for one conv/fc layer.

    Two arenas alternate between producer and consumer roles along the
    chain (sums -> first product -> pre-activation -> rectified value ->
    second product -> quantization stage), each erased right before its
    next role; the constant rows and the compare bookkeeping group sit
    apart and survive the per-row cycling.
    """

    def __init__(self, stage: ConvStage, geometry: SubarrayGeometry):
        gs = geometry.group_size
        self.blank_row = 0  # group 0 is never programmed
        self._next_group = 1

        def take(rows_needed: int) -> Tuple[int, ...]:
            n_groups = -(-rows_needed // gs)
            base = self._next_group * gs
            self._next_group += n_groups
            return tuple(range(base, base + rows_needed))

        a_sz = max(stage.sum_bits, stage.t2, stage.prod2_bits)
        b_sz = max(stage.prod1_bits, stage.t2 - 1, stage.t3)
        self.arena_a = take(a_sz)
        self.arena_b = take(b_sz)
        self.sel_tmp = take(stage.k_out)
        self.q_out = take(stage.k_out)
        self.ones = take(stage.k_out)
        self.zeros = take(max(len(stage.overflow_rows), stage.k_out, 1))
        tag_base = self._next_group * gs
        self._next_group += 1
        self.tag_row, self.result_row = tag_base, tag_base + 1
        total = geometry.bit_rows // gs
        if self._next_group > total:
            raise LayoutError(
                f"post-processing needs {self._next_group} row groups, "
                f"subarray has {total}"
            )


def _erases(sid: int, rows: Sequence[int], gs: int) -> List[MicroOp]:
    return [("erase", sid, grp) for grp in groups_covering(rows, gs)]


def _post_ops(
    stage: ConvStage,
    regions: PostRegions,
    layout: ColumnVectorLayout,
    och: int,
    geometry: SubarrayGeometry,
) -> Tuple[List[MicroOp], List[MicroOp], Tuple[int, ...], Tuple[int, ...]]:
    """Schedules for the normalization stage and the quantization stage.

    Returns (norm_ops, quant_ops, sum_rows, output_rows); the caller
    programs the transferred sums into sum_rows beforehand and senses
    output_rows afterwards.
    """
    sid = layout.subarray_id
    gs = geometry.group_size
    pairs = layout.identity_pairs()
    a, b = regions.arena_a, regions.arena_b
    s_rows = a[: stage.sum_bits]
    prod1 = b[: stage.prod1_bits]
    p_rows = a[: stage.t2]
    r_rows = b[: stage.t2 - 1]
    rp_rows = tuple(r_rows[stage.shift_r :]) or (regions.blank_row,)
    prod2 = a[: stage.prod2_bits]
    n_rows = b[: stage.t3]

    s1, o1 = stage.s1[och], stage.o1[och]
    neg = s1 < 0
    const_p = o1
    if neg:
        # complemented product planes plus this constant give -|s1|*sum
        const_p += (1 << stage.t2) - (1 << stage.prod1_bits) + 1
    const_p %= 1 << stage.t2

    lay_s = ColumnVectorLayout(sid, layout.col_start, layout.n_cols, (s_rows,))
    lay_rp = ColumnVectorLayout(sid, layout.col_start, layout.n_cols, (rp_rows,))

    norm: List[MicroOp] = []
    norm += _erases(sid, b, gs)
    norm += build_mul(lay_s, abs(s1), stage.mb1, out_rows=prod1)
    norm += _erases(sid, a, gs)
    norm += build_add(
        layout,
        [Term(tuple(prod1), invert=neg)],
        out_rows=p_rows,
        n_bits=stage.t2,
        const=const_p,
        blank_row=regions.blank_row,
    )
    # rectify: zero every column whose sign row is set
    norm += _erases(sid, b, gs)
    norm.append(("read", sid, p_rows[stage.t2 - 1], False, False))
    norm.append(("bufload_latch", sid, RELU_BUF, True))
    for bit in range(stage.t2 - 1):
        norm.append(("and", sid, p_rows[bit], RELU_BUF, False, False))
        norm.append(("program_gather", sid, r_rows[bit], pairs))

    quant: List[MicroOp] = []
    quant += _erases(sid, a, gs)
    quant += build_mul(lay_rp, stage.c1, stage.mb2, out_rows=prod2)
    quant += _erases(sid, b, gs)
    quant += build_add(
        layout,
        [Term(tuple(prod2))],
        out_rows=n_rows,
        n_bits=stage.t3,
        const=stage.c0 % (1 << stage.t3),
        blank_row=regions.blank_row,
    )
    ov_rows = tuple(n_rows[i] for i in stage.overflow_rows)
    q_un = tuple(n_rows[i] for i in stage.q_rows)
    cmp_lay = ColumnVectorLayout(
        sid,
        layout.col_start,
        layout.n_cols,
        (ov_rows, tuple(regions.zeros[: len(ov_rows)])),
        (),
        regions.tag_row,
        regions.result_row,
    )
    quant += build_compare(cmp_lay, geometry)
    quant += _erases(sid, regions.sel_tmp, gs)
    quant += build_select(
        layout, regions.ones, q_un, regions.sel_tmp, flag_row=regions.result_row
    )
    quant += _erases(sid, regions.q_out, gs)
    quant += build_select(
        layout,
        tuple(regions.zeros[: stage.k_out]),
        regions.sel_tmp,
        regions.q_out,
        flag_row=n_rows[stage.t3 - 1],
    )
    return norm, quant, s_rows, regions.q_out


def _plane_bits(values: np.ndarray, k: int) -> List[np.ndarray]:
    return [((values >> n) & 1).astype(np.uint8) for n in range(k)]


def _read_rows(
    interp: Interpreter,
    ledger: CostLedger,
    trace: Optional[TraceRecorder],
    sid: int,
    rows: Sequence[int],
    n_cols: int,
    beats: int,
) -> np.ndarray:
    lane = interp.subarrays[sid].lane
    out = np.zeros((len(rows), n_cols), dtype=np.uint8)
    for i, row in enumerate(rows):
        interp.run(
            [("read", sid, row, False, False), ("bus", beats)],
            ledger,
            "transfer",
            trace,
            lane=lane,
        )
        out[i] = bits_from_mask(interp.latch, n_cols)
    ledger.barrier()
    return out


def _bits_to_values(bits: np.ndarray) -> np.ndarray:
    out = np.zeros(bits.shape[1], dtype=np.int64)
    for i in range(bits.shape[0]):
        out |= bits[i].astype(np.int64) << i
    return out


# -- planning ----------------------------------------------------------------


def _norm_conv(layer: LayerSpec, shape: LayerShape):
    """(C, H, W, kh, kw, stride, M) plus 4-d weights, fc folded to 1x1."""
    if layer.kind == "fc":
        c, h, w = shape.in_dims
        d_in, d_out = c * h * w, shape.out_channels
        return (d_in, 1, 1, 1, 1, 1, d_out), layer.weights.reshape(
            d_out, d_in, 1, 1
        )
    c, h, w = shape.in_dims
    kh, kw = shape.window
    return (c, h, w, kh, kw, layer.stride, shape.out_channels), layer.weights


def _trial_engine(arch: MatModel, conv_dims, k_i: int, buffer_rows: int) -> ConvEngine:
    c, h, w, kh, kw, stride, _ = conv_dims
    ledger = CostLedger(None, arch.geometry.group_size)
    subs = {
        i: Subarray(
            arch.geometry,
            ledger=ledger,
            buffer_capacity=max(4, buffer_rows),
            counter_width=arch.counter_width,
            subarray_id=i,
        )
        for i in range(k_i + 1)
    }
    return ConvEngine(
        Interpreter(subs),
        ledger,
        list(range(k_i)),
        k_i,
        in_h=h,
        in_w=w,
        channels=c,
        kh=kh,
        kw=kw,
        stride=stride,
        n_weight_planes=1,
    )


class PoolRegions:
    """Row layout of a pooling subarray: window candidates as column
    vectors plus either rotating winner regions (max/min) or the
    sum/scale arenas (average)."""

    def __init__(self, layer: LayerSpec, shape: LayerShape, geometry: SubarrayGeometry):
        gs = geometry.group_size
        wh, ww = shape.window
        self.wsize = wh * ww
        k = layer.k_i
        self.blank_row = 0
        self._next_group = 1

        def take(rows_needed: int) -> Tuple[int, ...]:
            n_groups = -(-rows_needed // gs)
            base = self._next_group * gs
            self._next_group += n_groups
            return tuple(range(base, base + rows_needed))

        flat = take(self.wsize * k)
        self.cands = tuple(flat[t * k : (t + 1) * k] for t in range(self.wsize))
        if layer.kind == "avgpool":
            smax = self.wsize * ((1 << k) - 1)
            self.recip, self.frac = reciprocal_constants(self.wsize, smax)
            ts = max(1, smax.bit_length())
            rb = max(1, self.recip.bit_length())
            self.s_rows = take(ts)
            self.prod = take(ts + rb)
            n_max = smax * self.recip + (1 << (self.frac - 1))
            nb = max(n_max.bit_length(), self.frac + k)
            self.n_rows = take(nb)
            self.q_rows = self.n_rows[self.frac : self.frac + k]
        else:
            self.cur_a = take(k)
            self.cur_b = take(k)
            tag_base = self._next_group * gs
            self._next_group += 1
            self.tag_row, self.result_row = tag_base, tag_base + 1
        total = geometry.bit_rows // gs
        if self._next_group > total:
            raise LayoutError(
                f"pooling needs {self._next_group} row groups, subarray has {total}"
            )


def plan_mapping(
    model: ModelSpec, arch: MatModel, input_dims: Sequence[int]
) -> MappingPlan:
    """Assign every layer to mats; validates capacity before any execution."""
    shapes = model.shapes(input_dims)
    plans: List[LayerPlan] = []
    for idx, (layer, shape) in enumerate(zip(model.layers, shapes)):
        tag = layer.name or f"layer {idx} ({layer.kind})"
        n_units = shape.out_channels
        n_groups = min(n_units, arch.n_mats)
        if layer.kind in POOL_KINDS:
            try:
                PoolRegions(layer, shape, arch.geometry)
            except LayoutError as exc:
                raise CapacityExceeded(f"{tag}: {exc}") from exc
            groups = [
                GroupPlan(
                    mat=g,
                    units=tuple(range(g, n_units, n_groups)),
                    plane_sids=(),
                    acc_sid=-1,
                    post_sid=g * arch.subs_per_mat,
                )
                for g in range(n_groups)
            ]
            plans.append(
                LayerPlan(layer, shape, groups, None, None, None, 0, None)
            )
            continue
        conv_dims, weights4 = _norm_conv(layer, shape)
        c = conv_dims[0]
        kh, kw = conv_dims[3], conv_dims[4]
        buffer_rows = c * kh * layer.k_w
        if buffer_rows > arch.buffer_limit:
            raise CapacityExceeded(
                f"{tag}: {buffer_rows} weight tiles exceed the "
                f"{arch.buffer_limit}-row buffer"
            )
        if layer.k_i + 2 > arch.subs_per_mat:
            raise CapacityExceeded(f"{tag}: needs more subarrays than one mat holds")
        stage = stage_for_layer(layer, shape)
        try:
            trial = _trial_engine(arch, conv_dims, layer.k_i, buffer_rows)
            PostRegions(stage, arch.geometry)
        except LayoutError as exc:
            raise CapacityExceeded(f"{tag}: {exc}") from exc
        groups = []
        for g in range(n_groups):
            base = g * arch.subs_per_mat
            groups.append(
                GroupPlan(
                    mat=g,
                    units=tuple(range(g, n_units, n_groups)),
                    plane_sids=tuple(range(base, base + layer.k_i)),
                    acc_sid=base + layer.k_i,
                    post_sid=base + layer.k_i + 1,
                )
            )
        plans.append(
            LayerPlan(
                layer,
                shape,
                groups,
                stage,
                conv_dims,
                weights4,
                buffer_rows,
                trial.table,
            )
        )
    return MappingPlan(arch, plans)


# -- execution ---------------------------------------------------------------


@dataclass
class GroupResult:
    ledger: CostLedger
    trace: Optional[TraceRecorder]
    unit_outputs: List[np.ndarray]


def _run_conv_group(
    lp: LayerPlan,
    group: GroupPlan,
    values: np.ndarray,
    arch: MatModel,
    params: Optional[CostParams],
    want_trace: bool,
) -> GroupResult:
    geometry = arch.geometry
    gs = geometry.group_size
    ledger = CostLedger(params, gs)
    trace = TraceRecorder() if want_trace else None
    c, h, w, kh, kw, stride, _ = lp.conv_dims
    layer, stage = lp.layer, lp.stage
    subs = {}
    for sid in group.plane_sids:
        subs[sid] = Subarray(
            geometry,
            ledger=ledger,
            buffer_capacity=max(4, lp.buffer_rows),
            counter_width=arch.counter_width,
            subarray_id=sid,
        )
    for sid in (group.acc_sid, group.post_sid):
        subs[sid] = Subarray(
            geometry,
            ledger=ledger,
            buffer_capacity=4,
            counter_width=arch.counter_width,
            subarray_id=sid,
        )
    interp = Interpreter(subs)
    engine = ConvEngine(
        interp,
        ledger,
        list(group.plane_sids),
        group.acc_sid,
        in_h=h,
        in_w=w,
        channels=c,
        kh=kh,
        kw=kw,
        stride=stride,
        n_weight_planes=layer.k_w,
        bus_beats=arch.bus_beats,
        trace=trace,
    )
    engine.prepare()
    engine.load_inputs(_plane_bits(values.reshape(c, h, w), layer.k_i))
    regions = PostRegions(stage, geometry)
    out_w = engine.out_w
    layout = ColumnVectorLayout(group.post_sid, 0, out_w)
    post_lane = subs[group.post_sid].lane
    # the clamp constant rows are programmed once for the whole layer
    ones_ops = [
        ("program", group.post_sid, row, layout.active_mask()) for row in regions.ones
    ]
    interp.run(ones_ops, ledger, "quantization", trace)
    ledger.barrier()

    outputs = []
    for och in group.units:
        engine.load_weights(_plane_bits(lp.weights4[och], layer.k_w))
        norm_ops, quant_ops, s_rows, q_rows = _post_ops(
            stage, regions, layout, och, geometry
        )
        out_arr = np.zeros((engine.out_h, out_w), dtype=np.int64)
        for yp in range(engine.out_h):
            partial, _ = engine.run_output_row(yp)
            xfer: List[MicroOp] = _erases(group.post_sid, s_rows, gs)
            for src, dst in zip(partial, s_rows):
                xfer.append(("read", group.acc_sid, src, False, False))
                xfer.append(("bus", arch.bus_beats))
                xfer.append(("program_latch", group.post_sid, dst))
            interp.run(xfer, ledger, "transfer", trace, lane=post_lane)
            ledger.barrier()
            engine.release_row()
            interp.run(norm_ops, ledger, "batch_norm", trace)
            interp.run(quant_ops, ledger, "quantization", trace)
            ledger.barrier()
            bits = _read_rows(
                interp, ledger, trace, group.post_sid, q_rows, out_w, arch.bus_beats
            )
            out_arr[yp] = _bits_to_values(bits)
        outputs.append(out_arr)
    return GroupResult(ledger, trace, outputs)


def _run_pool_group(
    lp: LayerPlan,
    group: GroupPlan,
    values: np.ndarray,
    arch: MatModel,
    params: Optional[CostParams],
    want_trace: bool,
) -> GroupResult:
    geometry = arch.geometry
    gs = geometry.group_size
    ledger = CostLedger(params, gs)
    trace = TraceRecorder() if want_trace else None
    layer, shape = lp.layer, lp.shape
    sid = group.post_sid
    sub = Subarray(
        geometry,
        ledger=ledger,
        buffer_capacity=4,
        counter_width=arch.counter_width,
        subarray_id=sid,
    )
    interp = Interpreter({sid: sub})
    regions = PoolRegions(layer, shape, geometry)
    wh, ww = shape.window
    stride = layer.stride
    k = layer.k_i
    _, oh, ow = shape.out_dims
    positions = [(y, x) for y in range(oh) for x in range(ow)]
    chunk_len = geometry.columns

    outputs = []
    for ch in group.units:
        out_arr = np.zeros((oh, ow), dtype=np.int64)
        plane = values[ch]
        for start in range(0, len(positions), chunk_len):
            chunk = positions[start : start + chunk_len]
            n = len(chunk)
            layout = ColumnVectorLayout(sid, 0, n, regions.cands)
            cand_vals = np.zeros((regions.wsize, n), dtype=np.int64)
            for j, (y, x) in enumerate(chunk):
                win = plane[y * stride : y * stride + wh, x * stride : x * stride + ww]
                cand_vals[:, j] = win.reshape(-1)
            interp.run(
                build_store(layout, cand_vals, geometry), ledger, "load", trace
            )
            ledger.barrier()
            if layer.kind == "avgpool":
                ops: List[MicroOp] = []
                ops += _erases(sid, regions.s_rows, gs)
                ops += build_add(
                    layout,
                    [Term(rows) for rows in regions.cands],
                    out_rows=regions.s_rows,
                    n_bits=len(regions.s_rows),
                )
                lay_s = ColumnVectorLayout(sid, 0, n, (regions.s_rows,))
                ops += _erases(sid, regions.prod, gs)
                ops += build_mul(
                    lay_s,
                    regions.recip,
                    max(1, regions.recip.bit_length()),
                    out_rows=regions.prod,
                )
                ops += _erases(sid, regions.n_rows, gs)
                ops += build_add(
                    layout,
                    [Term(regions.prod)],
                    out_rows=regions.n_rows,
                    n_bits=len(regions.n_rows),
                    const=1 << (regions.frac - 1),
                    blank_row=regions.blank_row,
                )
                interp.run(ops, ledger, "pooling_compare", trace)
                ledger.barrier()
                result_rows = regions.q_rows
            else:
                invert = layer.kind == "minpool"
                cur = regions.cands[0]
                nxt_cycle = (regions.cur_a, regions.cur_b)
                ops = []
                for t in range(1, regions.wsize):
                    cmp_lay = ColumnVectorLayout(
                        sid,
                        0,
                        n,
                        (regions.cands[t], cur),
                        (),
                        regions.tag_row,
                        regions.result_row,
                    )
                    ops += build_compare(cmp_lay, geometry)
                    target = nxt_cycle[(t - 1) % 2]
                    ops += _erases(sid, target, gs)
                    ops += build_select(
                        layout,
                        regions.cands[t],
                        cur,
                        target,
                        flag_row=regions.result_row,
                        invert_flag=invert,
                    )
                    cur = target
                if ops:
                    interp.run(ops, ledger, "pooling_compare", trace)
                    ledger.barrier()
                result_rows = cur
            bits = _read_rows(
                interp, ledger, trace, sid, result_rows, n, arch.bus_beats
            )
            vals = _bits_to_values(bits)
            for j, (y, x) in enumerate(chunk):
                out_arr[y, x] = vals[j]
        outputs.append(out_arr)
    return GroupResult(ledger, trace, outputs)


@dataclass
class RunResult:
    output: np.ndarray
    ledger: CostLedger
    trace: Optional[TraceRecorder]


def run_model(
    model: ModelSpec,
    values: np.ndarray,
    *,
    arch: Optional[MatModel] = None,
    params: Optional[CostParams] = None,
    threads: int = 1,
    trace: bool = False,
) -> RunResult:
    """Execute the model in-memory; identical results for any thread count."""
    arch = arch or MatModel()
    values = np.asarray(values, dtype=np.int64)
    plan = plan_mapping(model, arch, values.shape)
    gs = arch.geometry.group_size
    master = CostLedger(params, gs)
    mtrace = TraceRecorder() if trace else None
    cur = values
    for lp in plan.layers:
        check_input_range(cur, lp.layer.k_i, lp.layer.name or lp.layer.kind)
        cur = cur.reshape(lp.shape.in_dims)
        runner = _run_pool_group if lp.layer.kind in POOL_KINDS else _run_conv_group
        tasks = [(lp, g, cur, arch, params, trace) for g in lp.groups]
        if threads > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda args: runner(*args), tasks))
        else:
            results = [runner(*args) for args in tasks]
        layer_ledger = CostLedger(params, gs)
        layer_ledger.absorb_parallel([r.ledger for r in results])
        master.absorb_serial(layer_ledger)
        if mtrace is not None:
            for r in results:
                mtrace.extend(r.trace)
        out = np.zeros(lp.shape.out_dims, dtype=np.int64)
        for g, r in zip(lp.groups, results):
            for unit, arr in zip(g.units, r.unit_outputs):
                out[unit] = arr
        cur = out
    if model.layers and model.layers[-1].kind == "fc":
        cur = cur.reshape(-1)
    return RunResult(cur, master, mtrace)


def run_conv_layer(layer: LayerSpec, values: np.ndarray, **kw) -> np.ndarray:
    return run_model(ModelSpec([layer]), values, **kw).output


def run_pool_layer(layer: LayerSpec, values: np.ndarray, **kw) -> np.ndarray:
    return run_model(ModelSpec([layer]), values, **kw).output


def run_fc_layer(layer: LayerSpec, values: np.ndarray, **kw) -> np.ndarray:
    return run_model(ModelSpec([layer]), values, **kw).output
