"""Command line front end.

    nandspin memtest [--config C] [--seed N] [--rounds N] [--out DIR]
    nandspin infer   --model M --input I --out DIR [--config C]
                     [--trace] [--threads N]
    nandspin oracle  --model M --input I [--out DIR]
    nandspin diff    A B

memtest drives one subarray with seeded random row-group writes, reads,
in-place ANDs, and counter steps, checking every result against a plain
array mirror.  infer runs a model through the in-memory pipeline and
writes output.json, report.json, and report.csv (plus trace.jsonl with
--trace) into the output directory.  oracle computes the same model on
the host-side integer reference.  diff compares two tensor files.

Exit codes: 0 success, 1 tensors differ, 2 malformed input (message
carries line and column for JSON), 3 model does not fit the array
(message names the layer), 4 simulator invariant violation.

--config (or the NANDSPIN_CONFIG environment variable) points at a JSON
file that may override the array organization and the cost table:

    {"geometry": {"device_rows": 32, "columns": 128, "group_size": 8},
     "subs_per_mat": 16, "n_mats": 16, "bus_bits": 128,
     "counter_width": 16, "buffer_limit": 256,
     "cost_params": {"read_energy_fj": 4.0}}
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Tuple

import numpy as np

from .costmodel import CostParams
from .errors import (
    CapacityExceeded,
    DegenerateRange,
    DimMismatch,
    ModelFormatError,
    NandSpinError,
)
from .model import load_tensor, model_from_json, tensor_to_json
from .reference import run_reference
from .runtime import MatModel, run_model
from .subarray import Subarray, SubarrayGeometry

EXIT_OK = 0
EXIT_DIFF = 1
EXIT_PARSE = 2
EXIT_CAPACITY = 3
EXIT_INTERNAL = 4

_ARCH_FIELDS = ("subs_per_mat", "n_mats", "bus_bits", "counter_width", "buffer_limit")


def load_run_config(path: Optional[str]) -> Tuple[MatModel, CostParams]:
    """Build the array model and cost table, applying overrides from `path`."""
    if path is None:
        path = os.environ.get("NANDSPIN_CONFIG") or None
    if path is None:
        return MatModel(), CostParams()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ModelFormatError(f"config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(
            f"config JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("config: top level must be an object")
    known = set(_ARCH_FIELDS) | {"geometry", "cost_params"}
    for key in doc:
        if key not in known:
            raise ModelFormatError(f"config: unknown key {key!r}")
    try:
        geometry = SubarrayGeometry(**doc.get("geometry", {}))
        arch_kw = {f: int(doc[f]) for f in _ARCH_FIELDS if f in doc}
        arch = MatModel(geometry=geometry, **arch_kw)
        params = CostParams(**doc.get("cost_params", {}))
        params.validate()
    except (TypeError, ValueError, NandSpinError) as exc:
        raise ModelFormatError(f"config: {exc}") from exc
    for f in _ARCH_FIELDS:
        if getattr(arch, f) < 1:
            raise ModelFormatError(f"config: {f} must be positive")
    return arch, params


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_model(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return model_from_json(fh.read())
    except OSError as exc:
        raise ModelFormatError(f"model: {exc}") from exc


def _read_tensor(path: str) -> np.ndarray:
    try:
        return load_tensor(path)
    except OSError as exc:
        raise ModelFormatError(f"tensor: {exc}") from exc


def cmd_infer(args) -> int:
    arch, params = load_run_config(args.config)
    model = _read_model(args.model)
    values = _read_tensor(args.input)
    result = run_model(
        model,
        values,
        arch=arch,
        params=params,
        threads=args.threads,
        trace=args.trace,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "output.json"), tensor_to_json(result.output))
    # worker count never changes results, so it stays out of the echo
    echo = {
        "model": os.path.basename(args.model),
        "input": os.path.basename(args.input),
    }
    report = result.ledger.report(params_echo=echo)
    _write_text(
        os.path.join(args.out, "report.json"),
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n",
    )
    _write_text(os.path.join(args.out, "report.csv"), result.ledger.report_csv())
    if args.trace:
        _write_text(os.path.join(args.out, "trace.jsonl"), result.trace.dump_jsonl())
    print(
        f"infer ok: output {list(result.output.shape)}, "
        f"{report['energy_total_fj']:.1f} fJ, wall {report['wall_latency_ns']:.2f} ns"
    )
    return EXIT_OK


def cmd_oracle(args) -> int:
    model = _read_model(args.model)
    values = _read_tensor(args.input)
    out = run_reference(model, values)
    text = tensor_to_json(out)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "output.json"), text)
        print(f"oracle ok: output {list(out.shape)}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_diff(args) -> int:
    a = _read_tensor(args.a)
    b = _read_tensor(args.b)
    if a.shape != b.shape:
        print(f"shape mismatch: {list(a.shape)} != {list(b.shape)}")
        return EXIT_DIFF
    if np.array_equal(a, b):
        print(f"identical: {a.size} values")
        return EXIT_OK
    flat_a, flat_b = a.reshape(-1), b.reshape(-1)
    bad = np.flatnonzero(flat_a != flat_b)
    print(f"{bad.size} of {a.size} values differ")
    for idx in bad[:10]:
        pos = [int(v) for v in np.unravel_index(int(idx), a.shape)]
        print(f"  at {pos}: {int(flat_a[idx])} != {int(flat_b[idx])}")
    return EXIT_DIFF


def cmd_memtest(args) -> int:
    arch, params = load_run_config(args.config)
    geom = arch.geometry
    rng = np.random.default_rng(args.seed)
    sub = Subarray(
        geom, params=params, buffer_capacity=4, counter_width=arch.counter_width
    )
    mirror = np.zeros((geom.bit_rows, geom.columns), dtype=np.uint8)
    counts = np.zeros(geom.columns, dtype=np.int64)
    gs = geom.group_size
    checks = 0

    def fail(what: str) -> int:
        print(f"memtest FAILED after {checks} checks: {what}")
        return EXIT_INTERNAL

    for _ in range(args.rounds):
        dr = int(rng.integers(geom.device_rows))
        data = rng.integers(0, 2, size=(gs, geom.columns), dtype=np.uint8)
        sub.write_row_group(dr, data)
        mirror[dr * gs : (dr + 1) * gs] = data
        for _ in range(4):
            row = int(rng.integers(geom.bit_rows))
            if not np.array_equal(sub.read_bit_row(row), mirror[row]):
                return fail(f"read of bit row {row}")
            checks += 1
            operand = rng.integers(0, 2, size=geom.columns, dtype=np.uint8)
            sub.load_buffer_row(0, operand)
            if not np.array_equal(sub.and_bit_row(row, 0), mirror[row] & operand):
                return fail(f"in-place AND on bit row {row}")
            checks += 1
        row = int(rng.integers(geom.bit_rows))
        sub.accumulate_counters(mirror[row])
        counts += mirror[row]
        if not np.array_equal(sub.counter_values(), counts):
            return fail("counter accumulate")
        checks += 1
        if rng.integers(2):
            lsb = sub.counter_lsb_and_shift()
            if not np.array_equal(lsb, (counts & 1).astype(np.uint8)):
                return fail("counter shift lsb")
            counts >>= 1
            checks += 1
    sub.reset_counters()
    if not sub.counters_zero():
        return fail("counter reset")
    print(f"memtest ok: {checks} checks, seed {args.seed}, rounds {args.rounds}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = sub.ledger.report(params_echo={"seed": args.seed, "rounds": args.rounds})
        _write_text(
            os.path.join(args.out, "report.json"),
            json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n",
        )
        _write_text(os.path.join(args.out, "report.csv"), sub.ledger.report_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nandspin", description="In-memory CNN pipeline simulator"
    )
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("memtest", help="seeded memory-mode self check")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=64)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_memtest)

    p = sub.add_parser("infer", help="run a model in-memory")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("oracle", help="run a model on the host reference")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("diff", help="compare two tensor files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelFormatError, DimMismatch, DegenerateRange) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except CapacityExceeded as exc:
        print(f"capacity: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NandSpinError as exc:
        print(f"invariant: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
