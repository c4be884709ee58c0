"""Model description and tensor file formats.

A model is an ordered list of layers over unsigned fixed-point tensors:

    {"layers": [{"kind": "conv", "dims": [M, kh, kw], "stride": 1,
                 "k_i": 4, "k_w": 4, "k": 4, "qmin": 0.0, "qmax": 16.0,
                 "bn": {"mu": 0.0, "sigma": 1.0, "gamma": 1.0,
                        "beta": 0.0, "eps": 1e-5},
                 "weights": [[[[...]]]]},
                {"kind": "maxpool", "dims": [2, 2], "stride": 2},
                {"kind": "fc", "dims": [10], ...}]}

dims per kind: conv [out_channels, kh, kw]; pools [wh, ww]; fc [d_out].
Conv/fc weights are unsigned k_w-bit integers (nested lists, conv indexed
[out][in][ky][kx], fc [out][in]); batch-norm fields are scalars or
per-output-channel lists.  "k" is the layer's output width; it must equal
the next layer's k_i.  Pools carry no weights or bn and keep their input
width.  An fc layer consumes the flattened (channel-major) input.

Tensors travel as JSON {"dims": [...], "values": [...]} with row-major
values (nested or flat), or as flat binary little-endian int32 words:
ndims, dims..., values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateRange, DimMismatch, ModelFormatError

LAYER_KINDS = ("conv", "avgpool", "maxpool", "minpool", "fc")
POOL_KINDS = ("avgpool", "maxpool", "minpool")


@dataclass
class BatchNorm:
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float

    @staticmethod
    def identity(channels: int) -> "BatchNorm":
        return BatchNorm(
            mu=np.zeros(channels),
            sigma=np.ones(channels),
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            eps=0.0,
        )


@dataclass
class LayerSpec:
    kind: str
    dims: Tuple[int, ...]
    stride: int = 1
    k_i: int = 8
    k_w: int = 1
    k: int = 8
    qmin: float = 0.0
    qmax: float = 1.0
    bn: Optional[BatchNorm] = None
    weights: Optional[np.ndarray] = None
    name: str = ""


@dataclass
class LayerShape:
    """Resolved per-layer geometry from walking the input dims forward."""

    in_dims: Tuple[int, int, int]
    out_dims: Tuple[int, int, int]
    window: Tuple[int, int]
    in_channels: int
    out_channels: int


@dataclass
class ModelSpec:
    layers: List[LayerSpec] = field(default_factory=list)

    def shapes(self, input_dims: Sequence[int]) -> List[LayerShape]:
        """Validate the layer chain against input dims; resolve geometry."""
        dims = _as_chw(input_dims)
        shapes = []
        for idx, layer in enumerate(self.layers):
            shapes.append(_walk_layer(layer, dims, idx))
            dims = shapes[-1].out_dims
            nxt = self.layers[idx + 1] if idx + 1 < len(self.layers) else None
            out_k = layer.k if layer.kind in ("conv", "fc") else layer.k_i
            if nxt is not None and nxt.k_i != out_k:
                raise ModelFormatError(
                    f"layer {idx + 1} ({nxt.kind}): k_i={nxt.k_i} does not match "
                    f"previous layer output width {out_k}"
                )
        return shapes


def _as_chw(dims: Sequence[int]) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 3:
        return dims
    if len(dims) == 2:
        return (1,) + dims
    if len(dims) == 1:
        return (dims[0], 1, 1)
    raise DimMismatch(f"input tensor must be 1-3 dimensional, got {dims}")


def _walk_layer(layer: LayerSpec, dims: Tuple[int, int, int], idx: int) -> LayerShape:
    c, h, w = dims
    tag = f"layer {idx} ({layer.kind})"
    if not 1 <= layer.k_i <= 8:
        raise ModelFormatError(f"{tag}: k_i={layer.k_i} outside 1..8")
    if layer.stride < 1:
        raise ModelFormatError(f"{tag}: stride must be positive")
    if layer.kind == "conv":
        m, kh, kw = layer.dims
        if kh > h or kw > w:
            raise DimMismatch(f"{tag}: window {kh}x{kw} exceeds input {h}x{w}")
        out = (
            m,
            (h - kh) // layer.stride + 1,
            (w - kw) // layer.stride + 1,
        )
        _check_conv_fields(layer, (m, c, kh, kw), tag)
        return LayerShape(dims, out, (kh, kw), c, m)
    if layer.kind in POOL_KINDS:
        wh, ww = layer.dims
        if (h - wh) % layer.stride or (w - ww) % layer.stride:
            raise DimMismatch(
                f"{tag}: window {wh}x{ww} stride {layer.stride} does not tile {h}x{w}"
            )
        if wh > h or ww > w:
            raise DimMismatch(f"{tag}: window {wh}x{ww} exceeds input {h}x{w}")
        out = (c, (h - wh) // layer.stride + 1, (w - ww) // layer.stride + 1)
        return LayerShape(dims, out, (wh, ww), c, c)
    if layer.kind == "fc":
        (d_out,) = layer.dims
        d_in = c * h * w
        _check_conv_fields(layer, (d_out, d_in), tag)
        return LayerShape(dims, (d_out, 1, 1), (1, 1), d_in, d_out)
    raise ModelFormatError(f"{tag}: unknown kind")


def _check_conv_fields(layer: LayerSpec, wshape: Tuple[int, ...], tag: str) -> None:
    if not 1 <= layer.k_w <= 8:
        raise ModelFormatError(f"{tag}: k_w={layer.k_w} outside 1..8")
    if not 1 <= layer.k <= 8:
        raise ModelFormatError(f"{tag}: k={layer.k} outside 1..8")
    if not layer.qmax > layer.qmin:
        raise DegenerateRange(f"{tag}: empty quantization range")
    if layer.weights is None:
        raise ModelFormatError(f"{tag}: missing weights")
    if layer.weights.shape != wshape:
        raise DimMismatch(
            f"{tag}: weights shape {layer.weights.shape} != expected {wshape}"
        )
    if layer.weights.min() < 0 or layer.weights.max() >= (1 << layer.k_w):
        raise ModelFormatError(f"{tag}: weight values outside {layer.k_w}-bit range")
    if layer.bn is None:
        raise ModelFormatError(f"{tag}: missing bn block")
    m = wshape[0]
    for fname in ("mu", "sigma", "gamma", "beta"):
        arr = getattr(layer.bn, fname)
        if arr.shape not in ((), (1,), (m,)):
            raise ModelFormatError(f"{tag}: bn.{fname} length must be 1 or {m}")


def _bn_from_json(block, channels: int, tag: str) -> BatchNorm:
    if not isinstance(block, dict):
        raise ModelFormatError(f"{tag}: bn must be an object")
    vals = {}
    for fname in ("mu", "sigma", "gamma", "beta"):
        if fname not in block:
            raise ModelFormatError(f"{tag}: bn.{fname} missing")
        arr = np.asarray(block[fname], dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(channels, float(arr))
        if arr.shape != (channels,):
            raise ModelFormatError(f"{tag}: bn.{fname} length must be 1 or {channels}")
        vals[fname] = arr
    return BatchNorm(eps=float(block.get("eps", 1e-5)), **vals)


def model_from_json(text: str) -> ModelSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(
            f"model JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ModelFormatError("model JSON must be an object with a 'layers' list")
    layers = []
    for idx, entry in enumerate(doc["layers"]):
        tag = f"layer {idx}"
        if not isinstance(entry, dict):
            raise ModelFormatError(f"{tag}: must be an object")
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"{tag}: kind must be one of {LAYER_KINDS}")
        try:
            dims = tuple(int(d) for d in entry["dims"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{tag}: bad dims") from exc
        expect_dims = {"conv": 3, "avgpool": 2, "maxpool": 2, "minpool": 2, "fc": 1}
        if len(dims) != expect_dims[kind] or min(dims) < 1:
            raise ModelFormatError(f"{tag}: dims {dims} invalid for {kind}")
        layer = LayerSpec(
            kind=kind,
            dims=dims,
            stride=int(entry.get("stride", 1)),
            k_i=int(entry.get("k_i", 8)),
            name=f"{tag} ({kind})",
        )
        if kind in ("conv", "fc"):
            for fname in ("k_w", "k", "qmin", "qmax", "weights", "bn"):
                if fname not in entry:
                    raise ModelFormatError(f"{tag}: {fname} missing")
            layer.k_w = int(entry["k_w"])
            layer.k = int(entry["k"])
            layer.qmin = float(entry["qmin"])
            layer.qmax = float(entry["qmax"])
            try:
                layer.weights = np.asarray(entry["weights"], dtype=np.int64)
            except ValueError as exc:
                raise ModelFormatError(f"{tag}: ragged weights") from exc
            want_ndim = 4 if kind == "conv" else 2
            if layer.weights.ndim != want_ndim:
                raise ModelFormatError(
                    f"{tag}: weights must be {want_ndim}-dimensional"
                )
            layer.bn = _bn_from_json(entry["bn"], layer.weights.shape[0], tag)
        layers.append(layer)
    return ModelSpec(layers)


def model_to_json(model: ModelSpec) -> str:
    doc = {"layers": []}
    for layer in model.layers:
        entry = {"kind": layer.kind, "dims": list(layer.dims), "stride": layer.stride,
                 "k_i": layer.k_i}
        if layer.kind in ("conv", "fc"):
            entry.update(
                k_w=layer.k_w,
                k=layer.k,
                qmin=layer.qmin,
                qmax=layer.qmax,
                weights=layer.weights.tolist(),
                bn={
                    "mu": layer.bn.mu.tolist(),
                    "sigma": layer.bn.sigma.tolist(),
                    "gamma": layer.bn.gamma.tolist(),
                    "beta": layer.bn.beta.tolist(),
                    "eps": layer.bn.eps,
                },
            )
        doc["layers"].append(entry)
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


# -- tensors -----------------------------------------------------------------


def tensor_to_json(values: np.ndarray) -> str:
    doc = {
        "dims": list(values.shape),
        "values": np.asarray(values).reshape(-1).tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def tensor_from_json(text: str) -> np.ndarray:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(
            f"tensor JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or "dims" not in doc or "values" not in doc:
        raise ModelFormatError("tensor JSON must carry 'dims' and 'values'")
    dims = tuple(int(d) for d in doc["dims"])
    try:
        arr = np.asarray(doc["values"], dtype=np.int64).reshape(dims)
    except ValueError as exc:
        raise ModelFormatError(f"tensor values do not fill dims {dims}") from exc
    return arr


def tensor_to_bin(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size and (arr.min() < -(1 << 31) or arr.max() >= (1 << 31)):
        raise ModelFormatError("binary tensor values must fit int32")
    head = struct.pack("<i", arr.ndim) + struct.pack(f"<{arr.ndim}i", *arr.shape)
    return head + arr.astype("<i4").tobytes()


def tensor_from_bin(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise ModelFormatError("binary tensor shorter than its header")
    (ndim,) = struct.unpack_from("<i", blob, 0)
    if not 0 < ndim <= 4 or len(blob) < 4 + 4 * ndim:
        raise ModelFormatError(f"binary tensor header invalid (ndim={ndim})")
    dims = struct.unpack_from(f"<{ndim}i", blob, 4)
    count = int(np.prod(dims))
    want = 4 + 4 * ndim + 4 * count
    if min(dims) < 1 or len(blob) != want:
        raise ModelFormatError(
            f"binary tensor length {len(blob)} != expected {want} for dims {dims}"
        )
    arr = np.frombuffer(blob, dtype="<i4", offset=4 + 4 * ndim)
    return arr.astype(np.int64).reshape(dims)


def load_tensor(path: str) -> np.ndarray:
    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            return tensor_from_bin(fh.read())
    with open(path, "r", encoding="utf-8") as fh:
        return tensor_from_json(fh.read())
