"""Pure-integer reference pipeline.

Evaluates a model with direct integer arithmetic and no simulation: window
sums as sliding dot products, pooling with plain max/min and round-half-up
division, and the post-processing chain from the shared stage constants.
The in-memory runtime must reproduce these outputs bit for bit; only the
constants are shared, never the arithmetic route.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .errors import ModelFormatError
from .model import POOL_KINDS, LayerShape, LayerSpec, ModelSpec
from .scheme import ConvStage, apply_stage_reference, derive_conv_stage


def layer_taps(layer: LayerSpec, shape: LayerShape) -> int:
    """Number of multiply taps feeding one output value."""
    kh, kw = shape.window
    return kh * kw * shape.in_channels


def layer_sum_max(layer: LayerSpec, shape: LayerShape) -> int:
    """Worst-case window sum; sizes every width on both execution paths."""
    return ((1 << layer.k_i) - 1) * ((1 << layer.k_w) - 1) * layer_taps(layer, shape)


def stage_for_layer(layer: LayerSpec, shape: LayerShape) -> ConvStage:
    """Shared post-processing constants for a conv/fc layer."""
    return derive_conv_stage(
        layer_sum_max(layer, shape),
        layer.k,
        layer.qmin,
        layer.qmax,
        layer.bn.mu,
        layer.bn.sigma,
        layer.bn.gamma,
        layer.bn.beta,
        layer.bn.eps,
    )


def check_input_range(values: np.ndarray, k_i: int, tag: str) -> None:
    if values.size and (values.min() < 0 or values.max() >= (1 << k_i)):
        raise ModelFormatError(f"{tag}: input values outside unsigned {k_i}-bit range")


def conv_window_sums(inp: np.ndarray, weights: np.ndarray, stride: int) -> np.ndarray:
    """inp [C,H,W], weights [M,C,kh,kw] -> sums [M,oh,ow]."""
    m, _, kh, kw = weights.shape
    oh = (inp.shape[1] - kh) // stride + 1
    ow = (inp.shape[2] - kw) // stride + 1
    out = np.zeros((m, oh, ow), dtype=np.int64)
    for y in range(oh):
        for x in range(ow):
            win = inp[:, y * stride : y * stride + kh, x * stride : x * stride + kw]
            out[:, y, x] = np.tensordot(weights, win, axes=3)
    return out


def pool_window_values(
    inp: np.ndarray, window: Tuple[int, int], stride: int
) -> np.ndarray:
    """inp [C,H,W] -> stacked window elements [C,oh,ow,wh*ww]."""
    wh, ww = window
    oh = (inp.shape[1] - wh) // stride + 1
    ow = (inp.shape[2] - ww) // stride + 1
    out = np.zeros((inp.shape[0], oh, ow, wh * ww), dtype=np.int64)
    for y in range(oh):
        for x in range(ow):
            win = inp[:, y * stride : y * stride + wh, x * stride : x * stride + ww]
            out[:, y, x, :] = win.reshape(inp.shape[0], -1)
    return out


def _conv_layer(layer: LayerSpec, shape: LayerShape, inp: np.ndarray) -> np.ndarray:
    if layer.kind == "fc":
        flat = inp.reshape(-1)
        sums = (layer.weights @ flat).astype(np.int64)
        sums = sums.reshape(shape.out_dims)
    else:
        sums = conv_window_sums(inp, layer.weights, layer.stride)
    stage = stage_for_layer(layer, shape)
    out = np.zeros_like(sums)
    for c in range(shape.out_channels):
        out[c] = apply_stage_reference(stage, c, sums[c])
    return out


def _pool_layer(layer: LayerSpec, shape: LayerShape, inp: np.ndarray) -> np.ndarray:
    vals = pool_window_values(inp, shape.window, layer.stride)
    if layer.kind == "maxpool":
        return vals.max(axis=3)
    if layer.kind == "minpool":
        return vals.min(axis=3)
    w = vals.shape[3]
    sums = vals.sum(axis=3)
    return (2 * sums + w) // (2 * w)  # round half up


def run_reference(model: ModelSpec, inp: np.ndarray) -> np.ndarray:
    """Run the whole pipeline on integer tensors; returns the output tensor."""
    inp = np.asarray(inp, dtype=np.int64)
    shapes = model.shapes(inp.shape)
    cur = inp.reshape(shapes[0].in_dims) if shapes else inp
    for layer, shape in zip(model.layers, shapes):
        check_input_range(cur, layer.k_i, layer.name or layer.kind)
        cur = cur.reshape(shape.in_dims)
        if layer.kind in POOL_KINDS:
            cur = _pool_layer(layer, shape, cur)
        else:
            cur = _conv_layer(layer, shape, cur)
    if model.layers and model.layers[-1].kind == "fc":
        return cur.reshape(-1)
    return cur


def reference_layer_outputs(model: ModelSpec, inp: np.ndarray) -> List[np.ndarray]:
    """Per-layer outputs, for pinpointing a divergence during debugging."""
    inp = np.asarray(inp, dtype=np.int64)
    shapes = model.shapes(inp.shape)
    outs = []
    cur = inp.reshape(shapes[0].in_dims) if shapes else inp
    for layer, shape in zip(model.layers, shapes):
        check_input_range(cur, layer.k_i, layer.name or layer.kind)
        cur = cur.reshape(shape.in_dims)
        if layer.kind in POOL_KINDS:
            cur = _pool_layer(layer, shape, cur)
        else:
            cur = _conv_layer(layer, shape, cur)
        outs.append(cur)
    return outs
