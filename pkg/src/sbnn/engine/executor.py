"""Graph executor over a :class:`~sbnn.ir.ModelIR` chain."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import DTYPE, as_activation, pack_grouped, partition_channels, unpack_grouped
from ..ir import Conv1x1SparseIR, DenseLayerIR, DwSparseIR, ModelIR, dw_tap_table, tap_count
from ..patterns import DW_DENSE_CODE
from .backend import get_backend
from .ops import (
    Counters, dense_blocks, dense_conv1x1_tiled, run_dw_kernel, sparse_conv1x1, sparse_dwconv3x3,
)
from .reference import run_dense_layer
from .tiling import TileConfig, solve_tile_config


@dataclass
class LayerPlan:
    kernel: str  # conv1x1_sparse | conv1x1_dense | dw_pattern | dw_dense | reference
    tile: TileConfig | None = None
    layout: str = "plain"  # input layout the kernel reads: plain | grouped
    scratch_bytes: int = 0
    prepared: dict = field(default_factory=dict, repr=False)


@dataclass
class ExecutionPlan:
    layers: dict[str, LayerPlan]
    threads: int = 1
    backend: str = "auto"

    def summary(self) -> list[dict]:
        return [{"layer": k, "kernel": v.kernel, "layout": v.layout,
                 "tile": None if v.tile is None else [v.tile.mp, v.tile.np],
                 "scratch_bytes": v.scratch_bytes} for k, v in self.layers.items()]


def _rows(layer) -> int:
    n, oh, ow, _ = layer.out_shape
    return n * oh * ow


def _dense_dw_ok(layer: DenseLayerIR) -> bool:
    return (layer.op == "dwconv" and layer.kernel == (3, 3) and layer.pad == 1
            and layer.stride in (1, 2))


def plan_model(model: ModelIR, registers: int = 32, threads: int = 1, backend: str = "auto") -> ExecutionPlan:
    """Pick a kernel, tile and layout for every layer and pre-arrange weights."""
    plans = {}
    for layer in model.layers:
        n, h, w, c = layer.in_shape
        if isinstance(layer, Conv1x1SparseIR):
            tile = solve_tile_config(_rows(layer), layer.oc, layer.ic, registers)
            plans[layer.name] = LayerPlan(
                "conv1x1_sparse", tile, "plain",
                scratch_bytes=4 * _rows(layer) * (layer.cols * 4 + layer.rows * 4))
        elif isinstance(layer, DwSparseIR):
            cp = layer.grouping.padded
            plans[layer.name] = LayerPlan(
                "dw_pattern", None, "grouped",
                scratch_bytes=4 * n * cp * ((h + 3) * (w + 3) + layer.out_shape[1] * layer.out_shape[2]),
                prepared={"taps": np.ascontiguousarray(dw_tap_table(layer).T)})
        elif layer.op == "conv1x1" and layer.stride == 1 and layer.pad == 0:
            oc, ic = layer.weight.shape[0], layer.weight.shape[3]
            tile = solve_tile_config(_rows(layer), oc, ic, registers)
            plans[layer.name] = LayerPlan(
                "conv1x1_dense", tile, "plain",
                scratch_bytes=4 * _rows(layer) * (-(-ic // 4) * 4 + -(-oc // 4) * 4),
                prepared={"blocks": dense_blocks(layer.weight.reshape(oc, ic))})
        elif _dense_dw_ok(layer):
            grouping = partition_channels(c)
            taps = np.zeros((9, grouping.padded), dtype=DTYPE)
            taps[:, :c] = layer.weight.reshape(c, 9).T
            plans[layer.name] = LayerPlan(
                "dw_dense", None, "grouped",
                scratch_bytes=4 * n * grouping.padded * ((h + 3) * (w + 3)
                                                         + layer.out_shape[1] * layer.out_shape[2]),
                prepared={"taps": taps, "grouping": grouping})
        else:
            plans[layer.name] = LayerPlan("reference")
    return ExecutionPlan(plans, threads, backend)


def run_model(model: ModelIR, x, plan: ExecutionPlan | None = None,
              counters: Counters | None = None) -> np.ndarray:
    """Execute the chain; grouped-layout layers get pack/unpack around them."""
    plan = plan or plan_model(model)
    kern = get_backend(plan.backend)
    y = as_activation(x)
    if model.layers and y.shape[1:] != tuple(model.layers[0].in_shape[1:]):
        raise ValueError(f"input shape {y.shape} does not match model input {model.layers[0].in_shape}")
    for layer in model.layers:
        lp = plan.layers.get(layer.name)
        if lp is None:
            raise ValueError(f"execution plan has no entry for layer {layer.name!r}")
        if lp.kernel == "conv1x1_sparse":
            y = sparse_conv1x1(y, layer, lp.tile, threads=plan.threads, counters=counters, backend=kern)
        elif lp.kernel == "conv1x1_dense":
            oc, ic = layer.weight.shape[0], layer.weight.shape[3]
            y = dense_conv1x1_tiled(y, layer.weight.reshape(oc, ic), layer.bias, lp.tile,
                                    act=layer.act, threads=plan.threads, counters=counters,
                                    backend=kern, blocks=lp.prepared["blocks"])
        elif lp.kernel == "dw_pattern":
            g = sparse_dwconv3x3(pack_grouped(y, layer.grouping), layer, threads=plan.threads,
                                 counters=counters, backend=kern, taps=lp.prepared["taps"])
            y = unpack_grouped(g)
        elif lp.kernel == "dw_dense":
            grouping = lp.prepared["grouping"]
            codes = [DW_DENSE_CODE] * len(grouping.groups)
            masks = np.zeros((len(codes), 3), dtype=np.intc)
            g = run_dw_kernel(pack_grouped(y, grouping), lp.prepared["taps"], layer.bias, codes,
                              masks, layer.stride, layer.pad, layer.act, threads=plan.threads,
                              counters=counters, backend=kern)
            y = unpack_grouped(g)
        elif lp.kernel == "reference":
            if not isinstance(layer, DenseLayerIR):
                raise ValueError(f"layer {layer.name!r}: no reference path for {type(layer).__name__}")
            y = run_dense_layer(layer, y)
        else:
            raise ValueError(f"layer {layer.name!r}: unsupported kernel {lp.kernel!r}")
    return y


def layer_macs(layer) -> tuple[int, int]:
    """``(dense, effective)`` multiply-accumulates of one layer record."""
    n, oh, ow, oc = layer.out_shape
    pix = n * oh * ow
    if isinstance(layer, Conv1x1SparseIR):
        dense = pix * layer.oc * layer.ic
        eff = 0
        for r in range(layer.rows):
            rh = min(4, layer.oc - 4 * r)
            for k in layer.sd_idx[layer.sd_ptr[r]:layer.sd_ptr[r + 1]]:
                eff += rh * min(4, layer.ic - 4 * int(k))
        return dense, pix * eff
    if isinstance(layer, DwSparseIR):
        dense = pix * layer.channels * 9
        eff = sum(tap_count(c) * len(layer.grouping.members(i)) for i, c in enumerate(layer.codes))
        return dense, pix * eff
    if layer.weight is None:
        return 0, 0
    if layer.op == "fc":
        d = n * int(np.prod(layer.weight.shape))
        return d, d
    d = pix * int(np.prod(layer.weight.shape))
    return d, d


def flop_count(model: ModelIR) -> dict:
    per_layer = []
    dense = eff = 0
    for layer in model.layers:
        d, e = layer_macs(layer)
        dense += d
        eff += e
        per_layer.append({"layer": layer.name, "dense_macs": d, "effective_macs": e})
    return {"dense_macs": dense, "effective_macs": eff, "layers": per_layer}
