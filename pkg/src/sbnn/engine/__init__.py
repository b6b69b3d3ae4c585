"""Sparse inference engine: reference operators, sparse kernels and the graph executor."""
from .backend import available_backends, backend_name, get_backend
from .executor import ExecutionPlan, LayerPlan, flop_count, layer_macs, plan_model, run_model
from .ops import (
    Counters, dense_conv1x1_tiled, dwconv3x3_rowmask, sparse_conv1x1, sparse_dwconv3x3,
)
from .reference import run_reference
from .tiling import TileConfig, access_volume, register_count, solve_tile_config

__all__ = [
    "available_backends", "backend_name", "get_backend", "ExecutionPlan", "LayerPlan",
    "flop_count", "layer_macs", "plan_model", "run_model", "Counters", "dense_conv1x1_tiled",
    "dwconv3x3_rowmask", "sparse_conv1x1", "sparse_dwconv3x3", "run_reference", "TileConfig",
    "access_volume", "register_count", "solve_tile_config",
]
