"""Fine-grained kernel group pruning: block masks, pattern codes and reports.

Three operator-specific rules:

* Conv1x1 / FC: connectivity group pruning.  The ``oc x ic`` weight matrix
  is tiled into ``go x gi`` blocks and the ``floor(blocks * rho)`` blocks
  with the smallest l1 norm are zeroed.
* DwConv3x3: pattern group pruning.  Each channel group shares one 3:9
  pattern; optionally the groups that lose the most l1 mass are kept dense.
* Conv3x3: connectivity pruning on ``go x gi`` kernel groups followed by a
  shared 5:9 pattern per surviving group.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ChannelGrouping, as_weight, partition_channels
from .model import Model
from .patterns import (
    DW_DENSE_CODE, PatternCatalog, best_pattern_for_group, conv59_pattern_catalog,
    dw_pattern_catalog,
)


@dataclass(frozen=True, eq=False)
class BlockMask:
    keep: np.ndarray  # (rows, cols) bool
    go: int
    gi: int
    oc: int
    ic: int

    def __post_init__(self):
        rows, cols = -(-self.oc // self.go), -(-self.ic // self.gi)
        if self.keep.shape != (rows, cols):
            raise ValueError(f"keep grid {self.keep.shape} does not match "
                             f"ceil({self.oc}/{self.go}) x ceil({self.ic}/{self.gi})")

    @property
    def rows(self) -> int:
        return self.keep.shape[0]

    @property
    def cols(self) -> int:
        return self.keep.shape[1]

    @property
    def removed(self) -> int:
        return int((~self.keep).sum())

    @property
    def sparsity(self) -> float:
        return self.removed / self.keep.size if self.keep.size else 0.0

    def expand(self) -> np.ndarray:
        """Element mask of shape ``(oc, ic)``."""
        full = np.repeat(np.repeat(self.keep, self.go, axis=0), self.gi, axis=1)
        return full[:self.oc, :self.ic]

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return ((self.go, self.gi, self.oc, self.ic) == (other.go, other.gi, other.oc, other.ic)
                and np.array_equal(self.keep, other.keep))


@dataclass(frozen=True, eq=False)
class DwCodes:
    """One 3:9 pattern code (or the dense code) per depthwise channel group."""
    grouping: ChannelGrouping
    codes: tuple[int, ...]

    def __eq__(self, other):
        if not isinstance(other, DwCodes):
            return NotImplemented
        return self.grouping == other.grouping and self.codes == other.codes


@dataclass(frozen=True, eq=False)
class Conv3x3Masks:
    blocks: BlockMask
    codes: np.ndarray  # (rows, cols) int, -1 where the group was removed

    def __eq__(self, other):
        if not isinstance(other, Conv3x3Masks):
            return NotImplemented
        return self.blocks == other.blocks and np.array_equal(self.codes, other.codes)


@dataclass
class PruneConfig:
    conv1x1_rho: float = 0.0
    conv1x1_go: int = 4
    conv1x1_gi: int = 4
    dw_go: int = 16
    dw_dense_groups: int = 0
    conv3x3_rho: float = 0.0
    conv3x3_go: int = 4
    conv3x3_gi: int = 4
    enabled: frozenset[str] = frozenset({"conv1x1", "dwconv"})

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        for name in ("conv1x1_rho", "conv3x3_rho"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dw_go != 16:
            raise ValueError("depthwise groups follow the 16/8/4 channel partition; dw_go must be 16")
        if self.dw_dense_groups < 0:
            raise ValueError("dw_dense_groups must be >= 0")
        unknown = self.enabled - {"conv1x1", "dwconv", "conv3x3", "fc"}
        if unknown:
            raise ValueError(f"unknown operator kinds in enabled set: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        c1 = d.pop("conv1x1", {}) or {}
        dw = d.pop("dw", {}) or {}
        c3 = d.pop("conv3x3", {}) or {}
        enabled = d.pop("enabled", None)
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        kw = dict(
            conv1x1_rho=float(c1.get("rho", 0.0)), conv1x1_go=int(c1.get("go", 4)),
            conv1x1_gi=int(c1.get("gi", 4)), dw_go=int(dw.get("go", 16)),
            dw_dense_groups=int(dw.get("dense_groups", 0)),
            conv3x3_rho=float(c3.get("rho_conn", 0.0)), conv3x3_go=int(c3.get("go", 4)),
            conv3x3_gi=int(c3.get("gi", 4)),
        )
        if enabled is not None:
            kw["enabled"] = frozenset(enabled)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "conv1x1": {"go": self.conv1x1_go, "gi": self.conv1x1_gi, "rho": self.conv1x1_rho},
            "dw": {"go": self.dw_go, "dense_groups": self.dw_dense_groups},
            "conv3x3": {"go": self.conv3x3_go, "gi": self.conv3x3_gi, "rho_conn": self.conv3x3_rho},
            "enabled": sorted(self.enabled),
        }


@dataclass
class LayerReport:
    name: str
    op: str
    kept_blocks: int
    removed_blocks: int
    sparsity: float
    delta: float
    dense_macs: int
    pruned: bool = True


@dataclass
class PruneReport:
    layers: list[LayerReport] = field(default_factory=list)
    flop_sparsity: float = 0.0
    param_sparsity: float = 0.0
    passthrough: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layers": [vars(r) for r in self.layers],
            "network": {"flop_sparsity": self.flop_sparsity,
                        "param_sparsity": self.param_sparsity},
            "passthrough": list(self.passthrough),
        }


def block_scores(a: np.ndarray, go: int, gi: int) -> np.ndarray:
    """Sum of ``a`` (``oc x ic``, already non-negative) over each ``go x gi`` block.

    Trailing partial blocks sum only their real members.
    """
    oc, ic = a.shape
    rows, cols = -(-oc // go), -(-ic // gi)
    padded = np.zeros((rows * go, cols * gi), dtype=np.float64)
    padded[:oc, :ic] = a
    return padded.reshape(rows, go, cols, gi).sum(axis=(1, 3))


def select_blocks(scores: np.ndarray, rho: float) -> np.ndarray:
    """Keep grid removing the ``floor(size * rho)`` lowest-scoring blocks.

    Ties are broken in row-major order: among equal scores the earlier block
    is removed first.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    n_remove = int(np.floor(scores.size * rho + 1e-9))
    keep = np.ones(scores.size, dtype=bool)
    if n_remove:
        order = np.argsort(scores.ravel(), kind="stable")
        keep[order[:n_remove]] = False
    return keep.reshape(scores.shape)


def _kernel_l1(w: np.ndarray) -> np.ndarray:
    """``(oc, ic)`` matrix of per-kernel l1 norms."""
    return np.abs(w.astype(np.float64)).sum(axis=(1, 2))


def conv1x1_connectivity_prune(w, go: int = 4, gi: int = 4, rho: float = 0.0) -> BlockMask:
    w = as_weight(w)
    oc, kh, kw, ic = w.shape
    if kh * kw != 1:
        raise ValueError(f"connectivity pruning expects a 1x1 kernel, got {kh}x{kw}")
    keep = select_blocks(block_scores(_kernel_l1(w), go, gi), rho)
    return BlockMask(keep, go, gi, oc, ic)


def dw_removal_losses(w, grouping: ChannelGrouping, codes, catalog: PatternCatalog) -> np.ndarray:
    """l1 mass each group loses under the given codes."""
    a = np.abs(w[:, :, :, 0].astype(np.float64))
    losses = np.empty(len(grouping.groups))
    for g, code in enumerate(codes):
        idx = list(grouping.members(g))
        losses[g] = (a[idx] * ~catalog.mask(code)).sum()
    return losses


def dw_pattern_prune(w, go: int = 16, dense_groups: int = 0,
                     catalog: PatternCatalog | None = None) -> DwCodes:
    w = as_weight(w, depthwise=True)
    oc, kh, kw, _ = w.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"depthwise pattern pruning expects 3x3 kernels, got {kh}x{kw}")
    if go != 16:
        raise ValueError("depthwise groups follow the 16/8/4 channel partition; go must be 16")
    catalog = catalog or dw_pattern_catalog()
    grouping = partition_channels(oc)
    n_groups = len(grouping.groups)
    if not 0 <= dense_groups <= n_groups:
        raise ValueError(f"dense_groups={dense_groups} exceeds the {n_groups} channel groups")
    codes = [best_pattern_for_group(w[list(grouping.members(g)), :, :, 0], catalog)
             for g in range(n_groups)]
    if dense_groups:
        losses = dw_removal_losses(w, grouping, codes, catalog)
        # largest loss first; ties go to the lower group index
        order = sorted(range(n_groups), key=lambda g: (-losses[g], g))
        for g in order[:dense_groups]:
            codes[g] = catalog.dense_code
    return DwCodes(grouping, tuple(codes))


def conv3x3_group_prune(w, go: int = 4, gi: int = 4, rho_conn: float = 0.0,
                        catalog: PatternCatalog | None = None) -> Conv3x3Masks:
    w = as_weight(w)
    oc, kh, kw, ic = w.shape
    if kh * kw != 9:
        raise ValueError(f"conv3x3 group pruning expects 3x3 kernels, got {kh}x{kw}")
    catalog = catalog or conv59_pattern_catalog()
    keep = select_blocks(block_scores(_kernel_l1(w), go, gi), rho_conn)
    codes = np.full(keep.shape, -1, dtype=np.int64)
    for r, c in zip(*np.nonzero(keep)):
        grp = w[r * go:(r + 1) * go, :, :, c * gi:(c + 1) * gi]
        codes[r, c] = best_pattern_for_group(np.moveaxis(grp, 3, 1), catalog)
    return Conv3x3Masks(BlockMask(keep, go, gi, oc, ic), codes)


def expand_mask(w_shape, mask) -> np.ndarray:
    """Element keep-mask of weight shape ``(oc, kh, kw, ic)`` for any pruning result."""
    oc, kh, kw, ic = w_shape
    if isinstance(mask, BlockMask):
        if (mask.oc, mask.ic) != (oc, ic):
            raise ValueError(f"block mask is {mask.oc}x{mask.ic}, weight is {oc}x{ic}")
        return np.broadcast_to(mask.expand()[:, None, None, :], w_shape).copy()
    if isinstance(mask, DwCodes):
        if ic != 1 or (kh, kw) != (3, 3) or mask.grouping.total != oc:
            raise ValueError(f"depthwise codes do not fit weight shape {w_shape}")
        cat = dw_pattern_catalog()
        out = np.empty(w_shape, dtype=bool)
        for g, code in enumerate(mask.codes):
            out[list(mask.grouping.members(g)), :, :, 0] = cat.mask(code)
        return out
    if isinstance(mask, Conv3x3Masks):
        if (kh, kw) != (3, 3):
            raise ValueError(f"conv3x3 masks do not fit weight shape {w_shape}")
        base = expand_mask(w_shape, mask.blocks)
        cat = conv59_pattern_catalog()
        b = mask.blocks
        for r in range(b.rows):
            for c in range(b.cols):
                code = int(mask.codes[r, c])
                if code >= 0:
                    base[r * b.go:(r + 1) * b.go, :, :, c * b.gi:(c + 1) * b.gi] &= \
                        cat.mask(code)[None, :, :, None]
        return base
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(w_shape):
        raise ValueError(f"mask shape {m.shape} does not match weight shape {tuple(w_shape)}")
    return m


def apply_mask(w, mask) -> np.ndarray:
    w = as_weight(w)
    return np.where(expand_mask(w.shape, mask), w, np.float32(0))


def pruning_quality(w, w_sparse) -> float:
    """Relative l1 loss ``|w - w_sparse|_1 / |w|_1``; zero when ``w`` is all zeros."""
    w = np.asarray(w, dtype=np.float64)
    ws = np.asarray(w_sparse, dtype=np.float64)
    if w.shape != ws.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {ws.shape}")
    total = np.abs(w).sum()
    if total == 0:
        return 0.0
    return float(np.abs(w - ws).sum() / total)


def _op_kind(layer) -> str | None:
    if layer.op == "conv1x1":
        return "conv1x1"
    if layer.op == "fc":
        return "fc"
    if layer.op == "dwconv" and layer.kernel == (3, 3):
        return "dwconv"
    if layer.op == "conv2d" and layer.kernel == (3, 3):
        return "conv3x3"
    return None


def prune_layer(layer, config: PruneConfig):
    kind = _op_kind(layer)
    if kind in ("conv1x1", "fc"):
        return conv1x1_connectivity_prune(layer.weight, config.conv1x1_go, config.conv1x1_gi,
                                          config.conv1x1_rho)
    if kind == "dwconv":
        return dw_pattern_prune(layer.weight, config.dw_go, config.dw_dense_groups)
    if kind == "conv3x3":
        return conv3x3_group_prune(layer.weight, config.conv3x3_go, config.conv3x3_gi,
                                   config.conv3x3_rho)
    raise ValueError(f"layer {layer.name!r}: no pruning rule for op {layer.op!r}")


def network_prune(model: Model, config: PruneConfig):
    """Prune every enabled layer; returns ``({layer name: mask}, PruneReport)``."""
    masks, report = {}, PruneReport()
    total_macs = removed_macs = total_params = removed_params = 0.0
    for layer in model.layers:
        if layer.weight_shape is None:
            continue
        kind = _op_kind(layer)
        macs = layer.dense_macs()
        params = int(np.prod(layer.weight_shape))
        total_macs += macs
        total_params += params
        if kind is None or kind not in config.enabled or not layer.sparse:
            if kind is None:
                report.passthrough.append(layer.name)
            report.layers.append(LayerReport(layer.name, layer.op, 0, 0, 0.0, 0.0, macs, False))
            continue
        mask = prune_layer(layer, config)
        masks[layer.name] = mask
        keep = expand_mask(layer.weight.shape, mask)
        sparsity = 1.0 - keep.mean()
        delta = pruning_quality(layer.weight, np.where(keep, layer.weight, 0))
        if isinstance(mask, BlockMask):
            kept, rem = mask.keep.size - mask.removed, mask.removed
        elif isinstance(mask, Conv3x3Masks):
            kept, rem = mask.blocks.keep.size - mask.blocks.removed, mask.blocks.removed
        else:
            kept, rem = len(mask.codes), 0
        report.layers.append(LayerReport(layer.name, layer.op, kept, rem, float(sparsity),
                                         delta, macs))
        removed_macs += macs * sparsity
        removed_params += params * sparsity
    report.flop_sparsity = float(removed_macs / total_macs) if total_macs else 0.0
    report.param_sparsity = float(removed_params / total_params) if total_params else 0.0
    return masks, report


def apply_network_masks(model: Model, masks: dict) -> Model:
    """Copy of ``model`` with every masked layer's weights zeroed outside its mask."""
    out = model.copy()
    for layer in out.layers:
        if layer.name in masks:
            layer.weight = apply_mask(layer.weight, masks[layer.name])
    return out


# JSON round-trip of masks, used by the CLI


def mask_to_json(mask) -> dict:
    if isinstance(mask, BlockMask):
        return {"kind": "block", "go": mask.go, "gi": mask.gi, "oc": mask.oc, "ic": mask.ic,
                "keep": mask.keep.astype(int).tolist()}
    if isinstance(mask, DwCodes):
        return {"kind": "dw", "groups": list(mask.grouping.groups),
                "channels": mask.grouping.total, "codes": list(mask.codes)}
    if isinstance(mask, Conv3x3Masks):
        d = mask_to_json(mask.blocks)
        d.update(kind="conv3x3", codes=mask.codes.tolist())
        return d
    raise TypeError(f"unsupported mask type {type(mask).__name__}")


def mask_from_json(d: dict):
    kind = d.get("kind")
    if kind in ("block", "conv3x3"):
        keep = np.asarray(d["keep"], dtype=bool)
        if keep.ndim != 2:
            raise ValueError("block keep grid must be 2-d")
        bm = BlockMask(keep, int(d["go"]), int(d["gi"]), int(d["oc"]), int(d["ic"]))
        if kind == "block":
            return bm
        codes = np.asarray(d["codes"], dtype=np.int64)
        if codes.shape != keep.shape:
            raise ValueError("conv3x3 code grid does not match keep grid")
        if np.any(codes[keep] < 0) or np.any(codes[keep] >= 56) or np.any(codes[~keep] != -1):
            raise ValueError("conv3x3 codes out of range or set on removed groups")
        return Conv3x3Masks(bm, codes)
    if kind == "dw":
        grouping = ChannelGrouping(tuple(int(g) for g in d["groups"]), int(d["channels"]))
        codes = tuple(int(c) for c in d["codes"])
        if len(codes) != len(grouping.groups):
            raise ValueError("depthwise code count does not match group count")
        if any(not 0 <= c <= DW_DENSE_CODE for c in codes):
            raise ValueError("depthwise pattern code out of range")
        return DwCodes(grouping, codes)
    raise ValueError(f"unknown mask kind {kind!r}")


__all__ = [
    "BlockMask", "DwCodes", "Conv3x3Masks", "PruneConfig", "PruneReport", "LayerReport",
    "conv1x1_connectivity_prune", "dw_pattern_prune", "conv3x3_group_prune",
    "pruning_quality", "network_prune", "apply_mask", "expand_mask", "apply_network_masks",
    "block_scores", "select_blocks", "mask_to_json", "mask_from_json",
]
