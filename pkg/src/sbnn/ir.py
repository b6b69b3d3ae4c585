"""Sparse model IR: layer records, conversion from pruned weights, ``.sbnn`` I/O.

Binary layout (little-endian, all integers u32, all floats f32)::

    "SBNN" | version | layer_count | str input_name | str output_name
    layer_count x (tag | payload_length | payload)
    crc32 of every preceding byte

``str`` is a u32 byte length followed by UTF-8 bytes.  Every payload starts
with ``str name | in_shape[4] | out_shape[4] | stride | pad | act`` and then
carries a tag-specific body, see :func:`_write_layer`.  ``docs/FORMAT.md``
has an annotated hex dump.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .core import DTYPE, ChannelGrouping, GROUP_WIDTHS
from .model import ACTIVATION_OPS, Model
from .patterns import DW_DENSE_CODE, dw_pattern_catalog
from .pruner import BlockMask, Conv3x3Masks, DwCodes, apply_mask

MAGIC = b"SBNN"
VERSION = 1

TAG_DENSE = 1
TAG_CONV1X1_SPARSE = 2
TAG_DW_SPARSE = 3

ACT_NONE, ACT_RELU, ACT_RELU6 = 0, 1, 2
ACT_CODES = {None: ACT_NONE, "relu": ACT_RELU, "relu6": ACT_RELU6}

DENSE_OPS = ("conv2d", "dwconv", "conv1x1", "fc", "avgpool", "maxpool", "relu", "relu6", "softmax")
_OP_CODE = {op: i for i, op in enumerate(DENSE_OPS)}

BLOCK = 4


class IRFormatError(ValueError):
    """Malformed, truncated or corrupted ``.sbnn`` stream."""


class IRValidationError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ConversionError(ValueError):
    pass


def _arrays_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


class _ArrayEq:
    """Field-for-field equality that compares numpy arrays bitwise."""

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for f in fields(self):
            x, y = getattr(self, f.name), getattr(other, f.name)
            if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
                if not _arrays_equal(x, y):
                    return False
            elif x != y:
                return False
        return True

    __hash__ = None


@dataclass(eq=False)
class DenseLayerIR(_ArrayEq):
    name: str
    op: str
    in_shape: tuple[int, int, int, int]
    out_shape: tuple[int, int, int, int]
    stride: int = 1
    pad: int = 0
    act: int = ACT_NONE
    kernel: tuple[int, int] = (1, 1)
    weight: np.ndarray | None = None  # (oc, kh, kw, ic)
    bias: np.ndarray | None = None


@dataclass(eq=False)
class Conv1x1SparseIR(_ArrayEq):
    """Block-sparse 1x1 convolution (or FC) in 4x4 blocks.

    ``sd_ptr``/``sd_idx`` hold the SD lists in CSR form: block row ``r`` keeps
    input blocks ``sd_idx[sd_ptr[r]:sd_ptr[r+1]]`` (ascending).  ``packed``
    stores the kept blocks in that order, 16 floats each, laid out
    ``[input lane][output lane]``; lanes past ``oc``/``ic`` are zero.
    """
    name: str
    in_shape: tuple[int, int, int, int]
    out_shape: tuple[int, int, int, int]
    oc: int
    ic: int
    sd_ptr: np.ndarray
    sd_idx: np.ndarray
    packed: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    act: int = ACT_NONE
    go: int = BLOCK
    gi: int = BLOCK

    @property
    def rows(self) -> int:
        return len(self.sd_ptr) - 1

    @property
    def cols(self) -> int:
        return -(-self.ic // self.gi)

    @property
    def kept_blocks(self) -> int:
        return int(self.sd_idx.size)

    @property
    def sd(self) -> list[list[int]]:
        return [self.sd_idx[self.sd_ptr[r]:self.sd_ptr[r + 1]].tolist() for r in range(self.rows)]

    @property
    def flatten(self) -> bool:
        return self.in_shape[3] != self.ic


@dataclass(eq=False)
class DwSparseIR(_ArrayEq):
    """Pattern-sparse 3x3 depthwise convolution.

    For each channel group, ``packed`` holds the kept taps in row-major tap
    order, each tap followed by the weights of the group's real channels.
    """
    name: str
    in_shape: tuple[int, int, int, int]
    out_shape: tuple[int, int, int, int]
    grouping: ChannelGrouping
    codes: tuple[int, ...]
    packed: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 1
    act: int = ACT_NONE

    @property
    def channels(self) -> int:
        return self.grouping.total


LayerIR = DenseLayerIR | Conv1x1SparseIR | DwSparseIR


@dataclass(eq=False)
class ModelIR(_ArrayEq):
    layers: list = field(default_factory=list)
    input_name: str = "input"
    output_name: str = "output"
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, ModelIR):
            return NotImplemented
        return (self.version == other.version and self.input_name == other.input_name
                and self.output_name == other.output_name
                and len(self.layers) == len(other.layers)
                and all(a == b for a, b in zip(self.layers, other.layers)))

    def layer(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


# ---------------------------------------------------------------------------
# packing / unpacking of sparse weights


def pack_conv1x1(w2d: np.ndarray, keep: np.ndarray):
    """CSR SD arrays and packed 4x4 blocks of an ``(oc, ic)`` matrix."""
    oc, ic = w2d.shape
    rows, cols = keep.shape
    padded = np.zeros((rows * BLOCK, cols * BLOCK), dtype=DTYPE)
    padded[:oc, :ic] = w2d
    # (rows, cols, in lane, out lane)
    blocks = padded.reshape(rows, BLOCK, cols, BLOCK).transpose(0, 2, 3, 1)
    r_idx, c_idx = np.nonzero(keep)
    sd_ptr = np.zeros(rows + 1, dtype=np.uint32)
    np.cumsum(keep.sum(axis=1), out=sd_ptr[1:])
    packed = np.ascontiguousarray(blocks[r_idx, c_idx]).reshape(-1)
    return sd_ptr, c_idx.astype(np.uint32), packed


def unpack_conv1x1(layer: Conv1x1SparseIR) -> np.ndarray:
    """Dense ``(oc, ic)`` matrix with zeros at removed blocks."""
    rows, cols = layer.rows, layer.cols
    padded = np.zeros((rows, cols, BLOCK, BLOCK), dtype=DTYPE)
    blocks = layer.packed.reshape(-1, BLOCK, BLOCK)
    r_idx = np.repeat(np.arange(rows), np.diff(layer.sd_ptr.astype(np.int64)))
    padded[r_idx, layer.sd_idx.astype(np.int64)] = blocks
    full = padded.transpose(0, 3, 1, 2).reshape(rows * BLOCK, cols * BLOCK)
    return np.ascontiguousarray(full[:layer.oc, :layer.ic])


def tap_count(code: int) -> int:
    return 9 if code == DW_DENSE_CODE else 6


def pack_dw(w: np.ndarray, grouping: ChannelGrouping, codes) -> np.ndarray:
    cat = dw_pattern_catalog()
    parts = []
    for g, code in enumerate(codes):
        idx = list(grouping.members(g))
        taps = w[idx, :, :, 0].reshape(len(idx), 9)
        kept = np.flatnonzero(cat.mask(code).ravel())
        parts.append(taps[:, kept].T.reshape(-1))
    return np.concatenate(parts).astype(DTYPE) if parts else np.zeros(0, DTYPE)


def dw_tap_table(layer: DwSparseIR) -> np.ndarray:
    """``(padded_c, 9)`` tap weights with zeros at pruned taps and padding channels."""
    cat = dw_pattern_catalog()
    table = np.zeros((layer.grouping.padded, 9), dtype=DTYPE)
    pos = 0
    for g, code in enumerate(layer.codes):
        s = layer.grouping.starts[g]
        members = len(layer.grouping.members(g))
        kept = np.flatnonzero(cat.mask(code).ravel())
        n = kept.size * members
        table[s:s + members, kept] = layer.packed[pos:pos + n].reshape(kept.size, members).T
        pos += n
    return table


def expand_weights(layer) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Mask-expanded dense ``(oc, kh, kw, ic)`` weights and bias of any layer record."""
    if isinstance(layer, DenseLayerIR):
        return layer.weight, layer.bias
    if isinstance(layer, Conv1x1SparseIR):
        w = unpack_conv1x1(layer)
        return w.reshape(layer.oc, 1, 1, layer.ic), layer.bias
    if isinstance(layer, DwSparseIR):
        table = dw_tap_table(layer)[:layer.channels]
        return table.reshape(layer.channels, 3, 3, 1), layer.bias
    raise TypeError(type(layer).__name__)


def to_dense(model: ModelIR) -> ModelIR:
    """Same graph with every sparse layer replaced by its mask-expanded dense record."""
    out = []
    for layer in model.layers:
        if isinstance(layer, DenseLayerIR):
            out.append(layer)
            continue
        w, b = expand_weights(layer)
        if isinstance(layer, Conv1x1SparseIR):
            op = "fc" if layer.flatten else "conv1x1"
            out.append(DenseLayerIR(layer.name, op, layer.in_shape, layer.out_shape,
                                    layer.stride, layer.pad, layer.act, (1, 1), w, b))
        else:
            out.append(DenseLayerIR(layer.name, "dwconv", layer.in_shape, layer.out_shape,
                                    layer.stride, layer.pad, layer.act, (3, 3), w, b))
    return ModelIR(out, model.input_name, model.output_name, model.version)


# ---------------------------------------------------------------------------
# conversion


def convert(model: Model, masks: dict | None = None, fuse_activations: bool = True) -> ModelIR:
    """Build the IR of a chain model; layers with masks are stored sparse."""
    masks = masks or {}
    if not model.is_chain():
        raise ConversionError("only chain graphs can be converted")
    unknown = set(masks) - {layer.name for layer in model.layers}
    if unknown:
        raise ConversionError(f"masks given for unknown layers: {sorted(unknown)}")
    layers = []
    skip = set()
    for i, layer in enumerate(model.layers):
        if layer.name in skip:
            continue
        if layer.op in ("concat", "add"):
            raise ConversionError(f"layer {layer.name!r}: op {layer.op!r} is not supported")
        act = ACT_NONE
        out_shape = layer.out_shape
        nxt = model.layers[i + 1] if i + 1 < len(model.layers) else None
        if (fuse_activations and layer.weight_shape is not None and nxt is not None
                and nxt.op in ACTIVATION_OPS):
            act = ACT_CODES[nxt.op]
            skip.add(nxt.name)
        ws = layer.weight_shape
        if ws is not None and (layer.weight is None or layer.bias is None):
            raise ConversionError(f"layer {layer.name!r} has no weights")
        if ws is not None and layer.weight.shape != ws:
            raise ConversionError(f"layer {layer.name!r}: weight shape {layer.weight.shape} != {ws}")
        mask = masks.get(layer.name)
        common = dict(name=layer.name, in_shape=layer.in_shape, out_shape=out_shape,
                      stride=layer.stride, pad=layer.pad, act=act)
        if mask is None:
            layers.append(DenseLayerIR(op=layer.op, kernel=layer.kernel,
                                       weight=None if ws is None else layer.weight.astype(DTYPE),
                                       bias=None if ws is None else layer.bias.astype(DTYPE),
                                       **common))
        elif isinstance(mask, BlockMask) and layer.op in ("conv1x1", "fc"):
            layers.append(_convert_conv1x1(layer, mask, common))
        elif isinstance(mask, DwCodes) and layer.op == "dwconv":
            layers.append(_convert_dw(layer, mask, common))
        elif isinstance(mask, Conv3x3Masks) and layer.op == "conv2d":
            # 5:9 conv3x3 runs dense over the mask-expanded weights
            layers.append(DenseLayerIR(op="conv2d", kernel=layer.kernel,
                                       weight=apply_mask(layer.weight, mask),
                                       bias=layer.bias.astype(DTYPE), **common))
        else:
            raise ConversionError(f"layer {layer.name!r}: mask of type {type(mask).__name__} "
                                  f"does not fit op {layer.op!r}")
    ir = ModelIR(layers, model.input_name, layers[-1].name if layers else "output")
    problems = validate(ir)
    if problems:
        raise ConversionError("; ".join(problems))
    return ir


def _convert_conv1x1(layer, mask: BlockMask, common) -> Conv1x1SparseIR:
    oc, _, _, ic = layer.weight_shape
    if (mask.oc, mask.ic) != (oc, ic):
        raise ConversionError(f"layer {layer.name!r}: mask is {mask.oc}x{mask.ic}, weight is {oc}x{ic}")
    if (mask.go, mask.gi) != (BLOCK, BLOCK):
        raise ConversionError(f"layer {layer.name!r}: sparse 1x1 layers need 4x4 blocks, "
                              f"got {mask.go}x{mask.gi}")
    if layer.pad != 0:
        raise ConversionError(f"layer {layer.name!r}: 1x1 convolution with padding is not supported")
    sd_ptr, sd_idx, packed = pack_conv1x1(layer.weight.reshape(oc, ic), mask.keep)
    return Conv1x1SparseIR(oc=oc, ic=ic, sd_ptr=sd_ptr, sd_idx=sd_idx, packed=packed,
                           bias=layer.bias.astype(DTYPE), **common)


def _convert_dw(layer, codes: DwCodes, common) -> DwSparseIR:
    oc = layer.weight_shape[0]
    if layer.kernel != (3, 3) or layer.pad != 1 or layer.stride not in (1, 2):
        raise ConversionError(f"layer {layer.name!r}: sparse depthwise needs 3x3, pad 1, stride 1/2")
    if codes.grouping.total != oc:
        raise ConversionError(f"layer {layer.name!r}: codes cover {codes.grouping.total} channels, layer has {oc}")
    if any(not 0 <= c <= DW_DENSE_CODE for c in codes.codes):
        raise ConversionError(f"layer {layer.name!r}: pattern code out of range")
    packed = pack_dw(layer.weight, codes.grouping, codes.codes)
    return DwSparseIR(grouping=codes.grouping, codes=tuple(codes.codes), packed=packed,
                      bias=layer.bias.astype(DTYPE), **common)


# ---------------------------------------------------------------------------
# validation


def _weight_shape(layer: DenseLayerIR):
    kh, kw = layer.kernel
    ic, oc = layer.in_shape[3], layer.out_shape[3]
    return {
        "conv2d": (oc, kh, kw, ic), "conv1x1": (oc, 1, 1, ic), "dwconv": (oc, kh, kw, 1),
        "fc": (oc, 1, 1, int(np.prod(layer.in_shape[1:]))),
    }.get(layer.op)


def validate(model: ModelIR) -> list[str]:
    """Every structural violation found, each prefixed with the layer name."""
    out = []
    prev = None
    for i, layer in enumerate(model.layers):
        tag = f"layer {i} {layer.name!r}"
        if prev is not None and tuple(layer.in_shape) != tuple(prev.out_shape):
            out.append(f"{tag}: input shape {tuple(layer.in_shape)} does not match previous "
                       f"output {tuple(prev.out_shape)}")
        if layer.act not in (ACT_NONE, ACT_RELU, ACT_RELU6):
            out.append(f"{tag}: unknown activation code {layer.act}")
        if layer.in_shape[0] != layer.out_shape[0]:
            out.append(f"{tag}: batch size changes across the layer")
        if isinstance(layer, DenseLayerIR):
            out.extend(_validate_dense(tag, layer))
        elif isinstance(layer, Conv1x1SparseIR):
            out.extend(_validate_conv1x1(tag, layer))
        elif isinstance(layer, DwSparseIR):
            out.extend(_validate_dw(tag, layer))
        else:
            out.append(f"{tag}: unknown layer record {type(layer).__name__}")
        prev = layer
    return out


def _validate_dense(tag, layer: DenseLayerIR):
    out = []
    if layer.op not in _OP_CODE:
        return [f"{tag}: unknown op {layer.op!r}"]
    ws = _weight_shape(layer)
    if ws is None:
        if layer.weight is not None:
            out.append(f"{tag}: op {layer.op!r} carries no weights")
    else:
        if layer.weight is None or tuple(layer.weight.shape) != ws:
            got = None if layer.weight is None else tuple(layer.weight.shape)
            out.append(f"{tag}: weight shape {got} does not match declared {ws}")
        if layer.bias is None or layer.bias.shape != (ws[0],):
            out.append(f"{tag}: bias length does not match {ws[0]} output channels")
    if layer.op in ("conv2d", "dwconv", "avgpool", "maxpool"):
        kh, kw = layer.kernel
        _, h, w, _ = layer.in_shape
        s, p = layer.stride, layer.pad
        if s < 1:
            out.append(f"{tag}: stride must be >= 1")
        else:
            oh, ow = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
            if layer.out_shape[1:3] != (oh, ow):
                out.append(f"{tag}: output spatial size {layer.out_shape[1:3]} != computed {(oh, ow)}")
    if layer.op in ("dwconv", "avgpool", "maxpool", "relu", "relu6", "softmax") \
            and layer.in_shape[3] != layer.out_shape[3]:
        out.append(f"{tag}: op {layer.op!r} must preserve the channel count")
    return out


def _validate_conv1x1(tag, layer: Conv1x1SparseIR):
    out = []
    if (layer.go, layer.gi) != (BLOCK, BLOCK):
        out.append(f"{tag}: block size {layer.go}x{layer.gi}, expected 4x4")
        return out
    if layer.out_shape[3] != layer.oc:
        out.append(f"{tag}: out_shape channels {layer.out_shape[3]} != oc {layer.oc}")
    in_c = layer.in_shape[3] if not layer.flatten else int(np.prod(layer.in_shape[1:]))
    if in_c != layer.ic:
        out.append(f"{tag}: input channels {in_c} != ic {layer.ic}")
    rows, cols = -(-layer.oc // BLOCK), layer.cols
    ptr = layer.sd_ptr.astype(np.int64)
    if ptr.size != rows + 1:
        out.append(f"{tag}: {ptr.size - 1} SD rows, expected {rows}")
    elif ptr[0] != 0 or np.any(np.diff(ptr) < 0) or ptr[-1] != layer.sd_idx.size:
        out.append(f"{tag}: SD row pointers are inconsistent")
    else:
        idx = layer.sd_idx.astype(np.int64)
        if idx.size and idx.max() >= cols:
            out.append(f"{tag}: SD index {int(idx.max())} out of bounds (block columns = {cols})")
        for r in range(rows):
            seg = idx[ptr[r]:ptr[r + 1]]
            if np.any(np.diff(seg) <= 0):
                out.append(f"{tag}: SD row {r} is not strictly ascending")
                break
    if layer.packed.size != 16 * layer.sd_idx.size:
        out.append(f"{tag}: packed holds {layer.packed.size} floats, expected "
                   f"{16 * layer.sd_idx.size}")
    if layer.bias.shape != (layer.oc,):
        out.append(f"{tag}: bias length {layer.bias.size} != oc {layer.oc}")
    if layer.pad != 0 or layer.stride < 1:
        out.append(f"{tag}: 1x1 layers need pad 0 and stride >= 1")
    elif not layer.flatten:
        _, h, w, _ = layer.in_shape
        exp = (-(-h // layer.stride), -(-w // layer.stride))
        if layer.out_shape[1:3] != exp:
            out.append(f"{tag}: output spatial size {layer.out_shape[1:3]} != computed {exp}")
    return out


def _validate_dw(tag, layer: DwSparseIR):
    out = []
    g = layer.grouping
    if not all(w in GROUP_WIDTHS for w in g.groups):
        out.append(f"{tag}: group widths {g.groups} not in {GROUP_WIDTHS}")
    if len(layer.codes) != len(g.groups):
        out.append(f"{tag}: {len(layer.codes)} pattern codes for {len(g.groups)} channel groups")
        return out
    bad = [c for c in layer.codes if not 0 <= c <= DW_DENSE_CODE]
    if bad:
        out.append(f"{tag}: pattern code {bad[0]} out of range [0, {DW_DENSE_CODE}]")
        return out
    if g.total != layer.in_shape[3] or g.total != layer.out_shape[3]:
        out.append(f"{tag}: grouping covers {g.total} channels, shapes say "
                   f"{layer.in_shape[3]} -> {layer.out_shape[3]}")
    expect = sum(tap_count(c) * len(g.members(i)) for i, c in enumerate(layer.codes))
    if layer.packed.size != expect:
        out.append(f"{tag}: packed holds {layer.packed.size} floats, expected {expect}")
    if layer.bias.shape != (g.total,):
        out.append(f"{tag}: bias length {layer.bias.size} != channels {g.total}")
    if layer.stride not in (1, 2) or layer.pad != 1:
        out.append(f"{tag}: sparse depthwise needs stride 1/2 and pad 1")
    else:
        _, h, w, _ = layer.in_shape
        exp = ((h - 1) // layer.stride + 1, (w - 1) // layer.stride + 1)
        if layer.out_shape[1:3] != exp:
            out.append(f"{tag}: output spatial size {layer.out_shape[1:3]} != computed {exp}")
    return out


# ---------------------------------------------------------------------------
# serialization


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}I", *vals))

    def u32s(self, arr):
        a = np.asarray(arr, dtype="<u4")
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def f32s(self, arr):
        a = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def str(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, where: str = "stream"):
        self.buf, self.pos, self.where = buf, 0, where

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise IRFormatError(f"{self.where}: truncated (need {n} bytes at offset {self.pos})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self._take(4 * n))
        return vals[0] if n == 1 else vals

    def u32s(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self._take(4 * n), dtype="<u4").astype(np.uint32)

    def f32s(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self._take(4 * n), dtype="<f4").astype(DTYPE)

    def str(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IRFormatError(f"{self.where}: invalid UTF-8 string") from exc

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _write_layer(layer) -> tuple[int, bytes]:
    w = _Writer()
    w.str(layer.name)
    w.u32(*layer.in_shape)
    w.u32(*layer.out_shape)
    w.u32(layer.stride, layer.pad, layer.act)
    if isinstance(layer, DenseLayerIR):
        w.u32(_OP_CODE[layer.op], *layer.kernel)
        w.u32(0 if layer.weight is None else 1)
        if layer.weight is not None:
            w.u32(*layer.weight.shape)
            w.f32s(layer.weight)
            w.f32s(layer.bias)
        return TAG_DENSE, w.bytes()
    if isinstance(layer, Conv1x1SparseIR):
        w.u32(layer.oc, layer.ic, layer.go, layer.gi, layer.rows)
        for r in range(layer.rows):
            w.u32s(layer.sd_idx[layer.sd_ptr[r]:layer.sd_ptr[r + 1]])
        w.f32s(layer.packed)
        w.f32s(layer.bias)
        return TAG_CONV1X1_SPARSE, w.bytes()
    if isinstance(layer, DwSparseIR):
        w.u32(layer.grouping.total)
        w.u32s(layer.grouping.groups)
        w.u32s(layer.codes)
        w.f32s(layer.packed)
        w.f32s(layer.bias)
        return TAG_DW_SPARSE, w.bytes()
    raise TypeError(type(layer).__name__)


def serialize(model: ModelIR) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(model.version, len(model.layers))
    w.str(model.input_name)
    w.str(model.output_name)
    for layer in model.layers:
        tag, payload = _write_layer(layer)
        w.u32(tag, len(payload))
        w.parts.append(payload)
    body = w.bytes()
    return body + struct.pack("<I", zlib.crc32(body))


def _read_layer(tag: int, payload: bytes, index: int):
    r = _Reader(payload, f"layer record {index}")
    name = r.str()
    r.where = f"layer {index} {name!r}"
    in_shape, out_shape = r.u32(4), r.u32(4)
    stride, pad, act = r.u32(3)
    if tag == TAG_DENSE:
        op_code, kh, kw = r.u32(3)
        if op_code >= len(DENSE_OPS):
            raise IRFormatError(f"{r.where}: unknown op code {op_code}")
        weight = bias = None
        if r.u32():
            wshape = r.u32(4)
            weight = r.f32s()
            if weight.size != int(np.prod(wshape)):
                raise IRFormatError(f"{r.where}: weight blob size does not match its shape")
            weight = weight.reshape(wshape)
            bias = r.f32s()
        layer = DenseLayerIR(name, DENSE_OPS[op_code], in_shape, out_shape, stride, pad, act,
                             (kh, kw), weight, bias)
    elif tag == TAG_CONV1X1_SPARSE:
        oc, ic, go, gi, rows = r.u32(5)
        segs = [r.u32s() for _ in range(rows)]
        sd_ptr = np.zeros(rows + 1, dtype=np.uint32)
        np.cumsum([s.size for s in segs], out=sd_ptr[1:])
        sd_idx = np.concatenate(segs).astype(np.uint32) if segs else np.zeros(0, np.uint32)
        packed, bias = r.f32s(), r.f32s()
        layer = Conv1x1SparseIR(name, in_shape, out_shape, oc, ic, sd_ptr, sd_idx, packed, bias,
                                stride, pad, act, go, gi)
    elif tag == TAG_DW_SPARSE:
        total = r.u32()
        widths = tuple(int(x) for x in r.u32s())
        codes = tuple(int(x) for x in r.u32s())
        packed, bias = r.f32s(), r.f32s()
        try:
            grouping = ChannelGrouping(widths, total)
        except ValueError as exc:
            raise IRFormatError(f"{r.where}: {exc}") from exc
        layer = DwSparseIR(name, in_shape, out_shape, grouping, codes, packed, bias, stride, pad, act)
    else:
        raise IRFormatError(f"layer record {index}: unknown tag {tag}")
    if not r.done():
        raise IRFormatError(f"{r.where}: {len(payload) - r.pos} trailing bytes in record")
    return layer


def deserialize(buf: bytes, check: bool = True) -> ModelIR:
    """Parse and (by default) validate a ``.sbnn`` byte stream."""
    buf = bytes(buf)
    if len(buf) < 12 + 4:
        raise IRFormatError("stream too short for header and checksum")
    if buf[:4] != MAGIC:
        raise IRFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.pos = 4
    version, count = r.u32(2)
    if version != VERSION:
        raise IRFormatError(f"unsupported version {version}")
    if zlib.crc32(body) != crc:
        raise IRFormatError("checksum mismatch")
    input_name, output_name = r.str(), r.str()
    layers = []
    for i in range(count):
        tag, length = r.u32(2)
        layers.append(_read_layer(tag, r._take(length), i))
    if not r.done():
        raise IRFormatError(f"{len(body) - r.pos} trailing bytes after the last layer")
    model = ModelIR(layers, input_name, output_name, version)
    if check:
        problems = validate(model)
        if problems:
            raise IRValidationError(problems)
    return model


def save(model: ModelIR, path) -> int:
    data = serialize(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path, check: bool = True) -> ModelIR:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), check=check)


def layer_summary(layer) -> dict:
    """Human-facing facts about one layer record (used by ``inspect``)."""
    d = {"name": layer.name, "in_shape": list(layer.in_shape), "out_shape": list(layer.out_shape),
         "stride": layer.stride, "pad": layer.pad, "act": layer.act}
    if isinstance(layer, DenseLayerIR):
        d.update(kind="dense", op=layer.op, sparsity=0.0,
                 weight_floats=0 if layer.weight is None else int(layer.weight.size))
        if layer.weight is not None:
            d["sparsity"] = float(np.mean(layer.weight == 0))
    elif isinstance(layer, Conv1x1SparseIR):
        total = layer.rows * layer.cols
        d.update(kind="conv1x1_sparse", op="fc" if layer.flatten else "conv1x1",
                 oc=layer.oc, ic=layer.ic, kept_blocks=layer.kept_blocks, total_blocks=total,
                 sparsity=1.0 - layer.kept_blocks / total if total else 0.0,
                 weight_floats=int(layer.packed.size),
                 packed_bytes=4 * int(layer.packed.size), index_bytes=4 * layer.kept_blocks)
    else:
        dense = sum(1 for c in layer.codes if c == DW_DENSE_CODE)
        kept = sum(tap_count(c) * len(layer.grouping.members(i)) for i, c in enumerate(layer.codes))
        d.update(kind="dw_sparse", op="dwconv", groups=list(layer.grouping.groups),
                 codes=list(layer.codes), dense_groups=dense,
                 sparsity=1.0 - kept / (9 * layer.channels), weight_floats=int(layer.packed.size))
    return d
