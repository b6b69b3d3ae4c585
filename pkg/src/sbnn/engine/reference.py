"""Dense reference operators.

These are the oracle the sparse kernels are checked against: textbook
direct convolution over NHWC activations and ``(oc, kh, kw, ic)`` weights,
accumulated in float64 and rounded to float32 once at the end.
"""
from __future__ import annotations

import numpy as np

from ..core import DTYPE, as_activation


def _apply_act(y: np.ndarray, act: int) -> np.ndarray:
    if act == 1:
        return np.maximum(y, 0)
    if act == 2:
        return np.clip(y, 0, 6)
    return y


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, act: int = 0) -> np.ndarray:
    x = as_activation(x).astype(np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, wd, c = x.shape
    oc, kh, kw, ic = w.shape
    if ic != c:
        raise ValueError(f"input has {c} channels, weight expects {ic}")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = _padded(x, pad)
    y = np.zeros((n, oh, ow, oc))
    for r in range(kh):
        for q in range(kw):
            win = xp[:, r:r + stride * (oh - 1) + 1:stride, q:q + stride * (ow - 1) + 1:stride, :]
            y += win @ w[:, r, q, :].T
    if b is not None:
        y += np.asarray(b, dtype=np.float64)
    return _apply_act(y, act).astype(DTYPE)


def conv1x1(x, w, b=None, stride: int = 1, act: int = 0) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim == 2:
        w = w[:, None, None, :]
    return conv2d(x, w, b, stride, 0, act)


def dwconv(x, w, b=None, stride: int = 1, pad: int = 1, act: int = 0) -> np.ndarray:
    x = as_activation(x).astype(np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, wd, c = x.shape
    oc, kh, kw, one = w.shape
    if one != 1 or oc != c:
        raise ValueError(f"depthwise weight {w.shape} does not fit {c} channels")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = _padded(x, pad)
    y = np.zeros((n, oh, ow, c))
    for r in range(kh):
        for q in range(kw):
            win = xp[:, r:r + stride * (oh - 1) + 1:stride, q:q + stride * (ow - 1) + 1:stride, :]
            y += win * w[:, r, q, 0]
    if b is not None:
        y += np.asarray(b, dtype=np.float64)
    return _apply_act(y, act).astype(DTYPE)


def fc(x, w, b=None, act: int = 0) -> np.ndarray:
    x = as_activation(x)
    n = x.shape[0]
    w = np.asarray(w, dtype=np.float64)
    w2 = w.reshape(w.shape[0], -1)
    flat = x.reshape(n, -1).astype(np.float64)
    if flat.shape[1] != w2.shape[1]:
        raise ValueError(f"flattened input has {flat.shape[1]} features, weight expects {w2.shape[1]}")
    y = flat @ w2.T
    if b is not None:
        y += np.asarray(b, dtype=np.float64)
    return _apply_act(y, act).astype(DTYPE).reshape(n, 1, 1, -1)


def pool(x, kernel, stride: int, pad: int = 0, mode: str = "avg") -> np.ndarray:
    x = as_activation(x).astype(np.float64)
    n, h, wd, c = x.shape
    kh, kw = kernel
    oh, ow = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=fill) if pad else x
    wins = [xp[:, r:r + stride * (oh - 1) + 1:stride, q:q + stride * (ow - 1) + 1:stride, :]
            for r in range(kh) for q in range(kw)]
    stack = np.stack(wins)
    y = stack.max(axis=0) if mode == "max" else stack.sum(axis=0) / (kh * kw)
    return y.astype(DTYPE)


def relu(x) -> np.ndarray:
    return np.maximum(as_activation(x), 0)


def relu6(x) -> np.ndarray:
    return np.clip(as_activation(x), 0, 6)


def softmax(x) -> np.ndarray:
    x = as_activation(x).astype(np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def run_dense_layer(layer, x: np.ndarray) -> np.ndarray:
    """Execute one :class:`~sbnn.ir.DenseLayerIR` with the reference operators."""
    op = layer.op
    if op == "conv2d":
        return conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad, layer.act)
    if op == "conv1x1":
        if layer.pad:
            return conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad, layer.act)
        return conv1x1(x, layer.weight, layer.bias, layer.stride, layer.act)
    if op == "dwconv":
        return dwconv(x, layer.weight, layer.bias, layer.stride, layer.pad, layer.act)
    if op == "fc":
        return fc(x, layer.weight, layer.bias, layer.act)
    if op in ("avgpool", "maxpool"):
        return pool(x, layer.kernel, layer.stride, layer.pad, op[:3])
    if op == "relu":
        return relu(x)
    if op == "relu6":
        return relu6(x)
    if op == "softmax":
        return softmax(x)
    raise ValueError(f"layer {layer.name!r}: unsupported op {op!r}")


def run_reference(model, x) -> np.ndarray:
    """Run a :class:`~sbnn.ir.ModelIR` with every layer densified."""
    from ..ir import to_dense
    y = as_activation(x)
    for layer in to_dense(model).layers:
        y = run_dense_layer(layer, y)
    return y
