"""Dense tensors, channel-grouped packing and channel partitioning.

Plain activations are numpy arrays of shape ``(n, h, w, c)`` in float32.
Weights are ``(oc, kh, kw, ic)`` float32 arrays; depthwise weights have
``ic == 1``.  A channel-grouped tensor stores each channel group as its own
contiguous ``(h, w, width)`` slab, which is what the depthwise kernels read.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUP_WIDTHS = (16, 8, 4)
DTYPE = np.float32


def as_activation(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ValueError(f"activation must be 4-d (n, h, w, c), got shape {x.shape}")
    return x


def as_weight(w, depthwise: bool = False) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=DTYPE)
    if w.ndim != 4:
        raise ValueError(f"weight must be 4-d (oc, kh, kw, ic), got shape {w.shape}")
    if depthwise and w.shape[3] != 1:
        raise ValueError(f"depthwise weight must have ic == 1, got shape {w.shape}")
    return w


@dataclass(frozen=True)
class ChannelGrouping:
    groups: tuple[int, ...]
    total: int

    def __post_init__(self):
        if any(g not in GROUP_WIDTHS for g in self.groups):
            raise ValueError(f"group widths must be in {GROUP_WIDTHS}: {self.groups}")
        if list(self.groups) != sorted(self.groups, reverse=True):
            raise ValueError(f"group widths must be non-increasing: {self.groups}")
        if self.total < 1 or not (self.total <= self.padded < self.total + 4):
            raise ValueError(f"groups {self.groups} do not cover {self.total} channels")

    @property
    def padded(self) -> int:
        return sum(self.groups)

    @property
    def starts(self) -> tuple[int, ...]:
        out, s = [], 0
        for g in self.groups:
            out.append(s)
            s += g
        return tuple(out)

    def members(self, i: int) -> range:
        """Real (non-padding) channel indices of group ``i``."""
        s = self.starts[i]
        return range(s, min(s + self.groups[i], self.total))

    @classmethod
    def uniform(cls, c: int, g: int) -> "ChannelGrouping":
        if g not in GROUP_WIDTHS:
            raise ValueError(f"group width must be one of {GROUP_WIDTHS}, got {g}")
        n = -(-c // g)
        # uniform grouping may pad by up to g-1 channels, bypass the remainder check
        obj = object.__new__(cls)
        object.__setattr__(obj, "groups", (g,) * n)
        object.__setattr__(obj, "total", c)
        return obj


def partition_channels(c: int, preferred: int = 16) -> ChannelGrouping:
    """Cover ``c`` channels with 16-wide groups plus at most one 8 and one 4.

    The remainder is rounded up to a multiple of 4, so at most three
    channels are padding.
    """
    if c < 1:
        raise ValueError("channel count must be >= 1")
    if preferred != 16:
        raise ValueError("only 16-wide preferred groups are supported")
    padded = -(-c // 4) * 4
    groups = [16] * (padded // 16)
    rest = padded % 16
    if rest >= 8:
        groups.append(8)
        rest -= 8
    if rest:
        groups.append(4)
    return ChannelGrouping(tuple(groups), c)


@dataclass(frozen=True, eq=False)
class GroupedTensor:
    """Channel-grouped activation; ``data`` is ``(n, padded * h * w)``."""

    data: np.ndarray
    shape: tuple[int, int, int, int]
    grouping: ChannelGrouping

    def group(self, b: int, i: int) -> np.ndarray:
        """View of group ``i`` of batch item ``b`` as ``(h, w, width)``."""
        _, h, w, _ = self.shape
        s = self.grouping.starts[i] * h * w
        g = self.grouping.groups[i]
        return self.data[b, s:s + g * h * w].reshape(h, w, g)

    def __eq__(self, other):
        if not isinstance(other, GroupedTensor):
            return NotImplemented
        return (self.shape == other.shape and self.grouping == other.grouping
                and np.array_equal(self.data, other.data))


def _grouping_for(c: int, g) -> ChannelGrouping:
    if isinstance(g, ChannelGrouping):
        if g.total != c:
            raise ValueError(f"grouping covers {g.total} channels, tensor has {c}")
        return g
    return ChannelGrouping.uniform(c, int(g))


def pack_grouped(t, g) -> GroupedTensor:
    """Pack a plain NHWC tensor into channel groups.

    ``g`` is a group width in {4, 8, 16} or an explicit :class:`ChannelGrouping`.
    Channel ``c`` in group ``k`` (start ``s``, width ``gw``) of pixel ``p``
    lands at ``(s * h * w) + p * gw + (c - s)``; padding channels are zero.
    """
    t = as_activation(t)
    n, h, w, c = t.shape
    grouping = _grouping_for(c, g)
    cp = grouping.padded
    src = t
    if cp != c:
        src = np.zeros((n, h, w, cp), dtype=DTYPE)
        src[..., :c] = t
    out = np.empty((n, cp * h * w), dtype=DTYPE)
    for s, gw in zip(grouping.starts, grouping.groups):
        out[:, s * h * w:(s + gw) * h * w] = src[..., s:s + gw].reshape(n, -1)
    return GroupedTensor(out, (n, h, w, c), grouping)


def unpack_grouped(t: GroupedTensor, original_c: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_grouped`; padding channels are dropped."""
    n, h, w, c = t.shape
    cp = t.grouping.padded
    if original_c is None:
        original_c = c
    if original_c > cp:
        raise ValueError(f"original_c={original_c} exceeds padded width {cp}")
    full = np.empty((n, h, w, cp), dtype=DTYPE)
    for s, gw in zip(t.grouping.starts, t.grouping.groups):
        full[..., s:s + gw] = t.data[:, s * h * w:(s + gw) * h * w].reshape(n, h, w, gw)
    return np.ascontiguousarray(full[..., :original_c])
