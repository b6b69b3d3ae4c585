"""Register-budget tile selection for the block-sparse 1x1 kernel.

Output ``mp x np`` tiles are held in 4-lane vector registers, plus ``mp/4``
registers streaming input (channel-serial within a 4-channel block) and
``np`` registers holding one 4x4 weight block.  At ``(20, 4)`` that is
20 + 5 + 4 = 29 registers, which fits the 32 of armv8.
"""
from __future__ import annotations

from dataclasses import dataclass

LANES = 4


@dataclass(frozen=True)
class TileConfig:
    mp: int
    np: int
    registers_used: int


def register_count(mp: int, np_: int) -> int:
    return mp * np_ // LANES + mp // LANES + np_


def access_volume(M: int, N: int, K: int, mp: int, np_: int) -> float:
    """Memory traffic of the tiled product: tiles times per-tile loads and stores."""
    return (M / mp) * (N / np_) * (K * mp + K * np_ + mp * np_)


def solve_tile_config(M: int, N: int, K: int, R: int = 32, np_fixed: int = 4) -> TileConfig:
    """Largest 4-aligned ``mp`` whose register footprint fits ``R`` at ``np = np_fixed``.

    For fixed ``np`` the access volume falls monotonically with ``mp``, so
    the largest feasible ``mp`` is also the volume minimizer.
    """
    if np_fixed < LANES or np_fixed % LANES:
        raise ValueError(f"np must be a positive multiple of {LANES}, got {np_fixed}")
    if min(M, N, K) < 1:
        raise ValueError("M, N and K must be positive")
    if register_count(LANES, np_fixed) > R:
        raise ValueError(f"register budget {R} cannot hold even a {LANES}x{np_fixed} tile "
                         f"(needs {register_count(LANES, np_fixed)})")
    mp = LANES
    while register_count(mp + LANES, np_fixed) <= R:
        mp += LANES
    return TileConfig(mp, np_fixed, register_count(mp, np_fixed))
