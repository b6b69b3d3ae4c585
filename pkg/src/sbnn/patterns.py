"""3x3 kernel keep-mask catalogs and l1-maximizing pattern selection."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class CatalogKind(enum.Enum):
    DW39 = "dw39"
    CONV59 = "conv59"


@dataclass(frozen=True, eq=False)
class KernelPattern:
    code: int
    mask: np.ndarray  # (3, 3) bool, True = kept

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, KernelPattern):
            return NotImplemented
        return self.code == other.code and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash((self.code, self.mask.tobytes()))


@dataclass(frozen=True)
class PatternCatalog:
    kind: CatalogKind
    patterns: tuple[KernelPattern, ...]
    dense_code: int | None = None

    def __len__(self):
        return len(self.patterns)

    def mask(self, code: int) -> np.ndarray:
        if self.dense_code is not None and code == self.dense_code:
            return np.ones((3, 3), dtype=bool)
        if not 0 <= code < len(self.patterns):
            raise ValueError(f"pattern code {code} out of range for {self.kind.value} catalog")
        return self.patterns[code].mask

    def masks(self) -> np.ndarray:
        """Stacked ``(len, 3, 3)`` keep masks of the sparse patterns."""
        return np.stack([p.mask for p in self.patterns])


DW_DENSE_CODE = 8


def dw_row_columns(code: int) -> tuple[int, int, int]:
    """Kept side column (0 or 2) for each kernel row of a 3:9 pattern.

    Bit ``r`` of ``code`` picks the column removed in row ``r``: 0 removes
    column 0 (so column 2 is kept), 1 removes column 2.
    """
    if not 0 <= code < 8:
        raise ValueError(f"3:9 pattern code must be in [0, 8), got {code}")
    return tuple(0 if (code >> r) & 1 else 2 for r in range(3))


@lru_cache(maxsize=None)
def dw_pattern_catalog() -> PatternCatalog:
    pats = []
    for code in range(8):
        m = np.ones((3, 3), dtype=bool)
        for r, keep in enumerate(dw_row_columns(code)):
            m[r, 2 - keep] = False
        m.setflags(write=False)
        pats.append(KernelPattern(code, m))
    return PatternCatalog(CatalogKind.DW39, tuple(pats), dense_code=DW_DENSE_CODE)


@lru_cache(maxsize=None)
def conv59_pattern_catalog() -> PatternCatalog:
    cells = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
    pats = []
    for code, combo in enumerate(itertools.combinations(cells, 3)):
        m = np.zeros((3, 3), dtype=bool)
        m[1, 1] = True
        for r, c in combo:
            m[r, c] = True
        m.setflags(write=False)
        pats.append(KernelPattern(code, m))
    return PatternCatalog(CatalogKind.CONV59, tuple(pats))


def pattern_scores(group, catalog: PatternCatalog) -> np.ndarray:
    """Retained l1 of a stack of 3x3 kernels under every catalog pattern."""
    a = np.abs(np.asarray(group, dtype=np.float64)).reshape(-1, 3, 3).sum(axis=0)
    return np.einsum("kij,ij->k", catalog.masks().astype(np.float64), a)


def best_pattern_for_group(group, catalog: PatternCatalog) -> int:
    """Code of the pattern keeping the most l1 mass; lowest code wins ties."""
    scores = pattern_scores(group, catalog)
    if scores.size == 0:
        raise ValueError("empty catalog")
    # argmax returns the first maximum, i.e. the lowest code
    return int(np.argmax(scores))
