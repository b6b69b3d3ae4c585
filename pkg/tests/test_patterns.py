import itertools

import numpy as np
import pytest

from sbnn.patterns import (
    DW_DENSE_CODE, best_pattern_for_group, conv59_pattern_catalog, dw_pattern_catalog,
    dw_row_columns, pattern_scores,
)


def _dw_mask(code):
    # independent construction: every row keeps its centre plus one side column
    m = np.zeros((3, 3), dtype=bool)
    m[:, 1] = True
    for r in range(3):
        m[r, 0 if (code >> r) & 1 else 2] = True
    return m


def test_dw_catalog_shape_and_density():
    cat = dw_pattern_catalog()
    assert len(cat) == 8
    assert cat.dense_code == DW_DENSE_CODE
    for p in cat.patterns:
        assert p.mask.sum() == 6
        assert p.mask[:, 1].all()
        assert (p.mask.sum(axis=1) == 2).all()
        np.testing.assert_array_equal(p.mask, _dw_mask(p.code))
    assert cat.mask(DW_DENSE_CODE).all()
    assert len({p.mask.tobytes() for p in cat.patterns}) == 8


def test_dw_row_columns():
    assert dw_row_columns(0) == (2, 2, 2)
    assert dw_row_columns(7) == (0, 0, 0)
    assert dw_row_columns(5) == (0, 2, 0)
    with pytest.raises(ValueError):
        dw_row_columns(8)


def test_conv59_catalog():
    cat = conv59_pattern_catalog()
    assert len(cat) == 56
    masks = cat.masks()
    assert masks.shape == (56, 3, 3)
    # "5:9" names the five removed taps; four remain
    assert (masks.reshape(56, 9).sum(axis=1) == 4).all()
    assert masks[:, 1, 1].all()
    assert len({m.tobytes() for m in masks}) == 56
    # lexicographic over combinations of the eight non-centre cells
    cells = [i for i in range(9) if i != 4]
    for code, combo in enumerate(itertools.combinations(cells, 3)):
        assert set(np.flatnonzero(masks[code].ravel())) == set(combo) | {4}


def test_catalogs_are_read_only():
    with pytest.raises(ValueError):
        dw_pattern_catalog().patterns[0].mask[0, 0] = True


def test_best_pattern_brute_force(rng):
    cat = dw_pattern_catalog()
    for _ in range(200):
        g = rng.standard_normal((16, 3, 3))
        scores = [np.abs(g)[:, _dw_mask(c)].sum() for c in range(8)]
        assert best_pattern_for_group(g, cat) == int(np.argmax(scores))


def test_best_pattern_tie_takes_lowest_code():
    assert best_pattern_for_group(np.ones((16, 3, 3)), dw_pattern_catalog()) == 0
    assert best_pattern_for_group(np.zeros((4, 3, 3)), conv59_pattern_catalog()) == 0


def test_pattern_scores_conv59(rng):
    g = rng.standard_normal((5, 3, 3))
    s = pattern_scores(g, conv59_pattern_catalog())
    a = np.abs(g).sum(axis=0)
    assert s.shape == (56,)
    np.testing.assert_allclose(s, [a[m].sum() for m in conv59_pattern_catalog().masks()])
