import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbnn.core import partition_channels
from sbnn.model import mobilenet_v1
from sbnn.patterns import DW_DENSE_CODE, dw_pattern_catalog
from sbnn.pruner import (
    BlockMask, PruneConfig, apply_mask, conv1x1_connectivity_prune, conv3x3_group_prune,
    dw_pattern_prune, expand_mask, mask_from_json, mask_to_json, network_prune, pruning_quality,
    select_blocks,
)

from conftest import brute_force_block_optimum


def _retained(w, mask):
    return float(np.abs(apply_mask(w, mask).astype(np.float64)).sum())


@pytest.mark.parametrize("oc,ic,rho,removed", [
    (16, 16, 0.3, 4), (16, 16, 0.5, 8), (64, 32, 0.3, 38), (160, 160, 0.3, 480),
    (10, 6, 0.5, 3), (16, 16, 0.0, 0), (16, 16, 1.0, 16),
])
def test_removed_block_count(oc, ic, rho, removed, rng):
    m = conv1x1_connectivity_prune(rng.standard_normal((oc, 1, 1, ic)), 4, 4, rho)
    assert m.removed == removed
    assert m.keep.shape == (-(-oc // 4), -(-ic // 4))


def test_small_blocks_match_exhaustive(rng):
    for _ in range(30):
        w = rng.standard_normal((8, 1, 1, 8))
        m = conv1x1_connectivity_prune(w, 2, 2, 0.5)
        assert _retained(w, m) == pytest.approx(brute_force_block_optimum(w[:, 0, 0, :], 2, 2, 0.5),
                                                rel=1e-6)


def test_removes_lowest_blocks(rng):
    w = rng.standard_normal((16, 1, 1, 16)) * 0.01
    w[:4, 0, 0, :4] = 10.0  # one heavy block must survive any rho < 1
    m = conv1x1_connectivity_prune(w, 4, 4, 15 / 16)
    assert m.keep.sum() == 1 and m.keep[0, 0]


def test_ties_remove_earliest_block():
    keep = select_blocks(np.ones((2, 3)), 0.5)
    np.testing.assert_array_equal(keep, [[False, False, False], [True, True, True]])
    with pytest.raises(ValueError):
        select_blocks(np.ones(4), 1.5)


def test_partial_edge_blocks(rng):
    w = rng.standard_normal((6, 1, 1, 7))
    m = conv1x1_connectivity_prune(w, 4, 4, 0.25)
    assert m.keep.shape == (2, 2) and m.removed == 1
    assert expand_mask(w.shape, m).shape == w.shape


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.floats(0, 1))
def test_delta_matches_mask(oc, ic, rho):
    w = np.random.default_rng(oc * 41 + ic).standard_normal((oc, 1, 1, ic))
    m = conv1x1_connectivity_prune(w, 4, 4, rho)
    ws = apply_mask(w, m)
    a = np.abs(w.astype(np.float32)).astype(np.float64)
    removed = a[~expand_mask(w.shape, m)].sum()
    assert pruning_quality(w.astype(np.float32), ws) == pytest.approx(removed / a.sum(), rel=1e-9)
    assert 0.0 <= pruning_quality(w, ws) <= 1.0


def test_delta_zero_weights():
    assert pruning_quality(np.zeros((4, 1, 1, 4)), np.zeros((4, 1, 1, 4))) == 0.0


def test_dw_pattern_prune_brute_force(rng):
    cat = dw_pattern_catalog()
    for c in (16, 24, 36, 5):
        w = rng.standard_normal((c, 3, 3, 1))
        codes = dw_pattern_prune(w)
        g = partition_channels(c)
        assert codes.grouping == g
        for i, code in enumerate(codes.codes):
            a = np.abs(w[list(g.members(i)), :, :, 0])
            best = max(range(8), key=lambda k: (a[:, cat.mask(k)].sum(), -k))
            assert code == best


def test_dw_sparsity_is_one_third(rng):
    w = rng.standard_normal((64, 3, 3, 1))
    keep = expand_mask(w.shape, dw_pattern_prune(w))
    assert keep.mean() == pytest.approx(6 / 9)


def test_dw_dense_groups_take_largest_losses(rng):
    w = rng.standard_normal((64, 3, 3, 1)) * 0.1
    w[32:48, :, 0, 0] = 5.0  # group 2 loses a lot under any 3:9 pattern
    w[32:48, :, 2, 0] = 5.0
    codes = dw_pattern_prune(w, dense_groups=1)
    assert codes.codes[2] == DW_DENSE_CODE
    assert sum(c == DW_DENSE_CODE for c in codes.codes) == 1
    with pytest.raises(ValueError):
        dw_pattern_prune(w, dense_groups=5)


def test_conv3x3_group_prune(rng):
    w = rng.standard_normal((8, 3, 3, 8)) * 0.01
    # every kernel of group (0, 0) peaks at centre + top row
    w[:4, 0, :, :4] = 3.0
    w[:4, 1, 1, :4] = 3.0
    m = conv3x3_group_prune(w, 4, 4, 0.25)
    assert m.blocks.removed == 1
    assert (m.codes[~m.blocks.keep] == -1).all()
    assert m.codes[0, 0] == 0  # cells (0,0),(0,1),(0,2) is the first combination
    keep = expand_mask(w.shape, m)
    assert keep[:4, :, :, :4].sum(axis=(1, 2)).max() == 4


def test_prune_config_roundtrip():
    cfg = PruneConfig.from_dict({"conv1x1": {"rho": 0.3}, "dw": {"dense_groups": 2}})
    assert cfg.conv1x1_rho == 0.3 and cfg.dw_dense_groups == 2
    assert PruneConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"conv1x1": {"rho": 1.5}}, {"bogus": 1}, {"enabled": ["pool"]}, {"dw": {"go": 8}}):
        with pytest.raises(ValueError):
            PruneConfig.from_dict(bad)


@pytest.fixture(scope="module")
def mobilenet():
    return mobilenet_v1()


def test_network_prune_rho_zero(mobilenet):
    masks, report = network_prune(mobilenet, PruneConfig(enabled={"conv1x1"}))
    assert report.flop_sparsity == 0.0
    assert all(r.sparsity == 0.0 for r in report.layers)


def test_network_prune_mobilenet_rho(mobilenet):
    masks, report = network_prune(mobilenet, PruneConfig(conv1x1_rho=0.3, enabled={"conv1x1"}))
    for r in report.layers:
        if r.op == "conv1x1":
            layer = mobilenet.layer(r.name)
            blocks = (layer.out_shape[3] // 4) * (layer.in_shape[3] // 4)
            assert abs(r.sparsity - 0.3) <= 1.0 / blocks
            assert r.kept_blocks + r.removed_blocks == blocks
        else:
            assert not r.pruned
    d = report.to_dict()
    json.dumps(d)
    assert set(d) == {"layers", "network", "passthrough"}


@pytest.mark.parametrize("kind", ["block", "dw", "conv3x3"])
def test_mask_json_roundtrip(kind, rng):
    if kind == "block":
        m = conv1x1_connectivity_prune(rng.standard_normal((12, 1, 1, 20)), 4, 4, 0.4)
    elif kind == "dw":
        m = dw_pattern_prune(rng.standard_normal((40, 3, 3, 1)), dense_groups=1)
    else:
        m = conv3x3_group_prune(rng.standard_normal((8, 3, 3, 12)), 4, 4, 0.3)
    assert mask_from_json(json.loads(json.dumps(mask_to_json(m)))) == m


def test_mask_json_rejects_garbage():
    with pytest.raises((ValueError, KeyError)):
        mask_from_json({"kind": "block", "go": 4, "gi": 4, "oc": 8, "ic": 8, "keep": [[1, 1, 1]]})
    with pytest.raises(ValueError):
        mask_from_json({"kind": "nope"})


def test_block_mask_shape_check():
    with pytest.raises(ValueError):
        BlockMask(np.ones((3, 3), bool), 4, 4, 8, 8)
