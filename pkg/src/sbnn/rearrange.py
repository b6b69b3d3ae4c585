"""Whole-network filter rearrangement ahead of block pruning.

Reordering a layer's filters changes which filters share a ``go``-row block,
and therefore how much l1 mass survives connectivity pruning.  The search is
done per layer over canonical permutations (groups internally ascending,
groups ordered by first index); every filter permutation is then mirrored
onto the input channels of the consuming layers so the network computes the
same function.

Permutation convention: ``perm[i]`` is the *old* index placed at new
position ``i``, i.e. ``w_new = w_old[perm]``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .model import ACTIVATION_OPS, POOL_OPS, Model

log = logging.getLogger(__name__)

PASS_THROUGH_OPS = ACTIVATION_OPS | POOL_OPS | {"softmax"}
DEFAULT_CAP = 10**6


class PlanError(ValueError):
    """Raised when a graph or plan cannot be permuted safely."""


def unique_partition_count(n: int, go: int) -> int:
    """Number of ways to split ``n`` filters into unordered groups of ``go``."""
    if go < 1 or n % go:
        raise ValueError(f"group size {go} does not divide {n}")
    k = n // go
    return factorial(n) // (factorial(go) ** k * factorial(k))


def is_canonical(perm, go: int) -> bool:
    p = list(perm)
    groups = [p[i:i + go] for i in range(0, len(p), go)]
    return (sorted(p) == list(range(len(p)))
            and all(g == sorted(g) for g in groups)
            and [g[0] for g in groups] == sorted(g[0] for g in groups))


def _canonical(rest: tuple[int, ...], go: int):
    if not rest:
        yield ()
        return
    first, others = rest[0], rest[1:]
    for combo in itertools.combinations(others, go - 1):
        chosen = set(combo)
        remaining = tuple(x for x in others if x not in chosen)
        for tail in _canonical(remaining, go):
            yield (first, *combo, *tail)


def enumerate_canonical_permutations(n: int, go: int, cap: int = DEFAULT_CAP):
    """Yield every canonical permutation of ``range(n)`` in lexicographic order."""
    count = unique_partition_count(n, go)
    if count > cap:
        raise ValueError(f"{count} canonical permutations of {n} filters exceed the cap of {cap}")
    yield from _canonical(tuple(range(n)), go)


def canonicalize(perm, go: int) -> np.ndarray:
    p = list(perm)
    groups = [sorted(p[i:i + go]) for i in range(0, len(p), go)]
    full = [g for g in groups if len(g) == go]
    tail = [g for g in groups if len(g) != go]
    full.sort(key=lambda g: g[0])
    return np.array([x for g in full + tail for x in g], dtype=np.int64)


class _Objective:
    """Retained l1 of a block-pruned ``oc x ic`` magnitude matrix under filter reorderings."""

    def __init__(self, mag: np.ndarray, go: int, gi: int, rho: float):
        oc, ic = mag.shape
        cols = -(-ic // gi)
        padded = np.zeros((oc, cols * gi))
        padded[:, :ic] = mag
        self.per_filter = padded.reshape(oc, cols, gi).sum(axis=2)
        self.rows = -(-oc // go)
        self.oc, self.go = oc, go
        self.n_remove = int(np.floor(self.rows * cols * rho + 1e-9))
        self.evaluations = 0

    def __call__(self, perm) -> float:
        self.evaluations += 1
        s = np.zeros((self.rows * self.go, self.per_filter.shape[1]))
        s[:self.oc] = self.per_filter[np.asarray(perm)]
        blocks = s.reshape(self.rows, self.go, -1).sum(axis=1).ravel()
        if self.n_remove == 0:
            return float(blocks.sum())
        if self.n_remove >= blocks.size:
            return 0.0
        lowest = np.partition(blocks, self.n_remove - 1)[:self.n_remove]
        return float(blocks.sum() - lowest.sum())


def magnitude_matrix(w) -> np.ndarray:
    """``(oc, ic)`` per-kernel l1 norms of a ``(oc, kh, kw, ic)`` weight (or a 2-d matrix)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return np.abs(w)
    return np.abs(w).sum(axis=(1, 2))


def retained_l1(w, perm, go: int, gi: int, rho: float) -> float:
    """l1 mass kept when ``w`` is filter-permuted by ``perm`` then block pruned."""
    return _Objective(magnitude_matrix(w), go, gi, rho)(perm)


def search_filter_permutation(w, go: int, gi: int, rho: float, budget: int = 10**4) -> np.ndarray:
    """Filter order maximizing retained l1 after ``go x gi`` block pruning at ``rho``.

    Exhaustive over canonical permutations when they fit in ``budget``
    evaluations, otherwise first-improvement pairwise-swap hill climbing from
    the identity.  Never returns something scoring below the identity; equal
    scores resolve to the lexicographically smallest canonical permutation.
    """
    mag = magnitude_matrix(w)
    n = mag.shape[0]
    obj = _Objective(mag, go, gi, rho)
    ident = np.arange(n)
    base = obj(ident)
    tol = 1e-12 * max(1.0, abs(base))
    if n % go == 0 and unique_partition_count(n, go) <= budget:
        best, best_perm = base, ident
        for perm in enumerate_canonical_permutations(n, go, cap=budget):
            score = obj(perm)
            if score > best + tol:
                best, best_perm = score, np.array(perm)
        return best_perm

    perm, cur = ident.copy(), base
    improved = True
    while improved and obj.evaluations < budget:
        improved = False
        for i in range(n):
            for j in range(i + 1, n):
                if i // go == j // go:
                    continue
                if obj.evaluations >= budget:
                    break
                perm[i], perm[j] = perm[j], perm[i]
                score = obj(perm)
                if score > cur + tol:
                    cur, improved = score, True
                else:
                    perm[i], perm[j] = perm[j], perm[i]
    return canonicalize(perm, go)


@dataclass
class LayerPermutation:
    filter_perm: np.ndarray
    channel_perm: np.ndarray


@dataclass
class PermutationPlan:
    layers: dict[str, LayerPermutation] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def is_identity(self) -> bool:
        return all(np.array_equal(lp.filter_perm, np.arange(lp.filter_perm.size))
                   and np.array_equal(lp.channel_perm, np.arange(lp.channel_perm.size))
                   for lp in self.layers.values())

    def to_dict(self) -> dict:
        return {
            "layers": {k: {"filter_perm": v.filter_perm.tolist(),
                           "channel_perm": v.channel_perm.tolist()}
                       for k, v in self.layers.items()},
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PermutationPlan":
        layers = {k: LayerPermutation(np.asarray(v["filter_perm"], dtype=np.int64),
                                      np.asarray(v["channel_perm"], dtype=np.int64))
                  for k, v in d["layers"].items()}
        return cls(layers, [tuple(e) for e in d.get("edges", [])])


def _expand_flatten(perm: np.ndarray, in_shape) -> np.ndarray:
    """Channel permutation seen by an FC layer reading a flattened NHWC tensor."""
    _, h, w, c = in_shape
    if h * w == 1:
        return perm
    return (np.arange(h * w)[:, None] * c + perm[None, :]).ravel()


def _pinned_layers(model: Model) -> set[str]:
    """Weighted layers whose channel order is visible at the network output."""
    pinned, stack = set(), [model.output_name]
    while stack:
        layer = model.layer(stack.pop())
        if layer.op in ("conv2d", "conv1x1", "fc"):
            pinned.add(layer.name)
            continue
        stack.extend(p for p in layer.inputs if p != model.input_name)
    return pinned


def propagate_permutations(model: Model, filter_perms: dict | None = None) -> PermutationPlan:
    """Turn per-layer filter permutations into a function-preserving plan.

    Depthwise and shape-preserving layers forward the incoming permutation
    unchanged; layers feeding the network output are pinned to identity.
    """
    filter_perms = filter_perms or {}
    pinned = _pinned_layers(model)
    out_perm = {model.input_name: np.arange(model.input_shape[3])}
    plan = PermutationPlan()
    for layer in model.layers:
        for parent in layer.inputs:
            plan.edges.append((parent, layer.name))
        if layer.op == "concat":
            raise PlanError(f"layer {layer.name!r}: channel concat has no permutation rule")
        incoming = [out_perm[p] for p in layer.inputs]
        if layer.op == "add":
            if any(not np.array_equal(incoming[0], p) for p in incoming[1:]):
                raise PlanError(f"layer {layer.name!r}: residual add joins differently permuted branches")
        elif len(incoming) != 1:
            raise PlanError(f"layer {layer.name!r}: op {layer.op!r} cannot take {len(incoming)} inputs")
        p_in = incoming[0]
        if layer.op in ("conv2d", "conv1x1", "fc"):
            oc = layer.out_shape[3]
            fp = filter_perms.get(layer.name)
            if fp is None or layer.name in pinned:
                fp = np.arange(oc)
            fp = np.asarray(fp, dtype=np.int64)
            if sorted(fp.tolist()) != list(range(oc)):
                raise PlanError(f"layer {layer.name!r}: filter permutation is not a bijection on {oc}")
            cp = _expand_flatten(p_in, layer.in_shape) if layer.op == "fc" else p_in
            plan.layers[layer.name] = LayerPermutation(fp, cp)
            out_perm[layer.name] = fp
        elif layer.op == "dwconv" or layer.op in PASS_THROUGH_OPS or layer.op == "add":
            plan.layers[layer.name] = LayerPermutation(p_in, p_in)
            out_perm[layer.name] = p_in
        else:
            raise PlanError(f"layer {layer.name!r}: op {layer.op!r} has no permutation rule")
    return plan


def validate_plan(model: Model, plan: PermutationPlan) -> list[str]:
    problems = []
    for layer in model.layers:
        lp = plan.layers.get(layer.name)
        if lp is None:
            problems.append(f"layer {layer.name!r} missing from plan")
            continue
        ws = layer.weight_shape
        n_out = layer.out_shape[3]
        n_in = ws[3] if ws is not None and layer.op != "dwconv" else layer.in_shape[3]
        for what, p, n in (("filter", lp.filter_perm, n_out), ("channel", lp.channel_perm, n_in)):
            if p.size != n or not np.array_equal(np.sort(p), np.arange(n)):
                problems.append(f"layer {layer.name!r}: {what} permutation is not a bijection on {n}")
        for parent in layer.inputs:
            if parent == model.input_name:
                expect = np.arange(layer.in_shape[3])
            elif parent in plan.layers:
                expect = plan.layers[parent].filter_perm
            else:
                continue
            if layer.op == "fc":
                expect = _expand_flatten(expect, layer.in_shape)
            if not np.array_equal(lp.channel_perm, expect):
                problems.append(f"edge {parent!r} -> {layer.name!r}: channel order does not follow parent")
    return problems


def apply_permutation_plan(model: Model, plan: PermutationPlan) -> Model:
    problems = validate_plan(model, plan)
    if problems:
        raise PlanError("; ".join(problems))
    out = model.copy()
    for layer in out.layers:
        lp = plan.layers[layer.name]
        if layer.weight is None:
            continue
        if layer.op == "dwconv":
            layer.weight = np.ascontiguousarray(layer.weight[lp.filter_perm])
        else:
            layer.weight = np.ascontiguousarray(layer.weight[lp.filter_perm][..., lp.channel_perm])
        layer.bias = np.ascontiguousarray(layer.bias[lp.filter_perm])
    return out


@dataclass
class RearrangeReport:
    layers: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"layers": self.layers}


def rearrange_network(model: Model, go: int = 4, gi: int = 4, rho: float = 0.3,
                      budget: int = 2000, ops=("conv1x1", "fc")):
    """Search filter orders layer by layer (in graph order) and apply them.

    Each layer is searched with its input channels already in the order its
    parent will produce, so the retained-l1 gain is measured on the weights
    that actually get pruned.  Returns ``(model', plan, report)``.
    """
    pinned = _pinned_layers(model)
    perms: dict[str, np.ndarray] = {}
    report = RearrangeReport()
    for layer in model.layers:
        if layer.op not in ops or layer.weight is None or layer.name in pinned or not layer.sparse:
            continue
        partial = propagate_permutations(model, perms)
        w = layer.weight[..., partial.layers[layer.name].channel_perm]
        fp = search_filter_permutation(w, go, gi, rho, budget)
        before = retained_l1(w, np.arange(w.shape[0]), go, gi, rho)
        after = retained_l1(w, fp, go, gi, rho)
        perms[layer.name] = fp
        report.layers[layer.name] = {"retained_before": before, "retained_after": after}
        log.info("%s: retained l1 %.6g -> %.6g", layer.name, before, after)
    plan = propagate_permutations(model, perms)
    return apply_permutation_plan(model, plan), plan, report
