"""Region-level Shapley attribution for image classifiers.

Players are the cells of a rectangular grid laid over the image. A coalition
keeps its cells and replaces every other cell with a baseline (per-channel
dataset mean or a constant). Two estimators are provided:

* :func:`partition_shap` computes Owen values over a balanced binary
  partition of the grid under an evaluation budget, the same recursion the
  SHAP Partition explainer uses.
* :func:`exact_shapley` enumerates every coalition; it is the oracle the
  partition estimator is tested against and is limited to 12 regions.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from math import factorial
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, SizeError

ScoreFn = Callable[[np.ndarray], np.ndarray]
ValueFn = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_REGIONS = 12


@dataclass
class MaskerConfig:
    baseline: str = "dataset-mean"  # or "constant"
    constant: float = 0.0
    grid: tuple[int, int] = (8, 8)
    channel_mean: tuple[float, ...] | None = None

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.baseline not in ("dataset-mean", "constant"):
            raise ConfigError(f"unknown baseline kind {self.baseline!r}")
        rows, cols = self.grid
        if rows < 1 or cols < 1 or rows * cols < 2:
            raise ConfigError(f"region grid {self.grid} needs at least two cells")


def region_map(grid: tuple[int, int], height: int, width: int) -> np.ndarray:
    """(h, w) array of row-major region ids; cell edges tile the image exactly."""
    rows, cols = grid
    if rows > height or cols > width:
        raise ConfigError(f"grid {grid} finer than a {height}x{width} image")
    r_edges = np.linspace(0, height, rows + 1).astype(int)
    c_edges = np.linspace(0, width, cols + 1).astype(int)
    r_idx = np.searchsorted(r_edges, np.arange(height), side="right") - 1
    c_idx = np.searchsorted(c_edges, np.arange(width), side="right") - 1
    return r_idx[:, None] * cols + c_idx[None, :]


class Masker:
    def __init__(self, config: MaskerConfig, image_shape: tuple[int, int, int]):
        self.config = config
        c, h, w = image_shape
        self.image_shape = (c, h, w)
        self.regions = region_map(config.grid, h, w)
        self.n_regions = config.grid[0] * config.grid[1]
        self.region_sizes = np.bincount(self.regions.ravel(), minlength=self.n_regions)
        if config.baseline == "constant":
            fill = np.full(c, config.constant, dtype=np.float32)
        else:
            if config.channel_mean is None:
                raise ConfigError("dataset-mean baseline needs channel_mean (see Masker.for_dataset)")
            fill = np.asarray(config.channel_mean, dtype=np.float32)
            if fill.shape != (c,):
                raise DimensionError(f"channel_mean {fill.shape} vs {c} channels")
        self.baseline = np.broadcast_to(fill[:, None, None], (c, h, w)).astype(np.float32)

    @classmethod
    def for_dataset(cls, config: MaskerConfig, dataset) -> "Masker":
        if config.baseline == "dataset-mean" and config.channel_mean is None:
            config = MaskerConfig(config.baseline, config.constant, config.grid,
                                  tuple(float(v) for v in dataset.channel_mean()))
        return cls(config, dataset.image_shape)

    def apply(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """Images for each coalition row of ``masks`` (True keeps a region)."""
        keep = masks[:, self.regions][:, None, :, :]
        return np.where(keep, x[None], self.baseline[None])

    def expand(self, region_values: np.ndarray) -> np.ndarray:
        """Spread each region's value evenly over its pixels -> (1, h, w)."""
        per_pixel = region_values / self.region_sizes
        return per_pixel[self.regions][None].astype(np.float32)


@dataclass
class AttributionMap:
    values: np.ndarray  # (1, h, w) float32
    class_index: int
    sample_id: int = -1
    region_values: np.ndarray | None = None  # float64, one per region
    evaluations: int = 0


# -- partition tree -----------------------------------------------------------


@dataclass
class Node:
    regions: tuple[int, ...]
    children: tuple["Node", "Node"] | None = None
    index: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass
class PartitionTree:
    root: Node
    grid: tuple[int, int]
    nodes: list[Node] = field(default_factory=list)

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf]

    def depth(self, node: Node | None = None) -> int:
        node = node or self.root
        if node.is_leaf:
            return 0
        return 1 + max(self.depth(c) for c in node.children)


def build_partition_tree(grid: tuple[int, int]) -> PartitionTree:
    """Recursive bisection of the region grid along its longer side (rows on ties)."""
    rows, cols = grid
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ConfigError(f"degenerate region grid {grid}")
    nodes: list[Node] = []

    def build(r0, r1, c0, c1) -> Node:
        node = Node(tuple(r * cols + c for r in range(r0, r1) for c in range(c0, c1)), index=len(nodes))
        nodes.append(node)
        h, w = r1 - r0, c1 - c0
        if h * w == 1:
            return node
        if h >= w:
            mid = r0 + h // 2
            node.children = (build(r0, mid, c0, c1), build(mid, r1, c0, c1))
        else:
            mid = c0 + w // 2
            node.children = (build(r0, r1, c0, mid), build(r0, r1, mid, c1))
        return node

    root = build(0, rows, 0, cols)
    return PartitionTree(root, (rows, cols), nodes)


def full_refinement_cost(tree: PartitionTree) -> int:
    """Evaluations needed to expand every (node, context) pair of the Owen recursion."""
    def expansions(node: Node, contexts: int) -> int:
        if node.is_leaf:
            return 0
        return contexts + sum(expansions(c, contexts * 2) for c in node.children)

    return 2 + 2 * expansions(tree.root, 1)


# -- coalition-level estimators ----------------------------------------------


def _checked(values: np.ndarray, expected: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape != (expected,):
        raise DimensionError(f"value function returned {values.shape}, expected ({expected},)")
    if not np.isfinite(values).all():
        raise NumericError("score function returned a non-finite value")
    return values


def owen_values(value_fn: ValueFn, tree: PartitionTree, budget: int,
                region_sizes: np.ndarray | None = None, batch_size: int = 64) -> tuple[np.ndarray, int]:
    """Budgeted Owen values over ``tree``.

    ``value_fn`` maps a (B, R) boolean coalition matrix to B payoffs. Each
    queued item is (node, context, f(context), f(context + node), weight);
    expanding it costs two evaluations and splits its payoff between the
    children in both sibling contexts. Items still queued when the budget
    runs out spread their payoff over their pixels. Returns (values, calls).
    """
    n = sum(len(leaf.regions) for leaf in tree.leaves)
    if budget < 2 * len(tree.leaves):
        raise ConfigError(f"budget {budget} below the minimum {2 * len(tree.leaves)}")
    sizes = np.ones(n) if region_sizes is None else np.asarray(region_sizes, dtype=np.float64)
    empty = np.zeros(n, dtype=bool)
    f_empty, f_full = _checked(value_fn(np.stack([empty, ~empty])), 2)
    evals = 2
    phi = np.zeros(n)
    counter = itertools.count()
    heap: list = []

    def push(node, ctx, f0, f1, weight):
        if node.is_leaf:
            phi[node.regions[0]] += (f1 - f0) * weight
        else:
            heapq.heappush(heap, (-abs(f1 - f0) * weight, next(counter), node, ctx, f0, f1, weight))

    push(tree.root, empty, f_empty, f_full, 1.0)
    while heap and evals + 2 <= budget:
        take = min(batch_size, (budget - evals) // 2, len(heap))
        items = [heapq.heappop(heap) for _ in range(take)]
        masks = []
        for *_, node, ctx, _f0, _f1, _w in items:
            left, right = node.children
            m10, m01 = ctx.copy(), ctx.copy()
            m10[list(left.regions)] = True
            m01[list(right.regions)] = True
            masks += [m10, m01]
        out = _checked(value_fn(np.stack(masks)), len(masks))
        evals += len(masks)
        for j, (*_, node, ctx, f00, f11, w) in enumerate(items):
            left, right = node.children
            f10, f01 = out[2 * j], out[2 * j + 1]
            half = w / 2
            push(left, ctx, f00, f10, half)
            push(right, ctx, f00, f01, half)
            push(left, masks[2 * j + 1], f01, f11, half)
            push(right, masks[2 * j], f10, f11, half)
    for *_, node, _ctx, f0, f1, w in heap:
        idx = list(node.regions)
        phi[idx] += (f1 - f0) * w * sizes[idx] / sizes[idx].sum()
    return phi, evals


def exact_shapley_values(value_fn: ValueFn, n: int) -> np.ndarray:
    """Shapley values by enumerating all 2**n coalitions."""
    if n > MAX_EXACT_REGIONS:
        raise SizeError(f"exact enumeration limited to {MAX_EXACT_REGIONS} players, got {n}")
    codes = np.arange(2 ** n)
    masks = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    v = _checked(value_fn(masks), 2 ** n)
    sizes = masks.sum(axis=1)
    weights = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weights[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return phi


# -- image-level wrappers -----------------------------------------------------


def _image_value_fn(score_fn: ScoreFn, x: np.ndarray, k: int, masker: Masker, chunk: int = 256) -> ValueFn:
    x = np.asarray(x, dtype=np.float32)
    if x.shape != masker.image_shape:
        raise DimensionError(f"image {x.shape} vs masker {masker.image_shape}")

    def value_fn(masks: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(masks), chunk):
            scores = np.asarray(score_fn(masker.apply(x, masks[i:i + chunk])))
            if not 0 <= k < scores.shape[1]:
                raise ConfigError(f"class {k} outside [0, {scores.shape[1]})")
            out.append(scores[:, k])
        return np.concatenate(out)

    return value_fn


def partition_shap(score_fn: ScoreFn, x: np.ndarray, k: int, masker: Masker, budget: int = 2000,
                   sample_id: int = -1, batch_size: int = 64) -> AttributionMap:
    tree = build_partition_tree(masker.config.grid)
    value_fn = _image_value_fn(score_fn, x, k, masker)
    phi, evals = owen_values(value_fn, tree, budget, masker.region_sizes, batch_size)
    return AttributionMap(masker.expand(phi), int(k), sample_id, phi, evals)


def exact_shapley(score_fn: ScoreFn, x: np.ndarray, k: int, masker: Masker,
                  sample_id: int = -1) -> AttributionMap:
    if masker.n_regions > MAX_EXACT_REGIONS:
        raise SizeError(f"exact enumeration limited to {MAX_EXACT_REGIONS} regions, got {masker.n_regions}")
    phi = exact_shapley_values(_image_value_fn(score_fn, x, k, masker), masker.n_regions)
    return AttributionMap(masker.expand(phi), int(k), sample_id, phi, 2 ** masker.n_regions)


def true_class_attribution(score_fn: ScoreFn, x: np.ndarray, y: int, masker: Masker, budget: int,
                           sample_id: int = -1) -> AttributionMap:
    """Map for the labelled class ``y`` of the stage-1 classifier, never its prediction."""
    return partition_shap(score_fn, x, int(y), masker, budget, sample_id)
