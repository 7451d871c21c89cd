"""Hierarchy trees, bottom-up aggregation and data-consistency checks.

Nodes are 1-based contiguous integers and node 1 is the root. Loaders that
read arbitrary string ids remap them onto this scheme and keep a name table.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CycleError,
    DisconnectedError,
    HierarchyError,
    MissingLeafError,
    MultiParentError,
    ParseError,
    ShapeMismatchError,
    ZeroWeightError,
)

Edge = tuple[int, int, float]


@dataclass(frozen=True)
class Hierarchy:
    n_nodes: int
    edges: tuple[Edge, ...]
    children: Mapping[int, tuple[int, ...]]
    parent: Mapping[int, int]
    depth: Mapping[int, int]
    node_names: tuple[str, ...]
    root: int = 1
    _weight: Mapping[tuple[int, int], float] = field(default_factory=dict, repr=False)

    @property
    def nodes(self) -> range:
        return range(1, self.n_nodes + 1)

    def weight(self, parent: int, child: int) -> float:
        return self._weight[(parent, child)]

    def is_leaf(self, node: int) -> bool:
        return not self.children.get(node)

    @property
    def leaves(self) -> list[int]:
        return [i for i in self.nodes if self.is_leaf(i)]

    @cached_property
    def internal_nodes(self) -> list[int]:
        return [i for i in self.nodes if not self.is_leaf(i)]

    @property
    def n_levels(self) -> int:
        return max(self.depth.values())

    def levels(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i in self.nodes:
            out.setdefault(self.depth[i], []).append(i)
        return dict(sorted(out.items()))

    def topological_order(self) -> list[int]:
        """Parents before children (breadth-first from the root)."""
        order, queue = [], deque([self.root])
        while queue:
            i = queue.popleft()
            order.append(i)
            queue.extend(self.children.get(i, ()))
        return order

    def aggregation_matrix(self) -> np.ndarray:
        """Matrix ``A`` of shape (n_internal, N) with ``A[k, j-1] = phi_ij``
        for the k-th internal node ``i``. ``A @ y`` gives the weighted
        aggregate of each internal node's children."""
        return self._aggregation_matrix.copy()

    @cached_property
    def _aggregation_matrix(self) -> np.ndarray:
        A = np.zeros((len(self.internal_nodes), self.n_nodes))
        for k, i in enumerate(self.internal_nodes):
            for j in self.children[i]:
                A[k, j - 1] = self._weight[(i, j)]
        return A

    def with_weights(self, weights: Mapping[tuple[int, int], float]) -> "Hierarchy":
        edges = [(p, c, float(weights.get((p, c), w))) for p, c, w in self.edges]
        return build_hierarchy(edges, n_nodes=self.n_nodes, names=self.node_names)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parent", "child", "weight"])
        for p, c, w in self.edges:
            writer.writerow([self.node_names[p - 1], self.node_names[c - 1], repr(float(w))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def build_hierarchy(
    edges: Iterable[Sequence],
    n_nodes: int | None = None,
    names: Sequence[str] | None = None,
) -> Hierarchy:
    """Validate an edge list ``(parent, child, weight)`` and build the tree.

    ``n_nodes`` is only needed for a single-node hierarchy (no edges) or to
    declare trailing nodes explicitly, which then must be reachable.
    """
    edges = [(int(p), int(c), float(w)) for p, c, w in edges]
    if not edges and n_nodes is None:
        raise HierarchyError("empty edge list")

    parent: dict[int, int] = {}
    weights: dict[tuple[int, int], float] = {}
    children: dict[int, list[int]] = {}
    max_id = 1
    for p, c, w in edges:
        if p < 1 or c < 1:
            raise HierarchyError(f"node ids must be >= 1, got edge ({p}, {c})")
        if p == c:
            raise CycleError(f"self-loop at node {p}")
        if not math.isfinite(w):
            raise HierarchyError(f"non-finite weight on edge ({p}, {c})")
        if w == 0.0:
            raise ZeroWeightError(f"zero weight on edge ({p}, {c})")
        if c in parent:
            raise MultiParentError(f"node {c} has parents {parent[c]} and {p}")
        parent[c] = p
        weights[(p, c)] = w
        children.setdefault(p, []).append(c)
        max_id = max(max_id, p, c)

    for start in parent:
        seen = {start}
        node = start
        while node in parent:
            node = parent[node]
            if node in seen:
                raise CycleError(f"cycle through node {node}")
            seen.add(node)

    n = max_id if n_nodes is None else int(n_nodes)
    if n < max_id:
        raise HierarchyError(f"n_nodes={n} smaller than largest id {max_id}")
    if 1 in parent:
        raise HierarchyError("node 1 must be the root but has a parent")

    depth = {1: 1}
    queue = deque([1])
    while queue:
        i = queue.popleft()
        for j in children.get(i, ()):
            depth[j] = depth[i] + 1
            queue.append(j)
    missing = [i for i in range(1, n + 1) if i not in depth]
    if missing:
        raise DisconnectedError(f"nodes not reachable from root: {missing[:10]}")

    if names is None:
        names = tuple(str(i) for i in range(1, n + 1))
    elif len(names) != n:
        raise HierarchyError("name table length differs from node count")

    return Hierarchy(
        n_nodes=n,
        edges=tuple(edges),
        children={i: tuple(cs) for i, cs in children.items()},
        parent=dict(parent),
        depth=depth,
        node_names=tuple(str(s) for s in names),
        _weight=weights,
    )


def parse_hierarchy_csv(text: str) -> Hierarchy:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [s.strip() for s in rows[0]] != ["parent", "child", "weight"]:
        raise ParseError("hierarchy file must start with header parent,child,weight")
    raw: list[tuple[str, str, float]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not s.strip() for s in row):
            continue
        if len(row) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
        p, c, w = (s.strip() for s in row)
        try:
            weight = float(w)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad weight {w!r}") from exc
        raw.append((p, c, weight))
    if not raw:
        raise HierarchyError("empty edge list")

    # Identity mapping when ids already follow the 1..N scheme.
    if all(s.isdigit() and str(int(s)) == s for e in raw for s in e[:2]):
        ints = [(int(p), int(c), w) for p, c, w in raw]
        ids = {x for p, c, _ in ints for x in (p, c)}
        if ids == set(range(1, len(ids) + 1)) and 1 not in {c for _, c, _ in ints}:
            return build_hierarchy(ints)

    child_names = [c for _, c, _ in raw]
    if len(set(child_names)) != len(child_names):
        dup = next(c for c in child_names if child_names.count(c) > 1)
        raise MultiParentError(f"node {dup!r} has more than one parent")
    roots = list(dict.fromkeys(p for p, _, _ in raw if p not in set(child_names)))
    if len(roots) != 1:
        if not roots:
            raise CycleError("no root found (every node has a parent)")
        raise DisconnectedError(f"multiple roots: {roots}")
    kids: dict[str, list[str]] = {}
    for p, c, _ in raw:
        kids.setdefault(p, []).append(c)
    order, queue, seen = [], deque(roots), set(roots)
    while queue:
        s = queue.popleft()
        order.append(s)
        for c in kids.get(s, ()):
            if c in seen:
                raise CycleError(f"cycle through {c!r}")
            seen.add(c)
            queue.append(c)
    all_names = set(child_names) | {p for p, _, _ in raw}
    if len(order) != len(all_names):
        raise DisconnectedError("some nodes are unreachable from the root")
    index = {s: k + 1 for k, s in enumerate(order)}
    return build_hierarchy([(index[p], index[c], w) for p, c, w in raw], names=order)


def load_hierarchy(path: str | Path) -> Hierarchy:
    return parse_hierarchy_csv(Path(path).read_text(encoding="utf-8"))


def aggregate_matrix_bottom_up(h: Hierarchy, values: np.ndarray) -> np.ndarray:
    """Fill internal rows of ``values`` (shape ``(N, ...)``) from the leaf rows."""
    out = np.array(values, dtype=float, copy=True)
    for i in reversed(h.topological_order()):
        if h.is_leaf(i):
            continue
        out[i - 1] = sum(h.weight(i, j) * out[j - 1] for j in h.children[i])
    return out


def aggregate_bottom_up(h: Hierarchy, leaf_values: Mapping[int, float | np.ndarray]) -> dict:
    missing = [i for i in h.leaves if i not in leaf_values]
    if missing:
        raise MissingLeafError(f"no value for leaves {missing}")
    values: dict[int, float | np.ndarray] = {}
    for i in reversed(h.topological_order()):
        if h.is_leaf(i):
            values[i] = leaf_values[i]
        else:
            values[i] = sum(h.weight(i, j) * values[j] for j in h.children[i])
    return values


@dataclass(frozen=True)
class ConsistencyReport:
    per_node_residual: dict[int, np.ndarray]
    per_node_rms: dict[int, float]
    overall_rms: float


def consistency_report(h: Hierarchy, panel) -> ConsistencyReport:
    """Residuals ``y_i(t) - sum_j phi_ij y_j(t)`` for every internal node.

    ``panel`` is a :class:`TimeSeriesPanel` or an ``(N, T)`` array. Cells
    that are unobserved produce NaN residuals which are skipped in the RMS.
    """
    values = np.asarray(getattr(panel, "values", panel), dtype=float)
    mask = getattr(panel, "mask", None)
    if values.ndim != 2 or values.shape[0] != h.n_nodes:
        raise ShapeMismatchError(f"panel shape {values.shape} does not match {h.n_nodes} nodes")
    if mask is not None:
        values = np.where(mask, values, np.nan)

    residuals, rms = {}, {}
    for i in h.internal_nodes:
        agg = sum(h.weight(i, j) * values[j - 1] for j in h.children[i])
        r = values[i - 1] - agg
        residuals[i] = r
        ok = np.isfinite(r)
        rms[i] = float(np.sqrt(np.mean(r[ok] ** 2))) if ok.any() else float("nan")
    if residuals:
        stacked = np.concatenate([r[np.isfinite(r)] for r in residuals.values()])
        overall = float(np.sqrt(np.mean(stacked**2))) if stacked.size else float("nan")
    else:
        overall = 0.0
    return ConsistencyReport(residuals, rms, overall)
