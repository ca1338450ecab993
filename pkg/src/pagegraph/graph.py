"""Top-k spatial neighborhoods and the boolean attention mask.

Node 0 is the global node.  Every node may attend to the global node and
to itself; spatial neighbors are the k regions whose box centers are
nearest in Euclidean distance, ties broken toward the lower node index.
The graph is directed: j in N(i) does not imply i in N(j).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .geometry import NormalizedBox


@dataclass(frozen=True)
class AttentionGraph:
    """Boolean attention mask over n regions plus the global node at index 0."""

    node_count: int  # n + 1
    k: int
    mask: np.ndarray  # (n+1, n+1) bool; mask[i, j] = i may attend to j
    neighbors: tuple[tuple[int, ...], ...]  # N(i) for i = 1..n, node ids 1-based
    pair_rows: np.ndarray = field(init=False)
    pair_cols: np.ndarray = field(init=False)

    def __post_init__(self):
        rows, cols = np.nonzero(self.mask)
        object.__setattr__(self, "pair_rows", rows)
        object.__setattr__(self, "pair_cols", cols)


def box_center(box: NormalizedBox) -> tuple[float, float]:
    """Midpoint of the upper-left and lower-right corners."""
    (x0, y0), _, (x2, y2), _ = box.vertices
    return ((x0 + x2) / 2.0, (y0 + y2) / 2.0)


def knn_neighbors(centers, k: int) -> list[tuple[int, ...]]:
    """Top-k nearest nodes per center (self always included).

    ``centers`` holds the region centers for nodes 1..n; the global node is
    not a candidate.  Returns N(i) as sorted node-id tuples, one per region.
    """
    if k < 1:
        raise ConfigError(f"neighborhood size k must be >= 1, got {k}")
    pts = np.asarray(centers, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise DataError("cannot build a neighborhood graph for an empty document")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) centers, got {pts.shape}")
    if n <= k:
        full = tuple(range(1, n + 1))
        return [full for _ in range(n)]
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff**2).sum(axis=2)
    idx = np.arange(n)
    result = []
    for i in range(n):
        # stable order: distance first, lower index on ties
        order = np.lexsort((idx, d2[i]))
        chosen = order[:k]
        if i not in chosen:  # possible only under exact-distance ties
            chosen = np.concatenate([chosen[: k - 1], [i]])
        result.append(tuple(sorted(int(j) + 1 for j in chosen)))
    return result


def build_attention_mask(neighbors: list[tuple[int, ...]], n: int) -> AttentionGraph:
    """Boolean mask from neighbor sets: N(i) plus the global node, row 0 dense."""
    if len(neighbors) != n:
        raise ShapeError(f"expected {n} neighbor sets, got {len(neighbors)}")
    k = 0
    mask = np.zeros((n + 1, n + 1), dtype=bool)
    mask[0, :] = True
    for i, nbrs in enumerate(neighbors, start=1):
        if not nbrs:
            raise DataError(f"node {i} has an empty neighborhood")
        if i not in nbrs:
            raise DataError(f"node {i} neighborhood must include itself")
        mask[i, 0] = True
        mask[i, list(nbrs)] = True
        k = max(k, len(nbrs))
    return AttentionGraph(node_count=n + 1, k=k, mask=mask, neighbors=tuple(tuple(x) for x in neighbors))


def build_document_graph(boxes: list[NormalizedBox], k: int) -> AttentionGraph:
    """Graph over a document's normalized region boxes (global node excluded)."""
    centers = [box_center(b) for b in boxes]
    return build_attention_mask(knn_neighbors(centers, k), len(boxes))


def dense_graph(n: int) -> AttentionGraph:
    """All-true mask: every node attends everywhere (plain dense attention)."""
    if n < 1:
        raise DataError("cannot build a graph for an empty document")
    full = tuple(range(1, n + 1))
    return AttentionGraph(
        node_count=n + 1,
        k=n,
        mask=np.ones((n + 1, n + 1), dtype=bool),
        neighbors=tuple(full for _ in range(n)),
    )
