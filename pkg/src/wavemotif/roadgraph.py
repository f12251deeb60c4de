"""Directed road graphs, 3-node motif participation counts and motif Laplacians.

Nodes are road segments. An edge ``(i, j)`` means traffic leaving segment ``i``
can enter segment ``j``. Only the five connected 3-node patterns without
reciprocal edges are counted; a triple whose induced subgraph contains a
two-way pair contributes to none of them.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MotifClass(enum.Enum):
    """The five unidirectional 3-node motifs.

    Values are the motif numbers used by Benson et al. for the same patterns.
    """

    CYCLE = 1
    FEED_FORWARD = 5
    OUT_FAN = 8
    PATH = 9
    IN_FAN = 10

    @property
    def edge_pattern(self) -> frozenset[tuple[int, int]]:
        return MOTIF_TEMPLATES[self]


# Templates on the abstract nodes 0, 1, 2.
MOTIF_TEMPLATES: dict[MotifClass, frozenset[tuple[int, int]]] = {
    MotifClass.CYCLE: frozenset({(0, 1), (1, 2), (2, 0)}),
    MotifClass.FEED_FORWARD: frozenset({(0, 1), (1, 2), (0, 2)}),
    MotifClass.OUT_FAN: frozenset({(0, 1), (0, 2)}),
    MotifClass.PATH: frozenset({(0, 1), (1, 2)}),
    MotifClass.IN_FAN: frozenset({(1, 0), (2, 0)}),
}


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class DirectedRoadGraph:
    """Unweighted directed graph over ``node_count`` road segments."""

    node_count: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphError(f"node_count must be positive, got {self.node_count}")
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise GraphError(f"edge ({i}, {j}) out of range for {self.node_count} nodes")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_adjacency(cls, adjacency) -> "DirectedRoadGraph":
        a = np.asarray(adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError("adjacency must be square")
        if not np.isin(a, (0, 1)).all():
            raise GraphError("adjacency entries must be 0 or 1")
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], frozenset(zip(rows.tolist(), cols.tolist())))

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=np.int64)
        for i, j in self.edges:
            a[i, j] = 1
        return a

    def successors(self, i: int) -> list[int]:
        return sorted(j for (u, j) in self.edges if u == i)

    def relabel(self, perm) -> "DirectedRoadGraph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return DirectedRoadGraph(self.node_count, frozenset((perm[i], perm[j]) for i, j in self.edges))


def read_edge_list(path, node_count: int | None = None) -> DirectedRoadGraph:
    """Read ``source_id,target_id`` lines; blank lines and ``#`` comments are skipped.

    Without ``node_count`` the graph spans ``0 .. max id``, or the count in a
    leading ``# N nodes`` comment as written by :func:`write_edge_list`.
    """
    edges = set()
    header_count = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        head = re.fullmatch(r"\s*#\s*(\d+)\s+nodes\s*", raw)
        if head and header_count is None:
            header_count = int(head.group(1))
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'source,target', got {raw!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphError(f"{path}:{lineno}: non-integer node id in {raw!r}") from None
        if i < 0 or j < 0:
            raise GraphError(f"{path}:{lineno}: negative node id")
        edges.add((i, j))
    if node_count is None:
        node_count = header_count if header_count is not None else 1 + max((max(e) for e in edges), default=-1)
    return DirectedRoadGraph(node_count, frozenset(edges))


def write_edge_list(graph: DirectedRoadGraph, path) -> None:
    lines = [f"# {graph.node_count} nodes"]
    lines += [f"{i},{j}" for i, j in sorted(graph.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class MotifAdjacency:
    weights: np.ndarray
    per_motif_counts: dict[MotifClass, np.ndarray] = field(repr=False)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.weights, fmt="%d", delimiter=",")


def _classify_triple(a: np.ndarray, i: int, j: int, c: int) -> MotifClass | None:
    nodes = (i, j, c)
    out_deg = [0, 0, 0]
    in_deg = [0, 0, 0]
    n_edges = 0
    for x, y in ((0, 1), (0, 2), (1, 2)):
        fwd, back = a[nodes[x], nodes[y]], a[nodes[y], nodes[x]]
        if fwd and back:
            return None
        if fwd:
            out_deg[x] += 1
            in_deg[y] += 1
            n_edges += 1
        elif back:
            out_deg[y] += 1
            in_deg[x] += 1
            n_edges += 1
    if n_edges == 3:
        return MotifClass.CYCLE if out_deg == [1, 1, 1] else MotifClass.FEED_FORWARD
    if n_edges == 2:
        if 2 in out_deg:
            return MotifClass.OUT_FAN
        if 2 in in_deg:
            return MotifClass.IN_FAN
        return MotifClass.PATH
    return None


def count_motif_participation(graph: DirectedRoadGraph) -> MotifAdjacency:
    """Count, for every edge, the node triples of each motif class containing it.

    A triple counts towards class ``k`` when its induced subgraph is isomorphic
    to the class template; every edge of that triple then gains one unit in
    ``per_motif_counts[k]``. ``weights`` is the sum over the five classes.
    """
    n = graph.node_count
    if n < 2:
        raise GraphError("motif counting needs at least 2 nodes")
    a = graph.adjacency
    und = (a | a.T).astype(bool)
    neighbours = [set(np.flatnonzero(und[v]).tolist()) for v in range(n)]
    counts = {k: np.zeros((n, n), dtype=np.int64) for k in MotifClass}
    for i, j in sorted(graph.edges):
        for c in sorted((neighbours[i] | neighbours[j]) - {i, j}):
            k = _classify_triple(a, i, j, c)
            if k is not None:
                counts[k][i, j] += 1
    weights = np.zeros((n, n), dtype=np.int64)
    for m in counts.values():
        weights += m
    return MotifAdjacency(weights, counts)


class LaplacianKind(enum.Enum):
    MOTIF = "motif"
    STANDARD_NORMALIZED = "standard_normalized"
    RESCALED = "rescaled"


@dataclass(frozen=True)
class GraphLaplacian:
    matrix: np.ndarray
    lambda_max: float
    kind: LaplacianKind = LaplacianKind.MOTIF

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def normalized_laplacian(weights: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2`` with zero-degree rows left as identity rows."""
    w = np.asarray(weights, dtype=float)
    deg = w.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(w.shape[0]) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def motif_laplacian(adj: MotifAdjacency | np.ndarray, symmetrize: bool = True) -> GraphLaplacian:
    """Symmetric normalized Laplacian of the motif adjacency.

    With ``symmetrize`` the weights are replaced by ``W + W.T`` first; otherwise
    ``W`` must already be symmetric.
    """
    w = np.asarray(adj.weights if isinstance(adj, MotifAdjacency) else adj, dtype=float)
    if (w < 0).any():
        raise GraphError("motif weights must be non-negative")
    if symmetrize:
        w = w + w.T
    elif not np.allclose(w, w.T, rtol=0, atol=1e-12):
        raise GraphError("weights are not symmetric; pass symmetrize=True")
    lap = normalized_laplacian(w)
    return GraphLaplacian(lap, estimate_lambda_max(lap), LaplacianKind.MOTIF)


def standard_laplacian(graph: DirectedRoadGraph) -> GraphLaplacian:
    """Normalized Laplacian of the plain adjacency (direction discarded)."""
    a = graph.adjacency
    lap = normalized_laplacian(((a + a.T) > 0).astype(float))
    return GraphLaplacian(lap, estimate_lambda_max(lap), LaplacianKind.STANDARD_NORMALIZED)


def estimate_lambda_max(matrix, tol: float = 1e-10, max_iters: int = 20000) -> float:
    """Largest eigenvalue of a symmetric positive semi-definite matrix by power iteration.

    The returned value is the Rayleigh quotient plus the residual norm, which
    is an upper bound for the eigenvalue the iteration settled on. An exactly
    zero matrix returns 0.0; when the residual never drops below ``tol`` the
    normalized-Laplacian bound 2.0 is returned.
    """
    m = np.asarray(matrix.matrix if isinstance(matrix, GraphLaplacian) else matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GraphError("matrix must be square")
    if not np.allclose(m, m.T, rtol=0, atol=1e-10):
        raise GraphError("matrix must be symmetric")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not m.any():
        return 0.0
    n = m.shape[0]
    # Deterministic start vector with no special alignment to graph structure.
    v = 1.0 + 0.1 * np.cos(np.arange(n) * 1.618033988749895)
    v /= np.linalg.norm(v)
    for _ in range(max_iters):
        w = m @ v
        rho = float(v @ w)
        resid = float(np.linalg.norm(w - rho * v))
        if resid < tol:
            return rho + resid
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return 2.0


def rescale_laplacian(lap: GraphLaplacian) -> GraphLaplacian:
    """Map the spectrum from ``[0, lambda_max]`` onto ``[-1, 1]``: ``2 L / lambda_max - I``."""
    if not lap.lambda_max > 0:
        raise GraphError(f"lambda_max must be positive, got {lap.lambda_max}")
    n = lap.size
    scaled = 2.0 * lap.matrix / lap.lambda_max - np.eye(n)
    scaled = 0.5 * (scaled + scaled.T)
    return GraphLaplacian(scaled, 1.0, LaplacianKind.RESCALED)


def hop_distances(weights: np.ndarray) -> np.ndarray:
    """All-pairs hop counts on the undirected support of ``weights`` (``inf`` if unreachable)."""
    w = np.asarray(weights)
    und = (w != 0) | (w.T != 0)
    n = w.shape[0]
    dist = np.full((n, n), np.inf)
    for s in range(n):
        dist[s, s] = 0
        frontier = [s]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in np.flatnonzero(und[u]):
                    if dist[s, v] == np.inf:
                        dist[s, v] = d
                        nxt.append(int(v))
            frontier = nxt
    return dist


def grid_road_network(rows: int, cols: int, one_way: set[int] | None = None):
    """Street grid with ``rows x cols`` junctions as ``(road_id, tail, head, two_way)`` tuples.

    Roads are numbered horizontal-first. Roads listed in ``one_way`` keep only
    the ``tail -> head`` direction.
    """
    one_way = one_way or set()
    roads = []
    junction = lambda r, c: r * cols + c  # noqa: E731
    for r, c in itertools.product(range(rows), range(cols - 1)):
        roads.append((junction(r, c), junction(r, c + 1)))
    for r, c in itertools.product(range(rows - 1), range(cols)):
        roads.append((junction(r, c), junction(r + 1, c)))
    return [(rid, t, h, rid not in one_way) for rid, (t, h) in enumerate(roads)]
