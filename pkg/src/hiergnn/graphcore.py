"""Weighted undirected graphs and the rescaled normalized Laplacian.

Graphs are stored in CSR form (``indptr``, ``indices``, ``weights``) with
each undirected edge present in both endpoint rows.  Node identifiers are
strings and keep their insertion order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import EmptyGraphError, ParseError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GeneGraph:
    node_ids: tuple[str, ...]
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.node_ids)
        index = {name: i for i, name in enumerate(self.node_ids)}
        if len(index) != n:
            raise ValueError("duplicate node identifiers")
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0:
            raise ValueError("indptr does not match node count")
        if self.indices.shape != self.weights.shape or self.indptr[-1] != len(self.indices):
            raise ValueError("indices/weights do not match indptr")
        for arr in (self.indptr, self.indices, self.weights):
            arr.setflags(write=False)
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_edges(
        cls,
        node_ids: Sequence[str],
        src: Iterable[int],
        dst: Iterable[int],
        weight: Iterable[float],
    ) -> "GeneGraph":
        """Build a graph from undirected edges given as index triples.

        Each pair must appear once (in either orientation); weights must be
        positive and self-loops are rejected.
        """
        n = len(node_ids)
        src = np.asarray(list(src) if not isinstance(src, np.ndarray) else src, dtype=np.int64)
        dst = np.asarray(list(dst) if not isinstance(dst, np.ndarray) else dst, dtype=np.int64)
        w = np.asarray(list(weight) if not isinstance(weight, np.ndarray) else weight, dtype=np.float64)
        if not (src.shape == dst.shape == w.shape):
            raise ValueError("edge arrays differ in length")
        if np.any(src == dst):
            raise ValueError("self-loops are not allowed")
        if w.size and not np.all(w > 0):
            raise ValueError("edge weights must be positive")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise ValueError("edge endpoint out of range")
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        vals = np.concatenate([w, w])
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                raise ValueError("duplicate edges")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(tuple(node_ids), indptr, cols.astype(np.int64), vals)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def index_of(self, node_id: str) -> int:
        return self._index[node_id]

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def degree(self) -> np.ndarray:
        """Weighted degree of every node."""
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        return np.bincount(rows, weights=self.weights, minlength=self.n_nodes)

    def weight(self, i: int, j: int) -> float:
        nbrs, w = self.neighbors(i)
        k = np.searchsorted(nbrs, j)
        if k < len(nbrs) and nbrs[k] == j:
            return float(w[k])
        return 0.0

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Each undirected edge once as ``(i, j, w)`` with ``i < j``, sorted."""
        rows = np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))
        keep = rows < self.indices
        return rows[keep], self.indices[keep], self.weights[keep]

    def total_weight(self) -> float:
        return float(self.edges()[2].sum())

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes)
        )

    def subgraph(self, keep: Sequence[int]) -> "GeneGraph":
        """Induced subgraph on ``keep`` (node order follows ``keep``)."""
        keep = np.asarray(keep, dtype=np.int64)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        i, j, w = self.edges()
        inside = (remap[i] >= 0) & (remap[j] >= 0)
        return GeneGraph.from_edges(
            [self.node_ids[k] for k in keep], remap[i[inside]], remap[j[inside]], w[inside]
        )

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        n_comp, _ = connected_components(self.to_scipy(), directed=False)
        return n_comp == 1


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_edge_list(path: str | Path, min_weight: float = 0.0) -> GeneGraph:
    """Read a ``id_a<TAB>id_b<TAB>weight`` file into a graph.

    A first row whose weight column is not numeric is treated as a header.
    Reverse duplicates are merged keeping the larger weight; self-loops are
    dropped.  Nodes are numbered in order of first appearance among the
    retained edges.
    """
    path = Path(path)
    best: dict[tuple[str, str], float] = {}
    first_seen: dict[str, int] = {}
    n_loops = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(parts)}", path, lineno)
            a, b, wtxt = parts
            if not _is_number(wtxt):
                if lineno == 1:
                    continue
                raise ParseError(f"non-numeric weight {wtxt!r}", path, lineno)
            w = float(wtxt)
            if not math.isfinite(w):
                raise ParseError(f"non-finite weight {wtxt!r}", path, lineno)
            if a == b:
                n_loops += 1
                continue
            if w < min_weight or w <= 0:
                continue
            for name in (a, b):
                if name not in first_seen:
                    first_seen[name] = len(first_seen)
            key = (a, b) if first_seen[a] < first_seen[b] else (b, a)
            if w > best.get(key, -math.inf):
                best[key] = w
    if n_loops:
        log.warning("dropped %d self-loop row(s) from %s", n_loops, path)
    if not best:
        raise EmptyGraphError(f"no edges left in {path} after filtering")
    names = list(first_seen)
    index = {name: i for i, name in enumerate(names)}
    src = np.fromiter((index[a] for a, _ in best), dtype=np.int64, count=len(best))
    dst = np.fromiter((index[b] for _, b in best), dtype=np.int64, count=len(best))
    w = np.fromiter(best.values(), dtype=np.float64, count=len(best))
    graph = GeneGraph.from_edges(names, src, dst, w)
    log.info("loaded %d nodes / %d edges from %s", graph.n_nodes, graph.n_edges, path)
    return graph


def write_edge_list(g: GeneGraph, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("protein1\tprotein2\tcombined_score\n")
        for i, j, w in zip(*g.edges()):
            fh.write(f"{g.node_ids[i]}\t{g.node_ids[j]}\t{float(w)!r}\n")


def largest_component(g: GeneGraph) -> tuple[GeneGraph, list[str]]:
    """Keep the largest connected component; return it and the dropped ids.

    Ties between equally large components go to the one containing the
    smallest node index.
    """
    if g.n_nodes == 0:
        raise EmptyGraphError("graph has no nodes")
    n_comp, labels = connected_components(g.to_scipy(), directed=False)
    if n_comp == 1:
        return g, []
    sizes = np.bincount(labels, minlength=n_comp)
    first_index = np.full(n_comp, g.n_nodes)
    np.minimum.at(first_index, labels, np.arange(g.n_nodes))
    best = min(range(n_comp), key=lambda c: (-sizes[c], first_index[c]))
    keep = np.flatnonzero(labels == best)
    dropped = [g.node_ids[i] for i in np.flatnonzero(labels != best)]
    return g.subgraph(keep), dropped


class LaplacianOperator:
    """Applies ``L~ = 2 L / lambda_max - I`` with ``L = I - D^-1/2 A D^-1/2``.

    Isolated nodes get ``D^-1/2 = 0``, so their Laplacian row is the
    identity row.  ``mode="approximate"`` fixes ``lambda_max = 2``;
    ``mode="estimated"`` runs power iteration on ``L``.
    """

    def __init__(
        self,
        graph: GeneGraph,
        mode: str = "approximate",
        lambda_max: float | None = None,
        n_iter: int = 50,
        tol: float = 1e-6,
    ):
        self.graph = graph
        self.mode = mode
        deg = graph.degree()
        inv_sqrt = np.zeros_like(deg)
        nz = deg > 0
        inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
        self.inv_sqrt_degree = inv_sqrt
        rows = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
        norm_w = inv_sqrt[rows] * graph.weights * inv_sqrt[graph.indices]
        self._norm_adj = sp.csr_matrix(
            (norm_w, graph.indices, graph.indptr), shape=(graph.n_nodes, graph.n_nodes)
        )
        if lambda_max is not None:
            if not 0 < lambda_max:
                raise ValueError("lambda_max must be positive")
            self.lambda_max = float(lambda_max)
        elif mode == "approximate":
            self.lambda_max = 2.0
        elif mode == "estimated":
            self.lambda_max = self._power_iteration(n_iter, tol)
        else:
            raise ValueError(f"unknown Laplacian mode {mode!r}")

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def laplacian_apply(self, x: np.ndarray) -> np.ndarray:
        """Unscaled ``L x`` for an ``n x F`` matrix."""
        return x - self._norm_adj @ x

    def _power_iteration(self, n_iter: int, tol: float) -> float:
        n = self.graph.n_nodes
        if n == 1 or self.graph.n_edges == 0:
            return 1.0
        v = np.random.default_rng(0).standard_normal(n)
        v /= np.linalg.norm(v)
        est = 0.0
        for _ in range(n_iter):
            u = self.laplacian_apply(v)
            new = float(v @ u)
            norm = np.linalg.norm(u)
            if norm == 0:
                break
            v = u / norm
            if abs(new - est) <= tol * max(abs(new), 1.0):
                est = new
                break
            est = new
        return float(min(max(est, np.finfo(float).tiny), 2.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``L~ x`` for ``x`` of shape ``(n,)``, ``(n, F)`` or ``(B, n, F)``."""
        x = np.asarray(x, dtype=np.float64)
        n = self.graph.n_nodes
        if x.ndim == 1:
            if x.shape[0] != n:
                raise ShapeError(f"expected {n} rows, got {x.shape[0]}")
            return self._apply2d(x[:, None])[:, 0]
        if x.ndim == 2:
            if x.shape[0] != n:
                raise ShapeError(f"expected {n} rows, got {x.shape[0]}")
            return self._apply2d(x)
        if x.ndim == 3:
            if x.shape[1] != n:
                raise ShapeError(f"expected {n} nodes on axis 1, got {x.shape[1]}")
            b, _, f = x.shape
            flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(n, b * f)
            return self._apply2d(flat).reshape(n, b, f).transpose(1, 0, 2)
        raise ShapeError(f"unsupported input rank {x.ndim}")

    def _apply2d(self, x: np.ndarray) -> np.ndarray:
        return (2.0 / self.lambda_max) * (x - self._norm_adj @ x) - x


def scaled_laplacian_apply(lap: LaplacianOperator, x: np.ndarray) -> np.ndarray:
    return lap.apply(x)
