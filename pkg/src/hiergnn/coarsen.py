"""Multilevel heavy-edge matching.

Each level visits nodes in a seeded random order and pairs every still
unmatched node with its heaviest unmatched neighbour (ties go to the lowest
neighbour index).  Nodes left without a partner become singleton clusters.
The coarse graph sums the weights of fine edges crossing each cluster pair
and drops intra-cluster weight.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, EmptyGraphError, LevelExhaustionError
from .graphcore import GeneGraph
from .seeding import hash64

HIERARCHY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class AssignmentMap:
    """Fine node index -> coarse cluster index for one level."""

    level: int
    cluster_of: np.ndarray
    n_fine: int
    n_coarse: int

    def __post_init__(self):
        self.cluster_of.setflags(write=False)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == cluster)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.n_coarse)

    def to_dense(self) -> np.ndarray:
        """The binary ``n_fine x n_coarse`` matrix; meant for tests and small graphs."""
        s = np.zeros((self.n_fine, self.n_coarse))
        s[np.arange(self.n_fine), self.cluster_of] = 1.0
        return s


def match_in_order(g: GeneGraph, order: Sequence[int]) -> np.ndarray:
    """Greedy heavy-edge matching visiting nodes in ``order``.

    Returns ``mate`` with ``mate[i] = j`` for matched pairs and ``-1`` for
    nodes left unmatched.
    """
    n = g.n_nodes
    indptr = g.indptr.tolist()
    indices = g.indices.tolist()
    weights = g.weights.tolist()
    mate = [-1] * n
    matched = [False] * n
    for u in order:
        if matched[u]:
            continue
        best = -1
        best_w = 0.0
        # neighbours are stored in ascending index order, so strict '>' keeps
        # the lowest index among equal weights
        for k in range(indptr[u], indptr[u + 1]):
            v = indices[k]
            if not matched[v] and weights[k] > best_w:
                best, best_w = v, weights[k]
        matched[u] = True
        if best >= 0:
            matched[best] = True
            mate[u] = best
            mate[best] = u
    return np.asarray(mate, dtype=np.int64)


def _assignment_from_mates(mate: np.ndarray) -> tuple[np.ndarray, int]:
    """Number clusters by their smallest member index."""
    n = len(mate)
    idx = np.arange(n)
    leader = np.where(mate >= 0, np.minimum(idx, mate), idx)
    is_leader = leader == idx
    cluster_id = np.cumsum(is_leader) - 1
    return cluster_id[leader].astype(np.int64), int(is_leader.sum())


def contract(g: GeneGraph, cluster_of: np.ndarray, n_coarse: int, node_ids: Sequence[str]) -> GeneGraph:
    """Coarse graph with summed crossing weights; intra-cluster weight is dropped."""
    i, j, w = g.edges()
    ci, cj = cluster_of[i], cluster_of[j]
    cross = ci != cj
    lo = np.minimum(ci, cj)[cross]
    hi = np.maximum(ci, cj)[cross]
    w = w[cross]
    if lo.size == 0:
        return GeneGraph.from_edges(node_ids, [], [], [])
    key = lo * n_coarse + hi
    # stable sort keeps the fine-edge order inside each group
    order = np.argsort(key, kind="stable")
    key, w = key[order], w[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    summed = np.add.reduceat(w, starts)
    uniq = key[starts]
    return GeneGraph.from_edges(node_ids, uniq // n_coarse, uniq % n_coarse, summed)


def coarse_ids(level: int, n: int) -> list[str]:
    return [f"L{level}:{j}" for j in range(n)]


def _coarsen_with_order(g: GeneGraph, order: Sequence[int], level: int) -> tuple[AssignmentMap, GeneGraph]:
    mate = match_in_order(g, order)
    cluster_of, n_coarse = _assignment_from_mates(mate)
    amap = AssignmentMap(level=level, cluster_of=cluster_of, n_fine=g.n_nodes, n_coarse=n_coarse)
    coarse = contract(g, cluster_of, n_coarse, coarse_ids(level + 1, n_coarse))
    return amap, coarse


def hem_level(g: GeneGraph, seed: int, level: int = 0, order: Sequence[int] | None = None) -> tuple[AssignmentMap, GeneGraph]:
    """One heavy-edge matching pass.

    The visiting order is a permutation drawn from ``seed`` unless ``order``
    is given explicitly.
    """
    if g.n_nodes == 0:
        raise EmptyGraphError("cannot coarsen an empty graph")
    if order is None:
        rng = np.random.Generator(np.random.PCG64(seed))
        order = rng.permutation(g.n_nodes)
    elif sorted(order) != list(range(g.n_nodes)):
        raise ContractError("visiting order must be a permutation of the node indices")
    return _coarsen_with_order(g, [int(u) for u in order], level)


class CoarseningHierarchy:
    """Sequence of coarse graphs and the assignment maps that produced them.

    ``levels[l]`` holds the graph with ``N_{l+1}`` nodes together with the
    map from the ``N_l`` nodes of the previous graph.
    """

    def __init__(self, original: GeneGraph, levels: list[tuple[GeneGraph, AssignmentMap]], seed: int):
        self.original = original
        self.levels = list(levels)
        self.seed = seed
        self._composed: list[np.ndarray] = []
        current = np.arange(original.n_nodes)
        for _, amap in self.levels:
            current = amap.cluster_of[current]
            self._composed.append(current)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def sizes(self) -> list[int]:
        """``[N_0, N_1, ..., N_L]``."""
        return [self.original.n_nodes] + [g.n_nodes for g, _ in self.levels]

    def graph_at(self, l: int) -> GeneGraph:
        """Graph with ``N_l`` nodes (``l = 0`` is the original graph)."""
        return self.original if l == 0 else self.levels[l - 1][0]

    def assignment(self, l: int) -> AssignmentMap:
        return self.levels[l][1]

    def composed(self, level: int) -> np.ndarray:
        """Original node index -> supernode index after assignment ``level``."""
        return self._composed[level]

    def to_dict(self) -> dict:
        levels = []
        for g, amap in self.levels:
            i, j, w = g.edges()
            levels.append({
                "n_fine": amap.n_fine,
                "n_coarse": amap.n_coarse,
                "cluster_of": amap.cluster_of.tolist(),
                "coarse_edges": [[int(a), int(b), float(c)] for a, b, c in zip(i, j, w)],
            })
        return {
            "format_version": HIERARCHY_FORMAT_VERSION,
            "seed": self.seed,
            "node_ids": list(self.original.node_ids),
            "levels": levels,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.blake2b(self.dumps().encode(), digest_size=8).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict, original: GeneGraph) -> "CoarseningHierarchy":
        if list(doc.get("node_ids", original.node_ids)) != list(original.node_ids):
            raise ContractError("hierarchy node ids do not match the supplied graph")
        levels = []
        n_fine = original.n_nodes
        for l, entry in enumerate(doc["levels"]):
            if entry["n_fine"] != n_fine:
                raise ContractError(f"level {l}: n_fine {entry['n_fine']} != {n_fine}")
            n_coarse = entry["n_coarse"]
            cluster_of = np.asarray(entry["cluster_of"], dtype=np.int64)
            edges = entry["coarse_edges"]
            g = GeneGraph.from_edges(
                coarse_ids(l + 1, n_coarse),
                [e[0] for e in edges], [e[1] for e in edges], [e[2] for e in edges],
            )
            amap = AssignmentMap(level=l, cluster_of=cluster_of, n_fine=n_fine, n_coarse=n_coarse)
            levels.append((g, amap))
            n_fine = n_coarse
        return cls(original, levels, doc["seed"])

    @classmethod
    def load(cls, path: str | Path, original: GeneGraph) -> "CoarseningHierarchy":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), original)

    def write_memberships(self, path: str | Path) -> None:
        """TSV of ``level, supernode, gene_id`` for every level."""
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("level\tsupernode\tgene_id\n")
            for level in range(self.depth):
                comp = self.composed(level)
                for node in np.lexsort((np.arange(len(comp)), comp)):
                    fh.write(f"{level}\t{comp[node]}\t{self.original.node_ids[node]}\n")


def level_seed(seed: int, level: int) -> int:
    return hash64(seed, level)


def build_hierarchy(g: GeneGraph, n_levels: int, seed: int) -> CoarseningHierarchy:
    """Apply ``n_levels`` matching passes with per-level derived seeds."""
    if n_levels < 1:
        raise ContractError("n_levels must be at least 1")
    levels = []
    current = g
    for l in range(n_levels):
        if current.n_nodes <= 1:
            raise LevelExhaustionError(l, current.n_nodes)
        amap, coarse = hem_level(current, level_seed(seed, l), level=l)
        levels.append((coarse, amap))
        current = coarse
    return CoarseningHierarchy(g, levels, seed)


def hierarchy_from_assignments(
    g: GeneGraph, cluster_maps: Sequence[Sequence[int]], seed: int = 0
) -> CoarseningHierarchy:
    """Hierarchy from precomputed cluster maps (one array per level).

    Each map must be total with contiguous cluster indices and cluster
    sizes of 1 or 2; coarse graphs are contracted as in :func:`hem_level`.
    """
    levels = []
    current = g
    for l, cmap in enumerate(cluster_maps):
        cluster_of = np.asarray(cmap, dtype=np.int64)
        if cluster_of.shape != (current.n_nodes,):
            raise ContractError(f"level {l}: map has {cluster_of.size} entries for {current.n_nodes} nodes")
        n_coarse = int(cluster_of.max()) + 1 if cluster_of.size else 0
        sizes = np.bincount(cluster_of, minlength=n_coarse)
        if cluster_of.min() < 0 or np.any(sizes == 0) or np.any(sizes > 2):
            raise ContractError(f"level {l}: clusters must be contiguous with 1 or 2 members")
        amap = AssignmentMap(level=l, cluster_of=cluster_of, n_fine=current.n_nodes, n_coarse=n_coarse)
        current = contract(current, cluster_of, n_coarse, coarse_ids(l + 1, n_coarse))
        levels.append((current, amap))
    return CoarseningHierarchy(g, levels, seed)


def expand_cluster(h: CoarseningHierarchy, level: int, supernode: int) -> list[str]:
    """Original node ids whose composed assignment reaches ``supernode``."""
    if not 0 <= level < h.depth:
        raise IndexError(f"level {level} out of range [0, {h.depth})")
    n_coarse = h.levels[level][1].n_coarse
    if not 0 <= supernode < n_coarse:
        raise IndexError(f"supernode {supernode} out of range [0, {n_coarse})")
    members = np.flatnonzero(h.composed(level) == supernode)
    return [h.original.node_ids[i] for i in members]


__all__ = [
    "AssignmentMap",
    "CoarseningHierarchy",
    "build_hierarchy",
    "contract",
    "expand_cluster",
    "hem_level",
    "level_seed",
    "match_in_order",
]
