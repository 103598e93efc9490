"""Expression matrices, preprocessing, graph alignment and synthetic data."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AlignmentError,
    ContractError,
    DomainError,
    EmptyDatasetError,
    ParseError,
    SpecError,
)
from .graphcore import GeneGraph
from .seeding import rng_for

log = logging.getLogger(__name__)

MISSING_TOKENS = {"", "NA", "NaN", "nan", "N/A", "null", "NULL"}


@dataclass(frozen=True, eq=False)
class ExpressionDataset:
    sample_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]
    values: np.ndarray
    missing: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]

    def __post_init__(self):
        shape = (len(self.sample_ids), len(self.gene_ids))
        if self.values.shape != shape or self.missing.shape != shape:
            raise ValueError(f"matrix shape {self.values.shape} does not match ids {shape}")
        if self.labels.shape != (shape[0],):
            raise ValueError("one label per sample required")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def subset(self, rows: Sequence[int]) -> "ExpressionDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            sample_ids=tuple(self.sample_ids[i] for i in rows),
            values=self.values[rows],
            missing=self.missing[rows],
            labels=self.labels[rows],
        )


@dataclass
class AlignmentReport:
    n_graph_nodes: int
    n_matched: int
    zero_filled: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    collisions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_graph_nodes": self.n_graph_nodes,
            "n_matched": self.n_matched,
            "zero_filled": self.zero_filled,
            "dropped": self.dropped,
            "collisions": self.collisions,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _read_tsv(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8") as fh:
        return [line.rstrip("\r\n").split("\t") for line in fh if line.strip()]


def load_labels(path: str | Path) -> dict[str, str]:
    """Two-column ``sample_id<TAB>label`` file; a ``sample_id`` header is skipped."""
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, row in enumerate(_read_tsv(path), start=1):
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", path, lineno)
        if lineno == 1 and row[0].lower() in ("sample_id", "sample"):
            continue
        if row[0] in out:
            raise ParseError(f"duplicate sample id {row[0]!r} in label file", path, lineno)
        out[row[0]] = row[1]
    return out


def load_expression(
    path: str | Path,
    labels_path: str | Path,
    orientation: str = "samples-as-rows",
) -> ExpressionDataset:
    """Parse an expression TSV and attach labels.

    The first row holds column ids and the first column holds row ids; the
    top-left cell is ignored.  Empty cells and ``NA``-style tokens are
    recorded as missing.  Label names are sorted, and class indices follow
    that order.
    """
    path = Path(path)
    if orientation not in ("samples-as-rows", "genes-as-rows"):
        raise ContractError(f"unknown orientation {orientation!r}")
    rows = _read_tsv(path)
    if not rows:
        raise ParseError("empty expression file", path)
    header = rows[0][1:]
    _check_unique(header, path, 1, "column")
    row_ids = []
    values = np.zeros((len(rows) - 1, len(header)))
    missing = np.zeros(values.shape, dtype=bool)
    for r, row in enumerate(rows[1:]):
        lineno = r + 2
        if len(row) != len(header) + 1:
            raise ParseError(f"expected {len(header) + 1} columns, got {len(row)}", path, lineno)
        row_ids.append(row[0])
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                missing[r, c] = True
                values[r, c] = np.nan
                continue
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r} in column {header[c]!r}", path, lineno) from None
    _check_unique(row_ids, path, None, "row")
    if orientation == "genes-as-rows":
        sample_ids, gene_ids = header, row_ids
        values, missing = values.T.copy(), missing.T.copy()
    else:
        sample_ids, gene_ids = row_ids, header
    label_map = load_labels(labels_path)
    unlabeled = [s for s in sample_ids if s not in label_map]
    if unlabeled:
        raise ParseError(f"sample(s) without label: {', '.join(unlabeled[:10])}", Path(labels_path))
    names = tuple(sorted({label_map[s] for s in sample_ids}))
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[label_map[s]] for s in sample_ids], dtype=np.int64)
    return ExpressionDataset(tuple(sample_ids), tuple(gene_ids), values, missing, labels, names)


def _check_unique(ids, path, line, what):
    seen = set()
    for name in ids:
        if name in seen:
            raise ParseError(f"duplicate {what} id {name!r}", path, line)
        seen.add(name)


def write_expression(ds: ExpressionDataset, path: str | Path, labels_path: str | Path) -> None:
    """Samples-as-rows TSV plus the label file; floats use round-trip repr."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("sample_id\t" + "\t".join(ds.gene_ids) + "\n")
        for sid, row, miss in zip(ds.sample_ids, ds.values, ds.missing):
            cells = ("NA" if m else repr(float(v)) for v, m in zip(row, miss))
            fh.write(sid + "\t" + "\t".join(cells) + "\n")
    with Path(labels_path).open("w", encoding="utf-8") as fh:
        fh.write("sample_id\tlabel\n")
        for sid, lab in zip(ds.sample_ids, ds.labels):
            fh.write(f"{sid}\t{ds.label_names[lab]}\n")


def filter_missing(ds: ExpressionDataset, threshold: float = 0.20) -> ExpressionDataset:
    """Drop genes, then samples, with missing fraction above ``threshold``.

    Surviving missing entries are imputed with the per-gene median of the
    observed values.
    """
    if not 0 <= threshold <= 1:
        raise ContractError("threshold must lie in [0, 1]")
    if ds.n_samples == 0 or ds.n_genes == 0:
        raise EmptyDatasetError("dataset is empty")
    gene_keep = ds.missing.mean(axis=0) <= threshold
    missing = ds.missing[:, gene_keep]
    if missing.shape[1] == 0:
        raise EmptyDatasetError("every gene exceeds the missing-value threshold")
    sample_keep = missing.mean(axis=1) <= threshold
    if not sample_keep.any():
        raise EmptyDatasetError("every sample exceeds the missing-value threshold")
    values = ds.values[np.ix_(sample_keep, gene_keep)].copy()
    missing = missing[sample_keep]
    if missing.any():
        for g in np.flatnonzero(missing.any(axis=0)):
            observed = values[~missing[:, g], g]
            values[missing[:, g], g] = np.median(observed) if observed.size else 0.0
    return ExpressionDataset(
        tuple(s for s, k in zip(ds.sample_ids, sample_keep) if k),
        tuple(g for g, k in zip(ds.gene_ids, gene_keep) if k),
        values,
        np.zeros(values.shape, dtype=bool),
        ds.labels[sample_keep],
        ds.label_names,
    )


def log_transform(ds: ExpressionDataset) -> ExpressionDataset:
    """``log2(x + 1)`` on every observed entry."""
    observed = ~ds.missing
    bad = np.argwhere(observed & (ds.values < 0))
    if bad.size:
        r, c = bad[0]
        raise DomainError(
            f"negative value {ds.values[r, c]} at sample {ds.sample_ids[r]!r}, gene {ds.gene_ids[c]!r}"
        )
    values = ds.values.copy()
    values[observed] = np.log2(values[observed] + 1.0)
    return replace(ds, values=values)


def load_mapping(path: str | Path) -> dict[str, str]:
    """Two-column ``old_id<TAB>node_id`` file; must be a function of ``old_id``."""
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, row in enumerate(_read_tsv(path), start=1):
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", path, lineno)
        old, new = row
        if old in out and out[old] != new:
            raise ParseError(f"{old!r} maps to both {out[old]!r} and {new!r}", path, lineno)
        out[old] = new
    return out


def align_to_graph(
    ds: ExpressionDataset, g: GeneGraph, mapping: dict[str, str] | None = None
) -> tuple[ExpressionDataset, AlignmentReport]:
    """Rename, intersect and reorder gene columns to the graph's node order.

    When several dataset genes map to the same node, the one with the
    higher mean expression wins.  Graph nodes without data become
    all-zero columns.
    """
    names = list(ds.gene_ids)
    if mapping is not None:
        names = [mapping.get(n, n) for n in names]
    report = AlignmentReport(n_graph_nodes=g.n_nodes, n_matched=0)
    means = np.where(ds.missing, 0.0, ds.values).sum(axis=0) / np.maximum((~ds.missing).sum(axis=0), 1)
    chosen: dict[str, int] = {}
    for col, name in enumerate(names):
        if name in chosen:
            prev = chosen[name]
            winner, loser = (col, prev) if means[col] > means[prev] else (prev, col)
            chosen[name] = winner
            report.collisions.append({
                "node_id": name,
                "kept": ds.gene_ids[winner],
                "dropped": ds.gene_ids[loser],
            })
        else:
            chosen[name] = col
    report.dropped = [ds.gene_ids[c] for n, c in chosen.items() if n not in g]
    matched = {n: c for n, c in chosen.items() if n in g}
    if not matched:
        raise AlignmentError("no dataset gene matches a graph node")
    values = np.zeros((ds.n_samples, g.n_nodes))
    missing = np.zeros((ds.n_samples, g.n_nodes), dtype=bool)
    for j, node in enumerate(g.node_ids):
        col = matched.get(node)
        if col is None:
            report.zero_filled.append(node)
            continue
        values[:, j] = ds.values[:, col]
        missing[:, j] = ds.missing[:, col]
    report.n_matched = len(matched)
    aligned = replace(ds, gene_ids=tuple(g.node_ids), values=values, missing=missing)
    return aligned, report


# ------------------------------------------------------------------ gene sets


@dataclass(frozen=True)
class GeneSet:
    set_id: str
    description: str
    genes: frozenset[str]


def load_gmt(path: str | Path) -> list[GeneSet]:
    path = Path(path)
    sets = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError("GMT rows need an id, a description and at least one gene", path, lineno)
            if parts[0] in seen:
                raise ParseError(f"duplicate gene set id {parts[0]!r}", path, lineno)
            seen.add(parts[0])
            sets.append(GeneSet(parts[0], parts[1], frozenset(p for p in parts[2:] if p)))
    return sets


# ------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 256
    n_modules: int = 2
    module_size: int = 16
    effect: float = 3.0
    noise: float = 1.0
    n_per_class: int = 200
    extra_edges: int | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown synthetic keys: {sorted(unknown)}")
        return cls(**d)


def _random_connected_graph(n: int, n_extra: int, rng: np.random.Generator) -> GeneGraph:
    # random recursive tree on a shuffled labelling, then extra distinct edges
    perm = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = perm[rng.integers(0, k)]
        a, b = int(perm[k]), int(parent)
        edges.add((min(a, b), max(a, b)))
    max_edges = n * (n - 1) // 2
    target = min(len(edges) + n_extra, max_edges)
    while len(edges) < target:
        a, b = (int(v) for v in rng.integers(0, n, size=2))
        if a != b:
            edges.add((min(a, b), max(a, b)))
    edge_list = sorted(edges)
    weights = 1.0 - rng.random(len(edge_list))  # uniform in (0, 1]
    ids = [f"G{i:05d}" for i in range(n)]
    return GeneGraph.from_edges(
        ids, [e[0] for e in edge_list], [e[1] for e in edge_list], weights
    )


def _grow_module(g: GeneGraph, start: int, size: int, used: set[int], rng) -> list[int] | None:
    seen = {start}
    module = []
    queue = deque([start])
    while queue and len(module) < size:
        u = queue.popleft()
        module.append(u)
        nbrs, _ = g.neighbors(u)
        for v in rng.permutation(nbrs):
            v = int(v)
            if v not in seen and v not in used:
                seen.add(v)
                queue.append(v)
    return module if len(module) == size else None


def synth_generate(spec: SyntheticSpec) -> tuple[GeneGraph, ExpressionDataset, list[list[str]]]:
    """Planted-module benchmark.

    Class 1 samples get ``+effect`` on every module gene; all entries carry
    Gaussian noise with standard deviation ``noise``.  Returns the graph,
    the dataset (class 0 first, then class 1) and the module gene ids.
    """
    if spec.n_nodes < 2 or spec.n_modules < 1 or spec.module_size < 1:
        raise SpecError("need at least 2 nodes and one non-empty module")
    if spec.n_modules * spec.module_size > spec.n_nodes:
        raise SpecError("modules do not fit in the graph")
    if spec.n_per_class < 1 or spec.noise < 0:
        raise SpecError("n_per_class must be positive and noise non-negative")
    graph_rng = rng_for(spec.seed, "synth-graph")
    n_extra = spec.n_nodes if spec.extra_edges is None else spec.extra_edges
    g = _random_connected_graph(spec.n_nodes, n_extra, graph_rng)

    module_rng = rng_for(spec.seed, "synth-modules")
    used: set[int] = set()
    modules = []
    for _ in range(spec.n_modules):
        module = None
        for start in module_rng.permutation(spec.n_nodes):
            if int(start) in used:
                continue
            module = _grow_module(g, int(start), spec.module_size, used, module_rng)
            if module is not None:
                break
        if module is None:
            raise SpecError("could not place a connected module of the requested size")
        used.update(module)
        modules.append(sorted(module))

    data_rng = rng_for(spec.seed, "synth-data")
    n = 2 * spec.n_per_class
    values = data_rng.normal(0.0, spec.noise, size=(n, spec.n_nodes)) if spec.noise > 0 else np.zeros((n, spec.n_nodes))
    labels = np.repeat([0, 1], spec.n_per_class)
    planted = sorted(used)
    values[np.ix_(labels == 1, planted)] += spec.effect
    width = max(4, int(math.log10(n)) + 1)
    ds = ExpressionDataset(
        tuple(f"S{i:0{width}d}" for i in range(n)),
        tuple(g.node_ids),
        values,
        np.zeros(values.shape, dtype=bool),
        labels.astype(np.int64),
        ("class0", "class1"),
    )
    return g, ds, [[g.node_ids[i] for i in m] for m in modules]
