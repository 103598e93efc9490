"""Gradient saliency at gene and supernode level, and local enrichment tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .dataio import GeneSet
from .errors import ContractError, NumericError
from .gnn import GnnModel, coarsening_stack, head_forward, model_forward


@dataclass
class SaliencyReport:
    level: str
    target_class: int
    matrix: np.ndarray
    feature_ids: list
    sample_ids: list[str]
    normalized: np.ndarray = field(init=False)
    zero_variance: np.ndarray = field(init=False)

    def __post_init__(self):
        self.normalized, self.zero_variance = normalize_rows(self.matrix)

    def to_csv(self) -> str:
        lines = ["sample_id,feature_id,raw,normalized"]
        for s, sid in enumerate(self.sample_ids):
            for f, fid in enumerate(self.feature_ids):
                norm = "NA" if self.zero_variance[s] else repr(float(self.normalized[s, f]))
                lines.append(f"{sid},{fid},{float(self.matrix[s, f])!r},{norm}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def normalize_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row zero mean / unit (population) standard deviation.

    Rows with zero variance come back as NaN and are flagged.
    """
    mean = matrix.mean(axis=1, keepdims=True)
    std = matrix.std(axis=1, keepdims=True)
    flat = std[:, 0] == 0
    safe = np.where(std == 0, 1.0, std)
    out = (matrix - mean) / safe
    out[flat] = np.nan
    return out, flat


def class_score(logits: Tensor, c: int, n_classes: int) -> Tensor:
    """Pre-activation score of class ``c``.

    For a single-logit (sigmoid) head the class-1 score is the logit and
    the class-0 score its negation.
    """
    if not 0 <= c < n_classes:
        raise ContractError(f"class {c} outside [0, {n_classes})")
    if logits.shape[1] == 1:
        col = ad.take_column(logits, 0)
        return col if c == 1 else ad.elementwise_mul(col, -1.0)
    return ad.take_column(logits, c)


def _check_finite(grad: np.ndarray) -> None:
    bad = ~np.isfinite(grad.reshape(grad.shape[0], -1)).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite saliency for sample {int(np.flatnonzero(bad)[0])}")


def _sample_ids(n: int, sample_ids) -> list[str]:
    return list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]


def input_saliency(model: GnnModel, x_batch: np.ndarray, c: int, sample_ids=None) -> SaliencyReport:
    """``|d S_c / d x|`` for every sample, with the model in eval mode.

    Samples do not interact in eval mode, so one reverse pass over the
    summed scores yields every per-sample gradient.
    """
    x = Tensor(np.asarray(x_batch, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        logits, _ = model_forward(model, x, train=False)
        total = ad.reduce_sum(class_score(logits, c, model.config.n_classes))
    backward(tape, total)
    grad = x.grad
    _check_finite(grad)
    return SaliencyReport(
        level="input",
        target_class=c,
        matrix=np.abs(grad),
        feature_ids=list(model.hierarchy.original.node_ids),
        sample_ids=_sample_ids(grad.shape[0], sample_ids),
    )


def supernode_saliency(
    model: GnnModel, x_batch: np.ndarray, c: int, reduction: str = "mean", sample_ids=None
) -> tuple[np.ndarray, SaliencyReport]:
    """Saliency of the coarsest embeddings.

    Returns the raw ``(B, N_L, F_L)`` absolute gradients and a report with
    one value per supernode (mean or max over embedding channels).
    """
    if reduction not in ("mean", "max"):
        raise ContractError("reduction must be 'mean' or 'max'")
    emb_values = coarsening_stack(model, np.asarray(x_batch, dtype=np.float64)).data
    emb = Tensor(emb_values, requires_grad=True)
    with Tape() as tape:
        logits = head_forward(model, emb, train=False)
        total = ad.reduce_sum(class_score(logits, c, model.config.n_classes))
    backward(tape, total)
    raw = np.abs(emb.grad)
    _check_finite(raw)
    reduced = raw.mean(axis=2) if reduction == "mean" else raw.max(axis=2)
    report = SaliencyReport(
        level="supernode",
        target_class=c,
        matrix=reduced,
        feature_ids=list(range(reduced.shape[1])),
        sample_ids=_sample_ids(raw.shape[0], sample_ids),
    )
    return raw, report


@dataclass(frozen=True)
class RankedFeature:
    rank: int
    feature_id: object
    mean_saliency: float


def rank_features(
    report: SaliencyReport, group: Sequence[int] | None = None, top_k: int | None = None
) -> list[RankedFeature]:
    """Features by descending mean raw saliency over ``group`` (default: all samples)."""
    rows = np.arange(report.matrix.shape[0]) if group is None else np.asarray(group, dtype=np.int64)
    if rows.size == 0:
        raise ContractError("cannot rank over an empty sample group")
    means = report.matrix[rows].mean(axis=0)
    order = sorted(range(len(means)), key=lambda f: (-means[f], report.feature_ids[f]))
    if top_k is not None:
        order = order[:top_k]
    return [RankedFeature(r + 1, report.feature_ids[f], float(means[f])) for r, f in enumerate(order)]


def ranking_tsv(ranking: Iterable[RankedFeature]) -> str:
    lines = ["rank\tfeature_id\tmean_saliency"]
    lines += [f"{r.rank}\t{r.feature_id}\t{r.mean_saliency!r}" for r in ranking]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- enrichment (ORA)


def _log_factorials(n: int) -> np.ndarray:
    out = np.zeros(n + 1)
    if n > 0:
        np.cumsum(np.log(np.arange(1, n + 1, dtype=float)), out=out[1:])
    return out


def hypergeom_sf(k: int, N: int, K: int, n: int, log_fact: np.ndarray | None = None) -> float:
    """``P(X >= k)`` for ``X ~ Hypergeometric(N, K, n)``."""
    lo = max(0, n + K - N)
    hi = min(n, K)
    if k <= lo:
        return 1.0
    if k > hi:
        return 0.0
    lf = _log_factorials(N) if log_fact is None else log_fact

    def log_choose(a, b):
        return lf[a] - lf[b] - lf[a - b]

    denom = log_choose(N, n)
    total = math.fsum(
        math.exp(log_choose(K, i) + log_choose(N - K, n - i) - denom) for i in range(k, hi + 1)
    )
    return min(total, 1.0)


@dataclass(frozen=True)
class OraResult:
    set_id: str
    description: str
    overlap: int
    cluster_size: int
    set_size: int
    universe_size: int
    enrichment_ratio: float
    p_value: float
    fdr: float
    overlap_genes: tuple[str, ...] = ()


def bh_fdr(p_values: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjustment, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ContractError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def ora(cluster: Sequence[str], sets: Sequence[GeneSet], universe: Sequence[str]) -> list[OraResult]:
    """Hypergeometric over-representation of ``cluster`` in every gene set.

    Sets are intersected with the universe first; sets with no member in
    the universe are not tested.  Results are ordered by FDR, then p-value,
    then set id.
    """
    universe_set = set(universe)
    if not universe_set:
        raise ContractError("universe is empty")
    cluster_set = set(cluster)
    outside = sorted(cluster_set - universe_set)
    if outside:
        raise ContractError(f"cluster genes outside the universe: {', '.join(outside[:20])}")
    if not cluster_set:
        raise ContractError("cluster is empty")
    N, n = len(universe_set), len(cluster_set)
    lf = _log_factorials(N)
    rows = []
    for gs in sets:
        members = gs.genes & universe_set
        K = len(members)
        if K == 0:
            continue
        hits = members & cluster_set
        k = len(hits)
        ratio = (k / n) / (K / N)
        p = max(hypergeom_sf(k, N, K, n, lf), np.finfo(float).tiny)
        rows.append((gs, k, K, ratio, p, tuple(sorted(hits))))
    fdr = bh_fdr([r[4] for r in rows])
    results = [
        OraResult(gs.set_id, gs.description, k, n, K, N, ratio, p, float(q), hits)
        for (gs, k, K, ratio, p, hits), q in zip(rows, fdr)
    ]
    results.sort(key=lambda r: (r.fdr, r.p_value, r.set_id))
    return results


def ora_tsv(results: Iterable[OraResult]) -> str:
    lines = ["set_id\tdescription\tenrichment_ratio\tp_value\tfdr"]
    lines += [
        f"{r.set_id}\t{r.description}\t{r.enrichment_ratio!r}\t{r.p_value!r}\t{r.fdr!r}"
        for r in results
    ]
    return "\n".join(lines) + "\n"
