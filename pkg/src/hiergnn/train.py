"""Training loop, losses and classification metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .dataio import ExpressionDataset
from .errors import ConfigError, ContractError, LabelError, NumericError, StratificationError
from .gnn import GnnModel, model_forward, predict_logits
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    class_weighting: str = "none"
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three values summing to 1")
        if any(f < 0 for f in self.fractions):
            raise ConfigError("split fractions must be non-negative")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate must be >= 0 and adam_eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.class_weighting not in ("none", "inverse-frequency"):
            raise ConfigError("class_weighting must be 'none' or 'inverse-frequency'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ splitting


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    rest = n - sum(counts)
    # ties go to the later partition
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), -k))
    for k in order[:rest]:
        counts[k] += 1
    # every partition with a positive share gets at least one sample
    for k, f in enumerate(fractions):
        if f > 0 and counts[k] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[k] += 1
    return counts


def stratified_split(
    labels: Sequence[int], fractions: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class train/val/test split with largest-remainder rounding."""
    labels = np.asarray(labels)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError("fractions must be three values summing to 1")
    rng = rng_for(seed, "split")
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 3:
            raise StratificationError(f"class {c} has {idx.size} sample(s); at least 3 are required")
        idx = rng.permutation(idx)
        counts = _largest_remainder(idx.size, fractions)
        bounds = np.cumsum([0] + counts)
        for k in range(3):
            parts[k].extend(idx[bounds[k]:bounds[k + 1]].tolist())
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


# ----------------------------------------------------------------------- loss


def class_weights_from(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``n / (C * n_c)``; absent classes get 0."""
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = len(labels) / (n_classes * counts[present])
    return weights


def cross_entropy(logits, labels, class_weights: np.ndarray | None = None) -> Tensor:
    """Mean (optionally class-weighted) negative log-likelihood.

    A single logit column means a sigmoid head with binary labels;
    otherwise the logits feed a softmax.
    """
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if logits.ndim == 1:
        logits = ad.reshape(logits, (logits.shape[0], 1))
    if logits.shape[0] != b:
        raise ContractError(f"{logits.shape[0]} logit rows for {b} labels")
    n_cols = logits.shape[1]
    n_classes = 2 if n_cols == 1 else n_cols
    if b == 0 or labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes})")
    per_sample = np.ones(b) if class_weights is None else np.asarray(class_weights, dtype=float)[labels]
    if n_cols == 1:
        z = ad.reshape(logits, (b,))
        y = labels.astype(float)
        # y * softplus(-z) + (1 - y) * softplus(z)
        pos = ad.elementwise_mul(ad.softplus(ad.elementwise_mul(z, -1.0)), y * per_sample)
        neg = ad.elementwise_mul(ad.softplus(z), (1.0 - y) * per_sample)
        total = ad.reduce_sum(ad.add(pos, neg))
    else:
        onehot = np.zeros((b, n_cols))
        onehot[np.arange(b), labels] = per_sample
        total = ad.elementwise_mul(ad.reduce_sum(ad.elementwise_mul(ad.log_softmax(logits), onehot)), -1.0)
    return ad.elementwise_mul(total, 1.0 / b)


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - update


# -------------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    f1_macro: float
    accuracy: float
    n_samples: int
    label_names: tuple[str, ...] = ()
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "label_names": list(self.label_names),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
            "flags": list(self.flags),
        }

    def save(self, json_path: str | Path, confusion_csv: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if confusion_csv is not None:
            names = list(self.label_names) or [str(c) for c in range(len(self.confusion))]
            lines = ["true\\pred," + ",".join(names)]
            for name, row in zip(names, self.confusion):
                lines.append(name + "," + ",".join(str(int(v)) for v in row))
            Path(confusion_csv).write_text("\n".join(lines) + "\n")


def classification_report(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: int, label_names: Sequence[str] = ()
) -> EvalReport:
    """Confusion matrix (rows = truth) and per-class / macro scores.

    Zero denominators give a score of 0 and add a flag.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ContractError("cannot evaluate an empty partition")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(float)
    predicted = conf.sum(axis=0).astype(float)
    actual = conf.sum(axis=1).astype(float)
    flags = []
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        if predicted[c] > 0:
            precision[c] = tp[c] / predicted[c]
        else:
            flags.append(f"class {c}: precision undefined (never predicted)")
        if actual[c] > 0:
            recall[c] = tp[c] / actual[c]
        else:
            flags.append(f"class {c}: recall undefined (absent from partition)")
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
    return EvalReport(
        confusion=conf,
        precision=precision,
        recall=recall,
        f1=f1,
        f1_macro=float(f1.mean()),
        accuracy=float(tp.sum() / y_true.size),
        n_samples=int(y_true.size),
        label_names=tuple(label_names),
        flags=flags,
    )


def decisions(logits: np.ndarray) -> np.ndarray:
    """Binary heads threshold the sigmoid at 0.5; multiclass heads take argmax."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def evaluate(model: GnnModel, data: ExpressionDataset, batch_size: int = 256) -> EvalReport:
    if data.n_samples == 0:
        raise ContractError("cannot evaluate an empty partition")
    logits = predict_logits(model, data.values, batch_size=batch_size)
    return classification_report(data.labels, decisions(logits), model.config.n_classes, data.label_names)


# ------------------------------------------------------------------- training


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_f1_macro: list[float] = field(default_factory=list)
    best_epoch: int = -1
    split: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_f1_macro"]
        for e, (loss, f1) in enumerate(zip(self.train_loss, self.val_f1_macro), start=1):
            lines.append(f"{e},{loss!r},{f1!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _check_aligned(model: GnnModel, data: ExpressionDataset) -> None:
    if tuple(data.gene_ids) != tuple(model.hierarchy.original.node_ids):
        raise ContractError("dataset genes are not aligned to the model's graph node order")
    if data.missing.any():
        raise ContractError("dataset still contains missing values")
    if data.labels.size and data.labels.max() >= model.config.n_classes:
        raise LabelError("dataset has more classes than the model head")


def fit(
    model: GnnModel,
    data: ExpressionDataset,
    config: TrainConfig,
    split: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> tuple[GnnModel, History]:
    """Adam on mini-batches with early stopping on validation F1-macro.

    The parameters (and batch-norm statistics) of the best validation epoch
    are restored before returning.
    """
    _check_aligned(model, data)
    if split is None:
        split = stratified_split(data.labels, config.fractions, config.seed)
    train_idx, val_idx, _ = split
    if train_idx.size == 0 or val_idx.size == 0:
        raise ContractError("training and validation partitions must be non-empty")
    x_val = data.values[val_idx]
    y_val = data.labels[val_idx]
    n_classes = model.config.n_classes
    weights = None
    if config.class_weighting == "inverse-frequency":
        weights = class_weights_from(data.labels[train_idx], n_classes)

    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = rng_for(config.seed, "shuffle")
    dropout_rng = rng_for(config.seed, "dropout")
    history = History(split=split)
    best_f1 = -math.inf
    best_state = model.state_arrays()
    best_bn = model.bn.copy()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, order.size, config.batch_size)):
            batch = order[lo:lo + config.batch_size]
            try:
                with Tape() as tape:
                    logits, _ = model_forward(model, data.values[batch], train=True, rng=dropout_rng)
                    loss = cross_entropy(logits, data.labels[batch], weights)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            backward(tape, loss)
            opt.step()
            total += loss.item() * batch.size
            seen += batch.size
        val_logits = predict_logits(model, x_val)
        val_f1 = classification_report(y_val, decisions(val_logits), n_classes).f1_macro
        history.train_loss.append(total / seen)
        history.val_f1_macro.append(val_f1)
        log.info("epoch %d loss %.5f val_f1 %.4f", epoch, total / seen, val_f1)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_state = model.state_arrays()
            best_bn = model.bn.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    model.load_state_arrays(best_state)
    model.bn = best_bn
    return model, history
