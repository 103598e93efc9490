"""Hierarchical pooled ChebConv classifier.

Level ``l`` of the model maps ``N_l`` node features to ``N_{l+1}`` supernode
features:

* ``l < conv_start_level``: weighted pooling, then ReLU;
* otherwise: ChebConv (K=2), weighted pooling, then ReLU.

The coarsest embeddings are flattened supernode-major and fed to a
one-hidden-layer head (linear -> dropout -> batch norm -> ReLU -> linear).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .coarsen import AssignmentMap, CoarseningHierarchy
from .errors import CheckpointError, ConfigError, ShapeError
from .graphcore import LaplacianOperator
from .seeding import rng_for

CHECKPOINT_FORMAT_VERSION = 1
HEADS = ("binary", "multiclass")


@dataclass(frozen=True)
class ArchitectureConfig:
    n_levels: int
    conv_start_level: int
    channel_schedule: tuple[int, ...] | None = None
    hidden_units: int = 256
    dropout_p: float = 0.2
    head: str = "binary"
    n_classes: int = 2
    cheb_K: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    lambda_mode: str = "approximate"

    def __post_init__(self):
        if self.channel_schedule is not None:
            object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        self.validate()

    @property
    def n_conv(self) -> int:
        return self.n_levels - self.conv_start_level

    def channels(self) -> tuple[int, ...]:
        """Output channels of each conv-enabled level."""
        if self.channel_schedule is not None:
            return self.channel_schedule
        return tuple(2 ** (k + 1) for k in range(self.n_conv))

    @property
    def n_outputs(self) -> int:
        return 1 if self.head == "binary" else self.n_classes

    def validate(self, hierarchy_depth: int | None = None) -> None:
        if self.n_levels < 0:
            raise ConfigError("n_levels must be non-negative")
        if hierarchy_depth is not None and self.n_levels > hierarchy_depth:
            raise ConfigError(f"n_levels {self.n_levels} exceeds hierarchy depth {hierarchy_depth}")
        if not 0 <= self.conv_start_level <= self.n_levels:
            raise ConfigError("conv_start_level must lie in [0, n_levels]")
        if self.channel_schedule is not None:
            if len(self.channel_schedule) != self.n_conv:
                raise ConfigError(
                    f"channel_schedule has {len(self.channel_schedule)} entries "
                    f"for {self.n_conv} conv levels"
                )
            if any(c < 1 for c in self.channel_schedule):
                raise ConfigError("channel counts must be positive")
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.head == "binary" and self.n_classes != 2:
            raise ConfigError("binary head implies n_classes = 2")
        if self.head == "multiclass" and self.n_classes < 2:
            raise ConfigError("multiclass head needs n_classes >= 2")
        if self.cheb_K != 2:
            raise ConfigError("only cheb_K = 2 is supported")
        if self.lambda_mode not in ("approximate", "estimated"):
            raise ConfigError("lambda_mode must be 'approximate' or 'estimated'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.channels())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def cheb_conv(h, lap: LaplacianOperator, theta0, theta1) -> Tensor:
    """``H theta0 + (L~ H) theta1``."""
    h = ad.as_tensor(h)
    if h.shape[-2] != lap.n_nodes:
        raise ShapeError(f"cheb_conv: {h.shape[-2]} nodes but Laplacian has {lap.n_nodes}")
    return ad.add(ad.matmul(h, theta0), ad.matmul(ad.sparse_apply(lap, h), theta1))


def weighted_pool(h, assignment: AssignmentMap, w) -> Tensor:
    """``S^T (w * H)``: scale every node by its weight and sum per cluster."""
    h, w = ad.as_tensor(h), ad.as_tensor(w)
    if h.shape[-2] != assignment.n_fine or w.shape != (assignment.n_fine,):
        raise ShapeError(
            f"weighted_pool: features {h.shape}, weights {w.shape}, "
            f"assignment expects {assignment.n_fine} nodes"
        )
    scaled = ad.elementwise_mul(h, ad.reshape(w, (assignment.n_fine, 1)))
    return ad.scatter_pool(scaled, assignment.cluster_of, assignment.n_coarse)


@dataclass
class GnnModel:
    config: ArchitectureConfig
    hierarchy: CoarseningHierarchy
    params: dict[str, Tensor]
    bn: BatchNormState
    laplacians: dict[int, LaplacianOperator] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for l in range(self.config.conv_start_level, self.config.n_levels):
            if l not in self.laplacians:
                self.laplacians[l] = LaplacianOperator(
                    self.hierarchy.graph_at(l), mode=self.config.lambda_mode
                )

    @property
    def n_inputs(self) -> int:
        return self.hierarchy.original.n_nodes

    def embedding_shape(self) -> tuple[int, int]:
        sizes = self.hierarchy.sizes()
        chans = self.config.channels()
        return sizes[self.config.n_levels], (chans[-1] if chans else 1)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=np.float64)


def _param_shapes(config: ArchitectureConfig, hierarchy: CoarseningHierarchy) -> dict[str, tuple[int, ...]]:
    sizes = hierarchy.sizes()
    shapes: dict[str, tuple[int, ...]] = {}
    f_in = 1
    chans = iter(config.channels())
    for l in range(config.n_levels):
        if l >= config.conv_start_level:
            f_out = next(chans)
            shapes[f"theta0_L{l}"] = (f_in, f_out)
            shapes[f"theta1_L{l}"] = (f_in, f_out)
            f_in = f_out
        shapes[f"pool_w_L{l}"] = (sizes[l],)
    n_flat = sizes[config.n_levels] * f_in
    h = config.hidden_units
    shapes["mlp_W1"] = (n_flat, h)
    shapes["mlp_b1"] = (h,)
    shapes["bn_gamma"] = (h,)
    shapes["bn_beta"] = (h,)
    shapes["mlp_W2"] = (h, config.n_outputs)
    shapes["mlp_b2"] = (config.n_outputs,)
    return shapes


def init_model(config: ArchitectureConfig, hierarchy: CoarseningHierarchy, seed: int = 0) -> GnnModel:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit pooling weights."""
    config.validate(hierarchy.depth)
    rng = rng_for(seed, "init")
    params = {}
    for name, shape in _param_shapes(config, hierarchy).items():
        if name.startswith(("theta", "mlp_W")):
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("pool_w") or name == "bn_gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    bn = BatchNormState(config.hidden_units, momentum=config.bn_momentum, eps=config.bn_eps)
    return GnnModel(config, hierarchy, params, bn)


def coarsening_stack(m: GnnModel, x) -> Tensor:
    """Run the coarsening levels on a ``(B, N_0)`` batch; returns ``(B, N_L, F_L)``."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != m.n_inputs or x.shape[0] < 1:
        raise ShapeError(f"expected input of shape (B, {m.n_inputs}), got {x.shape}")
    h = ad.reshape(x, (x.shape[0], x.shape[1], 1))
    cfg = m.config
    for l in range(cfg.n_levels):
        if l >= cfg.conv_start_level:
            h = cheb_conv(h, m.laplacians[l], m.params[f"theta0_L{l}"], m.params[f"theta1_L{l}"])
        h = weighted_pool(h, m.hierarchy.assignment(l), m.params[f"pool_w_L{l}"])
        h = ad.relu(h)
    return h


def head_forward(m: GnnModel, embeddings, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Flatten supernode-major and apply the classifier head."""
    emb = ad.as_tensor(embeddings)
    b = emb.shape[0]
    flat = ad.reshape(emb, (b, emb.shape[1] * emb.shape[2]))
    p = m.params
    hidden = ad.add(ad.matmul(flat, p["mlp_W1"]), p["mlp_b1"])
    if train and m.config.dropout_p > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        hidden = ad.dropout(hidden, ad.dropout_mask(rng, hidden.shape, m.config.dropout_p))
    hidden = ad.batchnorm(hidden, p["bn_gamma"], p["bn_beta"], m.bn, train=train)
    hidden = ad.relu(hidden)
    return ad.add(ad.matmul(hidden, p["mlp_W2"]), p["mlp_b2"])


def model_forward(
    m: GnnModel, x, train: bool = False, rng: np.random.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """Logits ``(B, C)`` and supernode embeddings ``(B, N_L, F_L)``.

    Binary heads produce a single logit column.
    """
    emb = coarsening_stack(m, x)
    return head_forward(m, emb, train=train, rng=rng), emb


def predict_logits(m: GnnModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits as a plain array, batched in index order."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for lo in range(0, x.shape[0], batch_size):
        logits, _ = model_forward(m, x[lo:lo + batch_size], train=False)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def param_count(m: GnnModel) -> int:
    return int(sum(t.data.size for t in m.params.values()))


def baseline_param_count(n_genes: int, hidden: int, n_outputs: int) -> int:
    """Flat one-hidden-layer classifier on raw genes, batch-norm affine included."""
    return n_genes * hidden + hidden + hidden * n_outputs + n_outputs + 2 * hidden


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(m: GnnModel, path: str | Path) -> None:
    for name, t in m.params.items():
        if not np.all(np.isfinite(t.data)):
            raise CheckpointError(f"parameter {name} is not finite")
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": m.config.to_dict(),
        "hierarchy_digest": m.hierarchy.digest(),
        "parameters": {name: t.data.tolist() for name, t in m.params.items()},
        "batchnorm": {
            "running_mean": m.bn.running_mean.tolist(),
            "running_var": m.bn.running_var.tolist(),
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, hierarchy: CoarseningHierarchy, force: bool = False) -> GnnModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    required = {"format_version", "config", "hierarchy_digest", "parameters", "batchnorm"}
    if not isinstance(doc, dict) or not required <= set(doc):
        raise CheckpointError(f"checkpoint {path} is missing keys {sorted(required - set(doc or {}))}")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {doc['format_version']}")
    try:
        config = ArchitectureConfig.from_dict(doc["config"])
        config.validate(hierarchy.depth)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from None
    expected = _param_shapes(config, hierarchy)
    stored = doc["parameters"]
    if set(stored) != set(expected):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    arrays = {}
    for name, shape in expected.items():
        try:
            arr = np.asarray(stored[name], dtype=np.float64)
        except (TypeError, ValueError):
            raise CheckpointError(f"parameter {name} is malformed") from None
        if arr.shape != shape:
            raise CheckpointError(
                f"parameter {name} has shape {arr.shape}; hierarchy requires {shape}"
            )
        arrays[name] = arr
    if doc["hierarchy_digest"] != hierarchy.digest() and not force:
        raise CheckpointError("checkpoint was trained on a different hierarchy (use force to override)")
    params = {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}
    bn_doc = doc["batchnorm"]
    bn = BatchNormState(
        config.hidden_units, momentum=config.bn_momentum, eps=config.bn_eps,
        running_mean=np.asarray(bn_doc["running_mean"], dtype=np.float64),
        running_var=np.asarray(bn_doc["running_var"], dtype=np.float64),
    )
    if bn.running_mean.shape != (config.hidden_units,) or bn.running_var.shape != (config.hidden_units,):
        raise CheckpointError("batch-norm statistics have the wrong shape")
    return GnnModel(config, hierarchy, params, bn)


def reference_architecture(hierarchy_depth: int = 7, hidden_units: int = 256) -> ArchitectureConfig:
    """Seven levels, convolutions from the fifth level on (channels 2, 4, 8)."""
    return ArchitectureConfig(
        n_levels=hierarchy_depth, conv_start_level=hierarchy_depth - 3, hidden_units=hidden_units
    )


__all__: Sequence[str] = [
    "ArchitectureConfig",
    "GnnModel",
    "baseline_param_count",
    "cheb_conv",
    "init_model",
    "load_checkpoint",
    "model_forward",
    "param_count",
    "save_checkpoint",
    "weighted_pool",
]
