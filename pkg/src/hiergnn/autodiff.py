"""Small tape-based reverse-mode differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  A tape supports exactly one call to
:func:`backward`.

    >>> a = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(elementwise_mul(a, a))
    >>> _ = backward(tape, loss)
    >>> a.grad.tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, TapeError

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations in execution order.

    Besides the nodes, the tape keeps the sign pattern of every ReLU input
    so callers (the gradient checker) can detect when a perturbation
    crosses a kink.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.relu_patterns: list[np.ndarray] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False


def _current() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = requires
    out.grad = None
    out.name = None
    out._tape = None
    tape = _current()
    if tape is not None and requires:
        if tape.used:
            raise TapeError("tape has already been consumed by backward")
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
        out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy-style broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), back)


def elementwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "elementwise_mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("elementwise_mul", ad * bd, (a, b), back)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of rank 2 or 3 and ``b`` of rank 1 or 2.

    A rank-3 ``a`` is a batch of matrices sharing the same ``b``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (1, 2) or (a.ndim == 3 and b.ndim != 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        ga = g @ bd.T
        k, n = bd.shape
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), back)


def sparse_apply(lap, x) -> Tensor:
    """``L~ x`` through a :class:`~hiergnn.graphcore.LaplacianOperator`.

    The operator is symmetric, so its adjoint is itself.
    """
    x = as_tensor(x)

    def back(g):
        return (lap.apply(g),)

    return _record("sparse_apply", lap.apply(x.data), (x,), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    tape = _current()
    if tape is not None:
        tape.relu_patterns.append(positive)

    def back(g):
        return (g * positive,)

    return _record("relu", np.where(positive, x.data, 0.0), (x,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def back(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", s, (x,), back)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", s, (x,), back)


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis, via log-sum-exp."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (x,), back)


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    z = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def back(g):
        return (g * sig,)

    return _record("softplus", out, (x,), back)


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)

    def back(g):
        return (g / xd,)

    return _record("log", out, (x,), back)


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("reduce_sum", np.asarray(x.data.sum(axis=axis)), (x,), back)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is None:
            return (np.full(shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return _record("reduce_mean", np.asarray(x.data.mean(axis=axis)), (x,), back)


def concat_rows(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    tails = {t.shape[1:] for t in tensors}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {sorted(tails)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def back(g):
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat_rows", np.concatenate([t.data for t in tensors], axis=0), tensors, back)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None

    def back(g):
        return (g.reshape(orig),)

    return _record("reshape", out, (x,), back)


def take_column(x, column: int) -> Tensor:
    """Column ``column`` of a rank-2 tensor as a rank-1 tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or not 0 <= column < x.shape[1]:
        raise ShapeError(f"take_column: column {column} invalid for shape {x.shape}")

    def back(g):
        out = np.zeros(x.shape)
        out[:, column] = g
        return (out,)

    return _record("take_column", x.data[:, column].copy(), (x,), back)


def scatter_pool(x, cluster_of: np.ndarray, n_coarse: int) -> Tensor:
    """Sum rows sharing a cluster along the node axis (axis ``-2``).

    Rows are accumulated in ascending fine index order.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"scatter_pool: expected rank 2 or 3, got {x.shape}")
    if x.shape[-2] != len(cluster_of):
        raise ShapeError(f"scatter_pool: {x.shape[-2]} rows but {len(cluster_of)} assignments")
    out_shape = x.shape[:-2] + (n_coarse, x.shape[-1])
    out = np.zeros(out_shape)
    if x.ndim == 2:
        np.add.at(out, cluster_of, x.data)
    else:
        np.add.at(out, (slice(None), cluster_of), x.data)

    def back(g):
        return (g[..., cluster_of, :],)

    return _record("scatter_pool", out, (x,), back)


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: kept entries carry ``1 / (1 - p)``."""
    if p == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, mask: np.ndarray | None) -> Tensor:
    """Multiply by a precomputed mask; ``mask=None`` is the eval-mode identity."""
    x = as_tensor(x)
    if mask is None:
        return x
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} vs input {x.shape}")

    def back(g):
        return (g * mask,)

    return _record("dropout", x.data * mask, (x,), back)


@dataclass
class BatchNormState:
    n_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.n_features)
        if self.running_var is None:
            self.running_var = np.ones(self.n_features)

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.n_features, self.momentum, self.eps,
            self.running_mean.copy(), self.running_var.copy(),
        )


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization over axis 0 of a ``(B, F)`` input.

    Training mode normalizes with the batch statistics (biased variance)
    and folds them into the running averages; eval mode uses the running
    averages.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or x.shape[1] != state.n_features:
        raise ShapeError(f"batchnorm: expected (B, {state.n_features}), got {x.shape}")
    xd, gd = x.data, gamma.data
    if train:
        n = xd.shape[0]
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean) * inv_std
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased

        def back(g):
            dxhat = g * gd
            dx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv_std

        def back(g):
            return g * gd * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("batchnorm", gd * xhat + beta.data, (x, gamma, beta), back)


# ------------------------------------------------------------------ backward


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``loss`` recorded on ``tape``.

    Sets ``.grad`` on every gradient-requiring tensor touched by the tape
    (zeros where the loss does not depend on it) and returns the same
    arrays in a :class:`Gradients` store.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.used:
        raise TapeError("backward already ran on this tape")
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    tape.used = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    tracked: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad:
                tracked[id(t)] = t
        tracked[id(node.output)] = node.output
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
    for key, t in tracked.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(t.shape)
            grads[key] = g
        t.grad = g
    return Gradients(grads)


# ------------------------------------------------------------- grad checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    skipped: list[int]

    def to_dict(self) -> dict:
        return {
            "max_rel_error": float(self.max_rel_error),
            "n_checked": int(self.n_checked),
            "skipped": [int(i) for i in self.skipped],
        }


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> GradCheckResult:
    """Compare the taped gradient of scalar ``f(x)`` with central differences.

    ``x.data`` is perturbed in place and restored.  A coordinate is skipped
    when either perturbation flips any ReLU input sign, i.e. the step would
    cross a kink.  The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if not x.requires_grad:
        raise ContractError("grad_check needs a tensor with requires_grad=True")
    with Tape() as tape:
        out = f(x)
    base = tape.relu_patterns
    backward(tape, out)
    analytic = np.array(x.grad, copy=True).reshape(-1)
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ContractError("grad_check needs a contiguous tensor")
    worst = 0.0
    skipped = []
    checked = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = flat[i]
        with Tape() as tp:
            fp = float(f(x).data.item())
        flat[i] = orig - eps
        lo = flat[i]
        with Tape() as tm:
            fm = float(f(x).data.item())
        flat[i] = orig
        if not (_same_pattern(base, tp.relu_patterns) and _same_pattern(base, tm.relu_patterns)):
            skipped.append(i)
            continue
        # divide by the step actually taken after rounding
        numeric = (fp - fm) / (hi - lo)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
        checked += 1
    return GradCheckResult(worst, checked, skipped)
