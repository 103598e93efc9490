"""Shared fixtures and dense-matrix oracles.

The oracles here deliberately avoid the package's sparse code paths: they
build explicit ``A``, ``D``, ``S`` matrices with numpy and compose them.
"""

from __future__ import annotations

import numpy as np
import pytest

from hiergnn.graphcore import GeneGraph


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4, prefix: str = "n") -> GeneGraph:
    src, dst, w = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                src.append(i)
                dst.append(j)
                w.append(rng.uniform(0.1, 5.0))
    return GeneGraph.from_edges([f"{prefix}{i}" for i in range(n)], src, dst, w)


def dense_adjacency(g: GeneGraph) -> np.ndarray:
    a = np.zeros((g.n_nodes, g.n_nodes))
    i, j, w = g.edges()
    a[i, j] = w
    a[j, i] = w
    return a


def dense_scaled_laplacian(g: GeneGraph, lambda_max: float = 2.0) -> np.ndarray:
    a = dense_adjacency(g)
    deg = a.sum(axis=1)
    inv_sqrt = np.array([1.0 / np.sqrt(d) if d > 0 else 0.0 for d in deg])
    lap = np.eye(g.n_nodes) - np.diag(inv_sqrt) @ a @ np.diag(inv_sqrt)
    return 2.0 * lap / lambda_max - np.eye(g.n_nodes)


def dense_assignment(cluster_of: np.ndarray, n_coarse: int) -> np.ndarray:
    s = np.zeros((len(cluster_of), n_coarse))
    for i, c in enumerate(cluster_of):
        s[i, c] = 1.0
    return s


def dense_model_forward(model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode forward pass written with explicit matrices and loops."""
    cfg, h_ = model.config, model.hierarchy
    p = {k: t.data for k, t in model.params.items()}
    out_logits, out_emb = [], []
    for x_row in np.asarray(x, dtype=float):
        h = x_row[:, None]
        for l in range(cfg.n_levels):
            if l >= cfg.conv_start_level:
                lt = dense_scaled_laplacian(h_.graph_at(l))
                h = h @ p[f"theta0_L{l}"] + (lt @ h) @ p[f"theta1_L{l}"]
            amap = h_.assignment(l)
            s = dense_assignment(amap.cluster_of, amap.n_coarse)
            h = s.T @ (np.diag(p[f"pool_w_L{l}"]) @ h)
            h = np.maximum(h, 0.0)
        out_emb.append(h)
        flat = h.reshape(-1)
        hid = flat @ p["mlp_W1"] + p["mlp_b1"]
        hid = (hid - model.bn.running_mean) / np.sqrt(model.bn.running_var + model.bn.eps)
        hid = np.maximum(hid * p["bn_gamma"] + p["bn_beta"], 0.0)
        out_logits.append(hid @ p["mlp_W2"] + p["mlp_b2"])
    return np.array(out_logits), np.array(out_emb)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def path_graph():
    # a-b(3), b-c(1), c-d(5)
    return GeneGraph.from_edges(["a", "b", "c", "d"], [0, 1, 2], [1, 2, 3], [3.0, 1.0, 5.0])


def randomize_model(model, rng: np.random.Generator, scale: float = 0.5):
    """Replace every parameter and the batch-norm statistics by random values."""
    for t in model.params.values():
        t.data = rng.normal(0.0, scale, size=t.shape) + (1.0 if t.name and t.name.startswith("pool_w") else 0.0)
    model.bn.running_mean = rng.normal(size=model.bn.n_features)
    model.bn.running_var = rng.uniform(0.5, 2.0, size=model.bn.n_features)
    return model


def random_model(rng: np.random.Generator, n: int, n_levels: int = 2, conv_start: int = 0,
                 hidden: int = 5, head: str = "binary", n_classes: int = 2, p: float = 0.4):
    from hiergnn.coarsen import build_hierarchy
    from hiergnn.gnn import ArchitectureConfig, init_model

    g = random_graph(rng, n, p)
    h = build_hierarchy(g, n_levels, seed=int(rng.integers(1 << 31)))
    cfg = ArchitectureConfig(n_levels=n_levels, conv_start_level=conv_start, hidden_units=hidden,
                             dropout_p=0.0, head=head, n_classes=n_classes)
    return randomize_model(init_model(cfg, h, seed=int(rng.integers(1 << 31))), rng)


def affine_model(rng: np.random.Generator, n: int = 6, hidden: int = 4, head: str = "binary", n_classes: int = 2):
    """A model that is affine on positive inputs, with its effective weights."""
    from hiergnn.coarsen import hierarchy_from_assignments
    from hiergnn.gnn import ArchitectureConfig, init_model

    g = random_graph(rng, n, 0.5)
    h = hierarchy_from_assignments(g, [np.arange(n)])
    cfg = ArchitectureConfig(n_levels=1, conv_start_level=1, hidden_units=hidden, dropout_p=0.0,
                             head=head, n_classes=n_classes)
    m = init_model(cfg, h)
    p = m.params
    p["pool_w_L0"].data = rng.uniform(0.5, 2.0, n)
    p["mlp_W1"].data = rng.normal(size=(n, hidden))
    # a large bias keeps every hidden unit active on the inputs used below
    p["mlp_b1"].data = np.full(hidden, 50.0)
    p["bn_gamma"].data = rng.uniform(0.5, 2.0, hidden)
    p["mlp_W2"].data = rng.normal(size=(hidden, cfg.n_outputs))
    m.bn.running_var = rng.uniform(0.5, 2.0, hidden)
    scale = p["bn_gamma"].data / np.sqrt(m.bn.running_var + m.bn.eps)
    w = (p["pool_w_L0"].data[:, None] * p["mlp_W1"].data) @ (scale[:, None] * p["mlp_W2"].data)
    return m, w


# ---------------------------------------------------------------- acceptance

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` logs one PASS/FAIL line for criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        request.config.stash[_ACCEPTANCE_KEY].append((n, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
