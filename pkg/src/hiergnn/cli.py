"""Command-line front end.

Every command takes ``--config`` (JSON run config) and ``--out`` (output
directory).  Exit status: 0 success, 1 user/config error, 2 internal or
numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, grad_check
from .coarsen import HIERARCHY_FORMAT_VERSION, CoarseningHierarchy, build_hierarchy, expand_cluster
from .config import load_config
from .dataio import (
    SyntheticSpec,
    align_to_graph,
    filter_missing,
    load_expression,
    load_gmt,
    load_mapping,
    log_transform,
    synth_generate,
    write_expression,
)
from .errors import ConfigError, HierGnnError, InputError
from .gnn import (
    CHECKPOINT_FORMAT_VERSION,
    ArchitectureConfig,
    baseline_param_count,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .graphcore import largest_component, load_edge_list, write_edge_list
from .interpret import input_saliency, ora, ora_tsv, rank_features, ranking_tsv, supernode_saliency
from .seeding import derive_seed
from .train import TrainConfig, evaluate, fit, stratified_split

log = logging.getLogger("hiergnn")

FORMATS = {
    "hierarchy": HIERARCHY_FORMAT_VERSION,
    "checkpoint": CHECKPOINT_FORMAT_VERSION,
    "run_config": 1,
    "manifest": 1,
}


# ------------------------------------------------------------------- helpers


class Run:
    """Resolved config plus output bookkeeping for one command."""

    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        self.seed = cfg["seed"]
        self.out = Path(args.out)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.written.append(p)
        return p

    def write_json(self, name: str, doc) -> Path:
        return self.write_text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def track(self, p: Path) -> None:
        self.written.append(p)

    def finish(self) -> None:
        self.write_json(f"resolved_config.{self.args.command}.json", self.cfg)
        manifest_path = self.path("manifest.json")
        manifest = {}
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
        for p in self.written:
            rel = str(p.relative_to(self.out))
            manifest[rel] = hashlib.blake2b(p.read_bytes(), digest_size=16).hexdigest()
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, section: str, key: str) -> str:
    value = cfg[section][key]
    if value is None:
        raise ConfigError(f"[{section}] {key} is required for this command")
    if not Path(value).exists():
        raise InputError(f"input file not found: {value}")
    return value


def _check_inputs(run: Run, needs: list[tuple[str, str]]) -> None:
    for section, key in needs:
        _require(run.cfg, section, key)
    for section, key in (("data", "mapping"), ("coarsen", "hierarchy"), ("enrich", "universe")):
        value = run.cfg[section][key]
        if value is not None and not Path(value).exists():
            raise InputError(f"input file not found: {value}")


def _load_graph(run: Run):
    g = load_edge_list(run.cfg["graph"]["edges"], run.cfg["graph"]["min_weight"])
    dropped: list[str] = []
    if run.cfg["graph"]["largest_component"]:
        g, dropped = largest_component(g)
    return g, dropped


def _hierarchy(run: Run, g) -> CoarseningHierarchy:
    stored = run.cfg["coarsen"]["hierarchy"]
    if stored is not None:
        return CoarseningHierarchy.load(stored, g)
    return build_hierarchy(g, run.cfg["coarsen"]["levels"], derive_seed(run.seed, "coarsen"))


def _dataset(run: Run, g):
    data = run.cfg["data"]
    ds = load_expression(data["expression"], data["labels"], data["orientation"])
    ds = filter_missing(ds, data["missing_threshold"])
    if data["log_transform"]:
        ds = log_transform(ds)
    mapping = load_mapping(data["mapping"]) if data["mapping"] else None
    return align_to_graph(ds, g, mapping)


def _arch(run: Run, n_classes: int) -> ArchitectureConfig:
    d = dict(run.cfg["architecture"])
    if d["head"] == "multiclass":
        d["n_classes"] = d.get("n_classes") or n_classes
    elif n_classes > 2:
        raise ConfigError(f"data has {n_classes} classes; set architecture.head to 'multiclass'")
    return ArchitectureConfig.from_dict(d)


def _train_config(run: Run) -> TrainConfig:
    return TrainConfig.from_dict({**run.cfg["train"], "seed": derive_seed(run.seed, "train")})


def _split(run: Run, ds):
    tc = _train_config(run)
    return stratified_split(ds.labels, tc.fractions, tc.seed)


def _partition(run: Run, ds, which: str):
    train_idx, val_idx, test_idx = _split(run, ds)
    return {
        "train": train_idx, "val": val_idx, "test": test_idx,
        "all": np.arange(ds.n_samples),
    }[which]


def _model_inputs(run: Run):
    g, _ = _load_graph(run)
    h = _hierarchy(run, g)
    ds, report = _dataset(run, g)
    return g, h, ds, report


def _load_model(run: Run, h):
    ckpt = Path(run.args.checkpoint) if run.args.checkpoint else run.path("checkpoint.json")
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt} (run 'train' first)")
    return load_checkpoint(ckpt, h, force=run.args.force)


# ------------------------------------------------------------------ commands


def cmd_synth(run: Run) -> None:
    synth = run.cfg["data"]["synthetic"]
    if synth is None:
        raise ConfigError("[data] synthetic is required for 'synth'")
    spec = SyntheticSpec(**synth, seed=derive_seed(run.seed, "synthetic"))
    g, ds, modules = synth_generate(spec)
    run.out.mkdir(parents=True, exist_ok=True)
    write_edge_list(g, run.path("edges.tsv"))
    write_expression(ds, run.path("expression.tsv"), run.path("labels.tsv"))
    for name in ("edges.tsv", "expression.tsv", "labels.tsv"):
        run.track(run.path(name))
    lines = ["module\tgene_id"] + [f"{m}\t{gid}" for m, genes in enumerate(modules) for gid in genes]
    run.write_text("planted.tsv", "\n".join(lines) + "\n")


def cmd_coarsen(run: Run) -> None:
    g, dropped = _load_graph(run)
    h = _hierarchy(run, g)
    run.out.mkdir(parents=True, exist_ok=True)
    h.save(run.path("hierarchy.json"))
    run.track(run.path("hierarchy.json"))
    h.write_memberships(run.path("clusters.tsv"))
    run.track(run.path("clusters.tsv"))
    run.write_json("graph_report.json", {
        "n_nodes": g.n_nodes,
        "n_edges": g.n_edges,
        "dropped_ids": dropped,
        "level_sizes": h.sizes(),
        "hierarchy_digest": h.digest(),
    })


def cmd_train(run: Run) -> None:
    g, h, ds, report = _model_inputs(run)
    arch = _arch(run, ds.n_classes)
    model = init_model(arch, h, derive_seed(run.seed, "model"))
    tc = _train_config(run)
    split = stratified_split(ds.labels, tc.fractions, tc.seed)
    model, history = fit(model, ds, tc, split)
    run.out.mkdir(parents=True, exist_ok=True)
    h.save(run.path("hierarchy.json"))
    run.track(run.path("hierarchy.json"))
    save_checkpoint(model, run.path("checkpoint.json"))
    run.track(run.path("checkpoint.json"))
    run.write_text("history.csv", history.to_csv())
    run.write_json("alignment.json", report.to_dict())
    run.write_json("split.json", {
        "train": [ds.sample_ids[i] for i in split[0]],
        "val": [ds.sample_ids[i] for i in split[1]],
        "test": [ds.sample_ids[i] for i in split[2]],
    })
    n_out = arch.n_outputs
    run.write_json("param_counts.json", {
        "model": param_count(model),
        "baseline": baseline_param_count(g.n_nodes, arch.hidden_units, n_out),
        "best_epoch": history.best_epoch,
    })


def cmd_evaluate(run: Run) -> None:
    _, h, ds, _ = _model_inputs(run)
    model = _load_model(run, h)
    rows = _partition(run, ds, run.args.partition)
    report = evaluate(model, ds.subset(rows))
    run.out.mkdir(parents=True, exist_ok=True)
    report.save(run.path("metrics.json"), run.path("confusion.csv"))
    run.track(run.path("metrics.json"))
    run.track(run.path("confusion.csv"))


def cmd_explain(run: Run) -> None:
    _, h, ds, _ = _model_inputs(run)
    model = _load_model(run, h)
    ex = run.cfg["explain"]
    rows = _partition(run, ds, ex["partition"])
    part = ds.subset(rows)
    c = ex["class"]
    gene_report = input_saliency(model, part.values, c, part.sample_ids)
    raw, node_report = supernode_saliency(model, part.values, c, ex["reduction"], part.sample_ids)
    run.write_text("saliency_input.csv", gene_report.to_csv())
    run.write_text("saliency_supernode.csv", node_report.to_csv())
    group = np.flatnonzero(part.labels == c) if np.any(part.labels == c) else None
    run.write_text("ranking_input.tsv", ranking_tsv(rank_features(gene_report, group, ex["top_k"])))
    run.write_text("ranking_supernode.tsv", ranking_tsv(rank_features(node_report, group)))
    run.write_json("saliency_supernode_raw.json", {
        "shape": list(raw.shape),
        "sample_ids": list(part.sample_ids),
        "values": raw.tolist(),
    })


def _read_universe(path: str) -> list[str]:
    return [line.strip().split("\t")[0] for line in Path(path).read_text().splitlines() if line.strip()]


def cmd_enrich(run: Run) -> None:
    g, _ = _load_graph(run)
    h = _hierarchy(run, g)
    en = run.cfg["enrich"]
    level = h.depth - 1 if en["level"] is None else en["level"]
    if not 0 <= level < h.depth:
        raise ConfigError(f"[enrich] level must lie in [0, {h.depth})")
    sets = load_gmt(en["gmt"])
    universe = _read_universe(en["universe"]) if en["universe"] else list(g.node_ids)
    n_super = h.assignment(level).n_coarse
    ranking = run.path("ranking_supernode.tsv")
    if en["supernodes"] == "top-k" and ranking.exists() and level == h.depth - 1:
        rows = ranking.read_text().splitlines()[1:]
        chosen = [int(r.split("\t")[1]) for r in rows[: en["top_k"]]]
    else:
        chosen = list(range(n_super))
    summary = ["supernode\tn_genes\tn_sets_tested\tbest_set\tbest_fdr"]
    for j in chosen:
        cluster = expand_cluster(h, level, j)
        results = ora(cluster, sets, universe)
        run.write_text(f"ora/level{level}_supernode{j}.tsv", ora_tsv(results))
        best = results[0] if results else None
        summary.append(
            f"{j}\t{len(cluster)}\t{len(results)}\t"
            f"{best.set_id if best else ''}\t{repr(best.fdr) if best else ''}"
        )
    run.write_text("ora_summary.tsv", "\n".join(summary) + "\n")


def selftest_report(seed: int = 0) -> dict:
    """Gradient checks on the autodiff primitives and a tiny full model."""
    from . import autodiff as ad
    from .dataio import _random_connected_graph

    rng = np.random.default_rng(derive_seed(seed, "selftest"))
    checks = {}

    def record(name, f, x):
        res = grad_check(f, x, 1e-6)
        checks[name] = res.to_dict()

    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    v = rng.normal(size=3)
    record("matmul_relu", lambda t: ad.reduce_sum(ad.relu(ad.matmul(t, v))), w)
    x = Tensor(rng.normal(size=10), requires_grad=True)
    record("sum_of_squares", lambda t: ad.reduce_sum(ad.elementwise_mul(t, t)), x)
    s = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    target = rng.normal(size=(4, 3))
    record("softmax_log", lambda t: ad.reduce_sum(ad.elementwise_mul(ad.log(ad.softmax(t)), target)), s)

    g = _random_connected_graph(12, 6, rng)
    h = build_hierarchy(g, 2, derive_seed(seed, "selftest-h"))
    arch = ArchitectureConfig(n_levels=2, conv_start_level=0, hidden_units=6, dropout_p=0.0)
    model = init_model(arch, h, seed)
    for t in model.params.values():
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    # in train mode batch norm cancels the hidden bias exactly, so the check
    # runs in eval mode against non-trivial running statistics
    model.bn.running_mean = rng.normal(size=6)
    model.bn.running_var = rng.uniform(0.5, 2.0, size=6)
    xb = rng.normal(size=(5, 12))
    from .gnn import model_forward

    def loss_of(t):
        logits, _ = model_forward(model, t, train=False)
        return ad.reduce_sum(ad.elementwise_mul(logits, logits))

    bn_x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    bn_state = ad.BatchNormState(4)
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    bn_w = rng.normal(size=(6, 4))
    record(
        "batchnorm_train",
        lambda t: ad.reduce_sum(ad.elementwise_mul(ad.batchnorm(t, gamma, beta, bn_state, True), bn_w)),
        bn_x,
    )

    record("model_wrt_input", loss_of, Tensor(xb, requires_grad=True))
    for name, p in model.params.items():
        record(f"model_wrt_{name}", lambda _t: loss_of(Tensor(xb)), p)
    worst = float(max(c["max_rel_error"] for c in checks.values()))
    return {"tolerance": 1e-4, "max_rel_error": worst, "passed": bool(worst <= 1e-4), "checks": checks}


def cmd_selftest(run: Run) -> int:
    report = selftest_report(run.seed)
    run.write_json("selftest.json", report)
    print(json.dumps({"max_rel_error": report["max_rel_error"], "passed": report["passed"]}))
    return 0 if report["passed"] else 2


def cmd_ablate(run: Run) -> None:
    g, h, ds, _ = _model_inputs(run)
    base = dict(run.cfg["architecture"])
    n_levels = base["n_levels"]
    tc = _train_config(run)
    split = stratified_split(ds.labels, tc.fractions, tc.seed)
    lines = ["conv_start_level\tn_conv_levels\tparam_count\tbest_epoch\tval_f1_macro\ttest_f1_macro\ttest_accuracy"]
    for start in range(n_levels + 1):
        d = {**base, "conv_start_level": start, "channel_schedule": None}
        if d["head"] == "multiclass":
            d["n_classes"] = d.get("n_classes") or ds.n_classes
        arch = ArchitectureConfig.from_dict(d)
        model = init_model(arch, h, derive_seed(run.seed, "model"))
        model, history = fit(model, ds, tc, split)
        rep = evaluate(model, ds.subset(split[2]))
        best_val = history.val_f1_macro[history.best_epoch - 1]
        lines.append(
            f"{start}\t{arch.n_conv}\t{param_count(model)}\t{history.best_epoch}\t"
            f"{best_val!r}\t{rep.f1_macro!r}\t{rep.accuracy!r}"
        )
    run.write_text("ablation.tsv", "\n".join(lines) + "\n")


# ---------------------------------------------------------------------- main

COMMANDS = {
    "synth": (cmd_synth, []),
    "coarsen": (cmd_coarsen, [("graph", "edges")]),
    "train": (cmd_train, [("graph", "edges"), ("data", "expression"), ("data", "labels")]),
    "evaluate": (cmd_evaluate, [("graph", "edges"), ("data", "expression"), ("data", "labels")]),
    "explain": (cmd_explain, [("graph", "edges"), ("data", "expression"), ("data", "labels")]),
    "enrich": (cmd_enrich, [("graph", "edges"), ("enrich", "gmt")]),
    "selftest": (cmd_selftest, []),
    "ablate": (cmd_ablate, [("graph", "edges"), ("data", "expression"), ("data", "labels")]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiergnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print versions of all artifact formats as JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    helps = {
        "synth": "generate a planted-module dataset",
        "coarsen": "build the heavy-edge matching hierarchy",
        "train": "fit the model and write a checkpoint",
        "evaluate": "score a checkpoint on a data partition",
        "explain": "gene and supernode saliency maps",
        "enrich": "over-representation analysis of supernode clusters",
        "selftest": "gradient checks against central differences",
        "ablate": "sweep conv_start_level over 0..n_levels",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=name != "selftest", help="run config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name in ("coarsen", "train", "evaluate", "explain", "enrich", "ablate"):
            p.add_argument("--levels", type=int, help="number of coarsening levels")
        if name in ("train", "evaluate", "explain", "ablate"):
            p.add_argument("--conv-start", type=int, dest="conv_start", help="first level with a convolution")
        if name in ("evaluate", "explain"):
            p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.json)")
            p.add_argument("--force", action="store_true", help="load despite a hierarchy digest mismatch")
        if name == "evaluate":
            p.add_argument("--partition", default="test", choices=("train", "val", "test", "all"))
        if name == "explain":
            p.add_argument("--class", type=int, dest="target_class", help="target class index")
        if name in ("explain", "enrich"):
            p.add_argument("--top-k", type=int, dest="top_k")
    return parser


def _overrides(args) -> dict:
    o = {("", "seed"): args.seed}
    if getattr(args, "levels", None) is not None:
        o[("coarsen", "levels")] = args.levels
        o[("architecture", "n_levels")] = args.levels
    o[("architecture", "conv_start_level")] = getattr(args, "conv_start", None)
    o[("explain", "class")] = getattr(args, "target_class", None)
    top_k = getattr(args, "top_k", None)
    o[("explain", "top_k")] = top_k
    o[("enrich", "top_k")] = top_k
    return o


def _run(args) -> int:
    fn, needs = COMMANDS[args.command]
    if args.config is None:
        from .config import resolve
        cfg = resolve({"seed": args.seed or 0})
    else:
        cfg = load_config(args.config, _overrides(args))
    run = Run(args, cfg)
    _check_inputs(run, needs)
    status = fn(run) or 0
    run.finish()
    return status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.version:
        print(json.dumps({"version": __version__, "formats": FORMATS}, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _run(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (HierGnnError, ArithmeticError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
