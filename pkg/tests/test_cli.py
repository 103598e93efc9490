import json
import subprocess
import sys

import numpy as np
import pytest

from hiergnn.cli import main, selftest_report
from hiergnn.coarsen import CoarseningHierarchy, expand_cluster
from hiergnn.config import load_config, resolve
from hiergnn.errors import ConfigError
from hiergnn.graphcore import load_edge_list


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


RUN = {
    "seed": 0,
    "graph": {"edges": "out/edges.tsv"},
    "coarsen": {"levels": 3},
    "data": {"expression": "out/expression.tsv", "labels": "out/labels.tsv"},
    "architecture": {"conv_start_level": 1, "hidden_units": 32},
    "train": {"max_epochs": 50, "learning_rate": 0.01},
    "explain": {"top_k": 64},
    "enrich": {"gmt": "sets.gmt", "supernodes": "all"},
}


def pipeline(root, seed=0, commands=("train", "evaluate", "explain", "enrich")):
    """Run synth and then ``commands`` under ``root``; returns the output dir."""
    write_json(root / "synth.json", {"seed": seed, "data": {"synthetic": {"effect": 3.0}}})
    write_json(root / "run.json", {**RUN, "seed": seed})
    out = root / "out"
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(out)]) == 0
    planted = [line.split("\t") for line in (out / "planted.tsv").read_text().splitlines()[1:]]
    genes = {}
    for module, gid in planted:
        genes.setdefault(module, []).append(gid)
    lines = [f"MOD{m}\tplanted module {m}\t" + "\t".join(g) for m, g in sorted(genes.items())]
    (root / "sets.gmt").write_text("\n".join(lines) + "\n")
    for cmd in commands:
        assert main([cmd, "--config", str(root / "run.json"), "--out", str(out)]) == 0, cmd
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("pipeline"))


# ------------------------------------------------------------------ config


def test_resolve_fills_defaults():
    cfg = resolve({})
    assert cfg["seed"] == 0
    assert cfg["coarsen"]["levels"] == 7
    assert cfg["architecture"]["conv_start_level"] == 4
    assert cfg["train"]["max_epochs"] == 50
    assert cfg["explain"]["reduction"] == "mean"


@pytest.mark.parametrize("doc", [
    {"bogus": {}},
    {"graph": {"edgez": "x"}},
    {"seed": -1},
    {"seed": True},
    {"coarsen": {"levels": 0}},
    {"explain": {"reduction": "median"}},
    {"train": {"learning_rate": -1.0}},
    {"train": {"nope": 1}},
    {"train": {"seed": 3}},
    {"architecture": {"n_levels": 2, "conv_start_level": 5}},
    {"data": {"synthetic": {"effect": 1.0, "seed": 2}}},
    {"graph": {"largest_component": 1}},
])
def test_schema_violations(doc):
    with pytest.raises(ConfigError):
        resolve(doc)


def test_paths_resolve_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    p = write_json(tmp_path / "sub" / "c.json", {"graph": {"edges": "e.tsv"}})
    cfg = load_config(p)
    assert cfg["graph"]["edges"] == str((tmp_path / "sub" / "e.tsv").resolve())


def test_overrides_apply_before_validation(tmp_path):
    p = write_json(tmp_path / "c.json", {"seed": 1})
    cfg = load_config(p, {("", "seed"): 9, ("coarsen", "levels"): 2, ("explain", "class"): None})
    assert (cfg["seed"], cfg["coarsen"]["levels"], cfg["explain"]["class"]) == (9, 2, 1)


# --------------------------------------------------------------- exit codes


def test_version_lists_formats(capsys):
    assert main(["--version"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["formats"]) == {"hierarchy", "checkpoint", "run_config", "manifest"}
    assert all(isinstance(v, int) for v in doc["formats"].values())


def test_missing_config_exits_1(tmp_path, capsys):
    assert main(["coarsen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert "config file not found" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_schema_violation_exits_1_before_work(tmp_path, capsys):
    p = write_json(tmp_path / "c.json", {"graph": {"edges": "e.tsv", "extra": 1}})
    assert main(["coarsen", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "unknown keys" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_input_file_exits_1(tmp_path, capsys):
    p = write_json(tmp_path / "c.json", {"graph": {"edges": "missing.tsv"}})
    assert main(["coarsen", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "missing.tsv" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_required_key_absent_exits_1(tmp_path):
    p = write_json(tmp_path / "c.json", {})
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_malformed_edge_list_exits_1(tmp_path, capsys):
    (tmp_path / "e.tsv").write_text("a\tb\t1\nb\tc\tx\n")
    p = write_json(tmp_path / "c.json", {"graph": {"edges": "e.tsv"}})
    assert main(["coarsen", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert ":2" in capsys.readouterr().err


def test_too_many_levels_exits_1(tmp_path, capsys):
    (tmp_path / "e.tsv").write_text("a\tb\t1\nb\tc\t1\n")
    p = write_json(tmp_path / "c.json", {"graph": {"edges": "e.tsv"}, "coarsen": {"levels": 5}})
    assert main(["coarsen", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "cannot coarsen further" in capsys.readouterr().err


def test_internal_failure_exits_2(tmp_path, capsys, monkeypatch):
    import hiergnn.cli as cli

    def boom(run):
        raise FloatingPointError("overflow in matmul")

    monkeypatch.setitem(cli.COMMANDS, "selftest", (boom, []))
    assert main(["selftest", "--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("internal error:")


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_help_per_command():
    for cmd in ("coarsen", "train", "evaluate", "explain", "enrich", "synth", "selftest", "ablate"):
        res = subprocess.run([sys.executable, "-m", "hiergnn", cmd, "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "--out" in res.stdout


# ----------------------------------------------------------------- selftest


def test_selftest_report_within_tolerance():
    rep = selftest_report(0)
    assert rep["passed"] and rep["max_rel_error"] <= 1e-4
    assert "model_wrt_input" in rep["checks"]
    assert any(k.startswith("model_wrt_theta") for k in rep["checks"])


def test_selftest_command(tmp_path, capsys):
    assert main(["selftest", "--out", str(tmp_path)]) == 0
    line = json.loads(capsys.readouterr().out)
    assert line["passed"] is True
    doc = json.loads((tmp_path / "selftest.json").read_text())
    assert all(c["max_rel_error"] <= 1e-4 for c in doc["checks"].values())


# ----------------------------------------------------------------- pipeline


def test_pipeline_outputs(run_dir):
    for name in ("edges.tsv", "expression.tsv", "labels.tsv", "planted.tsv", "hierarchy.json",
                 "checkpoint.json", "history.csv", "split.json", "param_counts.json", "metrics.json",
                 "confusion.csv", "saliency_input.csv", "saliency_supernode.csv", "ranking_input.tsv",
                 "ranking_supernode.tsv", "ora_summary.tsv", "manifest.json",
                 "resolved_config.train.json"):
        assert (run_dir / name).is_file(), name


def test_pipeline_reaches_target_f1(run_dir):
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["f1_macro"] >= 0.95
    assert metrics["n_samples"] == 60


def test_pipeline_split_is_disjoint(run_dir):
    split = json.loads((run_dir / "split.json").read_text())
    parts = [set(split[k]) for k in ("train", "val", "test")]
    assert sum(map(len, parts)) == len(set.union(*parts)) == 400


def test_resolved_config_written(run_dir):
    cfg = json.loads((run_dir / "resolved_config.train.json").read_text())
    assert cfg["architecture"]["n_levels"] == 3 and cfg["architecture"]["conv_start_level"] == 1
    assert cfg["train"]["learning_rate"] == 0.01


def test_manifest_digests_match_files(run_dir):
    import hashlib

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert "metrics.json" in manifest
    for rel, digest in manifest.items():
        assert hashlib.blake2b((run_dir / rel).read_bytes(), digest_size=16).hexdigest() == digest


def test_explain_ranks_planted_genes(run_dir):
    planted = {line.split("\t")[1] for line in (run_dir / "planted.tsv").read_text().splitlines()[1:]}
    top = [line.split("\t")[1] for line in (run_dir / "ranking_input.tsv").read_text().splitlines()[1:]]
    assert len(top) == 2 * len(planted)
    assert len(planted & set(top)) / len(planted) >= 0.7


def test_enrich_uses_expanded_clusters(run_dir):
    g = load_edge_list(run_dir / "edges.tsv")
    h = CoarseningHierarchy.load(run_dir / "hierarchy.json", g)
    rows = [line.split("\t") for line in (run_dir / "ora_summary.tsv").read_text().splitlines()[1:]]
    assert len(rows) == h.sizes()[-1]
    for j, n_genes, *_ in rows:
        assert int(n_genes) == len(expand_cluster(h, h.depth - 1, int(j)))
    assert sum(int(r[1]) for r in rows) == g.n_nodes


def test_enrich_top_k_reads_ranking(tmp_path, run_dir):
    cfg = {**RUN, "graph": {"edges": str(run_dir / "edges.tsv")},
           "enrich": {"gmt": str(run_dir.parent / "sets.gmt"), "top_k": 2}}
    out = tmp_path / "o"
    out.mkdir()
    (out / "ranking_supernode.tsv").write_text((run_dir / "ranking_supernode.tsv").read_text())
    p = write_json(tmp_path / "c.json", cfg)
    assert main(["enrich", "--config", str(p), "--out", str(out)]) == 0
    chosen = [r.split("\t")[1] for r in (run_dir / "ranking_supernode.tsv").read_text().splitlines()[1:3]]
    summary = [r.split("\t")[0] for r in (out / "ora_summary.tsv").read_text().splitlines()[1:]]
    assert summary == chosen


def test_evaluate_requires_checkpoint(tmp_path, run_dir):
    cfg = {**RUN, "graph": {"edges": str(run_dir / "edges.tsv")},
           "data": {"expression": str(run_dir / "expression.tsv"), "labels": str(run_dir / "labels.tsv")}}
    p = write_json(tmp_path / "c.json", cfg)
    assert main(["evaluate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_pipeline_is_byte_identical(tmp_path, run_dir):
    again = pipeline(tmp_path)
    for name in ("hierarchy.json", "checkpoint.json", "history.csv", "metrics.json", "saliency_input.csv",
                 "saliency_supernode.csv", "ranking_input.tsv", "ora_summary.tsv"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name
    # resolved configs hold absolute input paths, so they differ only by the run root
    for name in ("train", "explain", "enrich"):
        a = (again / f"resolved_config.{name}.json").read_text().replace(str(tmp_path), "ROOT")
        b = (run_dir / f"resolved_config.{name}.json").read_text().replace(str(run_dir.parent), "ROOT")
        assert a == b
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (again, run_dir))
    strip = lambda m: {k: v for k, v in m.items() if not k.startswith("resolved_config")}
    assert strip(ma) == strip(mb)


def test_seed_flag_changes_outputs(tmp_path, run_dir):
    write_json(tmp_path / "run.json", RUN)
    (tmp_path / "out").mkdir()
    for name in ("edges.tsv", "expression.tsv", "labels.tsv"):
        (tmp_path / "out" / name).write_bytes((run_dir / name).read_bytes())
    assert main(["train", "--config", str(tmp_path / "run.json"), "--out", str(tmp_path / "out"),
                 "--seed", "7"]) == 0
    assert (tmp_path / "out" / "checkpoint.json").read_bytes() != (run_dir / "checkpoint.json").read_bytes()
    assert json.loads((tmp_path / "out" / "resolved_config.train.json").read_text())["seed"] == 7


def test_coarsen_levels_flag(tmp_path, run_dir):
    p = write_json(tmp_path / "c.json", {"graph": {"edges": str(run_dir / "edges.tsv")}})
    assert main(["coarsen", "--config", str(p), "--out", str(tmp_path / "o"), "--levels", "4", "--seed", "1"]) == 0
    rep = json.loads((tmp_path / "o" / "graph_report.json").read_text())
    assert len(rep["level_sizes"]) == 5 and rep["level_sizes"][0] == 256
    assert rep["level_sizes"][-1] >= int(np.ceil(256 / 2 ** 4))


def test_ablate_table(tmp_path, run_dir):
    cfg = {**RUN, "graph": {"edges": str(run_dir / "edges.tsv")},
           "coarsen": {"levels": 2}, "train": {"max_epochs": 3, "learning_rate": 0.01},
           "data": {"expression": str(run_dir / "expression.tsv"), "labels": str(run_dir / "labels.tsv")}}
    p = write_json(tmp_path / "c.json", cfg)
    assert main(["ablate", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "ablation.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["conv_start_level", "n_conv_levels", "param_count"]
    rows = [line.split("\t") for line in lines[1:]]
    assert [int(r[0]) for r in rows] == [0, 1, 2]
    assert [int(r[1]) for r in rows] == [2, 1, 0]
