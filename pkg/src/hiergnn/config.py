"""Run configuration: a JSON document with one section per pipeline stage.

Every section is optional; unknown sections or keys are rejected.  Paths
are resolved relative to the directory holding the config file.
"""

from __future__ import annotations

import json
from pathlib import Path

from .dataio import SyntheticSpec
from .errors import ConfigError, InputError
from .gnn import ArchitectureConfig
from .train import TrainConfig

# key -> (accepted types, default); None default means "not set"
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], object]]] = {
    "graph": {
        "edges": ((str,), None),
        "min_weight": ((int, float), 0.0),
        "largest_component": ((bool,), True),
    },
    "coarsen": {
        "levels": ((int,), 7),
        "hierarchy": ((str,), None),
    },
    "data": {
        "expression": ((str,), None),
        "labels": ((str,), None),
        "orientation": ((str,), "samples-as-rows"),
        "mapping": ((str,), None),
        "missing_threshold": ((int, float), 0.2),
        "log_transform": ((bool,), False),
        "synthetic": ((dict,), None),
    },
    "architecture": {},
    "train": {},
    "explain": {
        "class": ((int,), 1),
        "reduction": ((str,), "mean"),
        "top_k": ((int,), 10),
        "partition": ((str,), "test"),
    },
    "enrich": {
        "gmt": ((str,), None),
        "universe": ((str,), None),
        "supernodes": ((str,), "top-k"),
        "top_k": ((int,), 10),
        "level": ((int,), None),
    },
}
PATH_KEYS = {
    ("graph", "edges"), ("coarsen", "hierarchy"), ("data", "expression"),
    ("data", "labels"), ("data", "mapping"), ("enrich", "gmt"), ("enrich", "universe"),
}
CHOICES = {
    ("data", "orientation"): ("samples-as-rows", "genes-as-rows"),
    ("explain", "reduction"): ("mean", "max"),
    ("explain", "partition"): ("train", "val", "test", "all"),
    ("enrich", "supernodes"): ("top-k", "all"),
}


def _check_section(name: str, body: dict) -> dict:
    spec = SCHEMA[name]
    unknown = set(body) - set(spec)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {sorted(unknown)}")
    out = {}
    for key, (types, default) in spec.items():
        value = body.get(key, default)
        if value is not None:
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"[{name}] {key} must be {'/'.join(t.__name__ for t in types)}")
            if not isinstance(value, types):
                raise ConfigError(f"[{name}] {key} must be {'/'.join(t.__name__ for t in types)}")
            choices = CHOICES.get((name, key))
            if choices and value not in choices:
                raise ConfigError(f"[{name}] {key} must be one of {choices}")
        out[key] = value
    return out


def resolve(doc: dict, base_dir: Path | None = None) -> dict:
    """Validate ``doc`` and fill defaults; returns a plain-JSON resolved copy."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SCHEMA) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out: dict = {"seed": seed}
    for name in SCHEMA:
        body = doc.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be an object")
        if name == "architecture":
            out[name] = _resolve_architecture(body, out["coarsen"]["levels"])
        elif name == "train":
            body = dict(body)
            if "seed" in body:
                raise ConfigError("[train] seed comes from the top-level seed / --seed")
            try:
                out[name] = TrainConfig.from_dict(body).to_dict()
            except TypeError as exc:
                raise ConfigError(f"[train] {exc}") from None
            del out[name]["seed"]
        else:
            out[name] = _check_section(name, body)
    synth = out["data"]["synthetic"]
    if synth is not None:
        if "seed" in synth:
            raise ConfigError("[data.synthetic] seed comes from the top-level seed / --seed")
        try:
            spec = SyntheticSpec.from_dict(synth)
        except TypeError as exc:
            raise ConfigError(f"[data.synthetic] {exc}") from None
        resolved = {k: getattr(spec, k) for k in SyntheticSpec.__dataclass_fields__ if k != "seed"}
        out["data"]["synthetic"] = resolved
    if out["coarsen"]["levels"] < 1:
        raise ConfigError("[coarsen] levels must be at least 1")
    if base_dir is not None:
        for section, key in PATH_KEYS:
            value = out[section][key]
            if value is not None:
                out[section][key] = str((base_dir / value).resolve())
    return out


def _resolve_architecture(body: dict, levels: int) -> dict:
    body = dict(body)
    body.setdefault("n_levels", levels)
    body.setdefault("conv_start_level", max(body["n_levels"] - 3, 0))
    try:
        return ArchitectureConfig.from_dict(body).to_dict()
    except TypeError as exc:
        raise ConfigError(f"[architecture] {exc}") from None


def load_config(path: str | Path, overrides: dict[tuple[str, str], object] | None = None) -> dict:
    """Read, override and resolve a config file.

    ``overrides`` maps ``(section, key)`` to a value; section ``""`` means a
    top-level key.  Overrides are applied before validation.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for (section, key), value in (overrides or {}).items():
        if value is None:
            continue
        if section == "":
            doc[key] = value
        else:
            body = doc.setdefault(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"[{section}] must be an object")
            body[key] = value
    return resolve(doc, path.parent.resolve())
