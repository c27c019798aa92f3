"""Pipeline configuration: a typed dataclass with lossless INI round-trip.

Sections mirror the library modules. Every key has a default, so an empty
file is a valid config; unknown sections or keys are rejected rather than
ignored. Optional values serialize as the empty string; lists are
comma-separated.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from tcnmf.errors import ConfigError

# section -> key -> parse kind
SCHEMA = {
    "paths": {
        "events": "optstr",
        "metadata": "optstr",
        "vocabulary": "optstr",
        "comorbid_pairs": "optstr",
        "causal_pairs": "optstr",
        "output_dir": "optstr",
    },
    "ingest": {
        "t_max": "int",
        "min_followup": "int",
        "washout": "int",
        "washout_mode": "str",
        "strata": "strlist",
    },
    "matrix": {
        "sigma": "float",
        "boundary": "str",
    },
    "nmf": {
        "q": "optint",
        "max_iters": "int",
        "tol": "float",
        "epsilon": "float",
        "seed": "int",
        "n_runs": "int",
        "inner_updates": "int",
    },
    "rank_selection": {
        "q_list": "intlist",
        "n_restarts": "int",
    },
    "ascendancy": {
        "fraction": "float",
        "scope": "str",
        "aggregation": "str",
        "alpha": "float",
        "top_k_edges": "int",
    },
    "evaluation": {
        "l_list": "intlist",
        "n_perms": "int",
        "eval_seed": "int",
    },
    "grid": {
        "sigma_list": "floatlist",
    },
    "cli": {
        "threads": "int",
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    events: str | None = None
    metadata: str | None = None
    vocabulary: str | None = None
    comorbid_pairs: str | None = None
    causal_pairs: str | None = None
    output_dir: str | None = None
    # ingest
    t_max: int = 114
    min_followup: int = 5
    washout: int = 1
    washout_mode: str = "record"
    strata: tuple = ()
    # matrix
    sigma: float = 3.0
    boundary: str = "zero"
    # nmf
    q: int | None = None
    max_iters: int = 500
    tol: float = 1e-6
    epsilon: float = 1e-12
    seed: int = 0
    n_runs: int = 20
    inner_updates: int = 1
    # rank_selection
    q_list: tuple = ()
    n_restarts: int = 30
    # ascendancy
    fraction: float = 0.75
    scope: str = "global"
    aggregation: str = "per_patient"
    alpha: float = 0.0
    top_k_edges: int = 60
    # evaluation
    l_list: tuple = (3,)
    n_perms: int = 1000
    eval_seed: int = 0
    # grid
    sigma_list: tuple = ()
    # cli
    threads: int = 1


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind == "str":
            if not text:
                raise ValueError("must not be empty")
            return text
        if kind == "optstr":
            return text or None
        if kind == "int":
            return int(text)
        if kind == "optint":
            return int(text) if text else None
        if kind == "float":
            return float(text)
        if kind == "intlist":
            return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()
        if kind == "floatlist":
            return tuple(float(x) for x in text.split(",") if x.strip()) if text else ()
        if kind == "strlist":
            return tuple(x.strip() for x in text.split(",") if x.strip()) if text else ()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind}: {exc}") from None
    raise ConfigError(f"{where}: unknown kind {kind}")


def _format(kind: str, value) -> str:
    if value is None:
        return ""
    if kind in ("intlist", "floatlist", "strlist"):
        return ",".join(repr(v) if kind == "floatlist" else str(v) for v in value)
    if kind == "float":
        return repr(value)
    return str(value)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _parse(SCHEMA[section][key], raw, f"{source} [{section}] {key}")
    return PipelineConfig(**values)


def dump_config(config: PipelineConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in SCHEMA.items():
        parser[section] = {
            key: _format(kind, getattr(config, key)) for key, kind in keys.items()
        }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def save_config(config: PipelineConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(config))
    return path


def config_to_dict(config: PipelineConfig) -> dict:
    """Nested {section: {key: string}} view, as written to manifests."""
    return {
        section: {key: _format(kind, getattr(config, key)) for key, kind in keys.items()}
        for section, keys in SCHEMA.items()
    }


def apply_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    """Replace any non-None fields; used to layer CLI flags over a file."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    bad = set(changes) - {f.name for f in fields(PipelineConfig)}
    if bad:
        raise ConfigError(f"unknown config fields: {sorted(bad)}")
    return replace(config, **changes)


def validate_config(config: PipelineConfig) -> None:
    """Check every parameter against its module's preconditions."""
    checks = [
        (config.t_max >= 1, "t_max must be >= 1"),
        (config.min_followup >= 0, "min_followup must be >= 0"),
        (config.washout >= 0, "washout must be >= 0"),
        (config.washout_mode in ("record", "disease"),
         f"washout_mode must be record or disease, got {config.washout_mode!r}"),
        (config.sigma >= 0, "sigma must be >= 0"),
        (config.boundary in ("zero", "renormalize"),
         f"boundary must be zero or renormalize, got {config.boundary!r}"),
        (config.q is None or config.q >= 1, "q must be >= 1"),
        (config.max_iters >= 0, "max_iters must be >= 0"),
        (config.tol >= 0, "tol must be >= 0"),
        (config.epsilon > 0, "epsilon must be > 0"),
        (config.n_runs >= 1, "n_runs must be >= 1"),
        (config.inner_updates >= 1, "inner_updates must be >= 1"),
        (all(q >= 1 for q in config.q_list), "q_list entries must be >= 1"),
        (len(set(config.q_list)) == len(config.q_list), "q_list entries must be unique"),
        (config.n_restarts >= 2, "n_restarts must be >= 2"),
        (0 < config.fraction <= 1, "fraction must be in (0, 1]"),
        (config.scope in ("global", "per_patient"),
         f"scope must be global or per_patient, got {config.scope!r}"),
        (config.aggregation in ("per_patient", "pooled"),
         f"aggregation must be per_patient or pooled, got {config.aggregation!r}"),
        (config.alpha >= 0, "alpha must be >= 0"),
        (config.top_k_edges >= 0, "top_k_edges must be >= 0"),
        (all(l >= 1 for l in config.l_list), "l_list entries must be >= 1"),
        (len(config.l_list) >= 1, "l_list must not be empty"),
        (config.n_perms >= 1, "n_perms must be >= 1"),
        (all(s >= 0 for s in config.sigma_list), "sigma_list entries must be >= 0"),
        (config.threads >= 1 or config.threads == -1, "threads must be >= 1 or -1 (all)"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
