"""Run-configuration loading: schema validation and default materialization."""

from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema

from .errors import ConfigError

SCHEMA_VERSION = "1"
EXPERIMENTS = ("simulate", "picard", "couple", "lipschitz", "moments", "exp-moments", "check-assumptions",
               "lpq-diagnose")


def load_schema() -> dict:
    text = resources.files("memflow").joinpath("schemas", f"config.v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def _resolve(schema: dict, root: dict) -> dict:
    ref = schema.get("$ref")
    if ref:
        node = root
        for part in ref.lstrip("#/").split("/"):
            node = node[part]
        return _resolve(node, root)
    return schema


def _fill(obj, schema: dict, root: dict):
    schema = _resolve(schema, root)
    if not isinstance(obj, dict):
        return obj
    for key, sub in schema.get("properties", {}).items():
        sub_r = _resolve(sub, root)
        if key not in obj:
            default = sub.get("default", sub_r.get("default"))
            if default is None and "default" not in sub and "default" not in sub_r:
                continue
            obj[key] = copy.deepcopy(default)
        obj[key] = _fill(obj[key], sub_r, root)
    return obj


def _where(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def _validate(instance, schema, root, prefix=""):
    validator = jsonschema.Draft202012Validator(schema if schema is root else {**schema, "$defs": root["$defs"]})
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field {prefix}{_where(e)}: {e.message}")


def resolve_config(raw: dict, experiment: str | None = None) -> dict:
    """Validate ``raw`` and return a copy with every default filled in.

    ``experiment`` (from the command line) must agree with the config's own
    ``experiment`` field when both are given.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    root = load_schema()
    cfg = copy.deepcopy(raw)
    if experiment is not None:
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if "experiment" in cfg and cfg["experiment"] != experiment:
            raise ConfigError(f"config field experiment: {cfg['experiment']!r} conflicts with command {experiment!r}")
        cfg["experiment"] = experiment
    _validate(cfg, root, root)
    if "experiment" not in cfg:
        raise ConfigError("config field experiment: missing (give it in the file or on the command line)")
    _fill(cfg, root, root)
    sub = root["$defs"][cfg["experiment"]]
    _validate(cfg["params"], sub, root, "params/")
    _fill(cfg["params"], sub, root)
    return cfg


def load_config(path, experiment: str | None = None) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return resolve_config(raw, experiment)
