"""Run configuration in a flat ``section.key = value`` text format.

One assignment per line; ``#`` starts a comment. Values are parsed as JSON
(numbers, booleans, lists, quoted strings); anything that is not valid JSON
is taken as a bare string. Example::

    generator.n_identities = 20
    generator.yaws = [0, 15, 25, 35, 45]
    train.weights.lambda4 = 10
    paths.dataset = runs/demo/dataset.ipdf

Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

from .factorgen import GeneratorConfig
from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    gen = dataclasses.asdict(GeneratorConfig())
    gen["yaws"] = list(gen["yaws"])
    train = dataclasses.asdict(TrainConfig())
    return {
        "generator": gen,
        "model": {"feature_dim": 64, "widths": [16, 32, 64], "decoder_norm": "group"},
        "pretrain": {"epochs": 40, "lr": 1e-3, "batch_size": 32, "seed": 0},
        "train": train,
        "eval": {"split": "test", "n_panels": 8, "seed": 0, "checkpoints": []},
        "paths": {"dataset": "", "identity_checkpoint": "", "checkpoint": ""},
    }


DEFAULTS = _defaults()


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _assign(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    default = node[leaf]
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{dotted} expects true/false, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{dotted} expects a number, got {value!r}")
        if isinstance(default, int) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{dotted} expects an integer, got {value!r}")
            value = int(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{dotted} expects a list, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        value = str(value)
    node[leaf] = value


def parse_lines(lines, cfg: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS) if cfg is None else cfg
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        _assign(cfg, key.strip(), parse_value(value))
    return cfg


def load(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_lines(p.read_text().splitlines(), cfg)
    parse_lines(overrides, cfg)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        generator_config(cfg).validate()
        train_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["eval"]["split"] not in ("train", "test", "all"):
        raise ConfigError("eval.split must be train, test or all")
    if cfg["model"]["decoder_norm"] not in ("group", "instance"):
        raise ConfigError("model.decoder_norm must be group or instance")
    if cfg["pretrain"]["epochs"] < 1:
        raise ConfigError("pretrain.epochs must be >= 1")


def generator_config(cfg: dict) -> GeneratorConfig:
    g = dict(cfg["generator"])
    g["yaws"] = tuple(float(y) for y in g["yaws"])
    return GeneratorConfig(**g)


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    try:
        t["weights"] = LossWeights(**t["weights"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return TrainConfig(**t)


def dump(cfg: dict) -> str:
    """Serialize back to the text format, one flattened key per line."""
    lines = []

    def walk(prefix, node):
        for k in node:
            v = node[k]
            key = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(key, v)
            else:
                lines.append(f"{key} = {json.dumps(v)}")

    walk("", cfg)
    return "\n".join(lines) + "\n"
