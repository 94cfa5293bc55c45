"""Run configuration: flat ``key = value`` text with ``[section]`` headers.

Sections: ``[run]``, ``[paths]``, ``[correlation]``, ``[generator]``,
``[train]`` and ``[eval]``. Optional numbers accept ``auto``. Every output
file embeds :meth:`RunConfig.to_text`, which parses back to an equal config.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from finedet.errors import ValidationError
from finedet.harness.synth import GeneratorConfig
from finedet.harness.train import TrainConfig

# TrainConfig keys grouped by the section they live in
_TRAIN_SECTIONS = {
    "run": ("ablation", "seed"),
    "correlation": ("correlation", "beta", "theta_factor", "nearest"),
    "train": ("epochs", "lr", "batch_pairs", "lam", "mu", "momentum", "gamma", "reg_weight",
              "include_background", "fa_min_prob", "init_scale"),
    "eval": ("sigma", "score_floor", "max_dets", "all_points"),
}
_RENAMED = {"correlation": "kind"}  # TrainConfig.correlation is written as [correlation] kind


@dataclass
class PathsConfig:
    taxonomy: str = ""
    partition: str = ""
    embeddings: str = ""
    dataset: str = ""
    checkpoint: str = ""


@dataclass
class RunConfig:
    out: str = "out"
    superclasses: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self, check_paths: bool = True) -> None:
        self.train.validate()
        self.generator.validate()
        if self.superclasses < 0:
            raise ValidationError("superclasses must be >= 0")
        if check_paths:
            for name, value in dataclasses.asdict(self.paths).items():
                if value and name != "checkpoint" and not os.path.exists(value):
                    raise ValidationError(f"[paths] {name} = {value}: file does not exist")

    def to_text(self) -> str:
        lines = ["[run]", f"out = {self.out}"]
        lines += _emit(self.train, _TRAIN_SECTIONS["run"])
        lines += ["", "[paths]"]
        lines += [f"{k} = {v}" for k, v in dataclasses.asdict(self.paths).items()]
        lines += ["", "[correlation]", f"superclasses = {self.superclasses}"]
        lines += _emit(self.train, _TRAIN_SECTIONS["correlation"])
        lines += ["", "[generator]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(self.generator).items()]
        for section in ("train", "eval"):
            lines += ["", f"[{section}]"]
            lines += _emit(self.train, _TRAIN_SECTIONS[section])
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _emit(obj, keys):
    return [f"{_RENAMED.get(k, k)} = {_fmt(getattr(obj, k))}" for k in keys]


def _coerce(raw: str, hint, key):
    raw = raw.strip()
    optional = typing.get_origin(hint) in (typing.Union, getattr(__import__("types"), "UnionType", None))
    if optional:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("auto", "none", ""):
            return None
        hint = args[0]
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ValidationError(f"{key}: cannot read {raw!r} as {hint.__name__}") from None
    return raw


def _apply(target, values: dict, section: str, allowed=None):
    hints = typing.get_type_hints(type(target))
    names = {f.name for f in dataclasses.fields(target)}
    for key, raw in values.items():
        name = {v: k for k, v in _RENAMED.items()}.get(key, key) if section == "correlation" else key
        if name not in names or (allowed is not None and name not in allowed):
            raise ValidationError(f"unknown key [{section}] {key}")
        setattr(target, name, _coerce(raw, hints[name], f"[{section}] {key}"))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "run":
            if "out" in values:
                cfg.out = values.pop("out").strip()
            _apply(cfg.train, values, section, _TRAIN_SECTIONS["run"])
        elif section == "paths":
            _apply(cfg.paths, values, section)
        elif section == "correlation":
            if "superclasses" in values:
                cfg.superclasses = _coerce(values.pop("superclasses"), int, "[correlation] superclasses")
            _apply(cfg.train, values, section, _TRAIN_SECTIONS["correlation"])
        elif section == "generator":
            _apply(cfg.generator, values, section)
        elif section in ("train", "eval"):
            _apply(cfg.train, values, section, _TRAIN_SECTIONS[section])
        else:
            raise ValidationError(f"unknown config section [{section}]")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    base = os.path.dirname(os.path.abspath(path))
    for f in dataclasses.fields(cfg.paths):
        value = getattr(cfg.paths, f.name)
        if value and not os.path.isabs(value):
            setattr(cfg.paths, f.name, os.path.join(base, value))
    cfg.validate(check_paths)
    return cfg
