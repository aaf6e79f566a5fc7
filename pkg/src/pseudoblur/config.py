"""Run configuration: ``key = value`` lines under [data], [model], [train], [meta].

Every key has a default. Unknown sections or keys are rejected, and any key
can be overridden through an environment variable named
``PSEUDOBLUR_<SECTION>_<KEY>`` (upper case).
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "PSEUDOBLUR_"


@dataclass(frozen=True)
class Key:
    default: Any
    kind: type
    help: str
    stage: str


SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "n_pairs": Key(200, int, "synthetic pairs to generate", "synthesis"),
        "size": Key(128, int, "image side in pixels", "synthesis"),
        "frames": Key(7, int, "frames averaged per blurry image", "synthesis"),
        "max_shift": Key(0, int, "background motion bound in px/frame (0: 4 px at 128 px, scaled)", "synthesis"),
        "holdout": Key(20, int, "pairs held out for evaluation", "evaluation"),
        "seed": Key(0, int, "dataset seed", "synthesis"),
    },
    "model": {
        "spec": Key("full", str, "network size: full, small or toy", "all stages"),
        "edge_threshold": Key(0.05, float, "edge-difference threshold for the body prior", "reblur phase 3"),
        "pool_kernel": Key(7, int, "max-pool kernel dilating the edge difference", "reblur phase 3"),
        "line_thickness": Key(3.0, float, "skeleton line thickness in px", "reblur phase 3"),
    },
    "train": {
        "seed": Key(0, int, "root seed of the training stages", "all stages"),
        "lr": Key(1e-4, float, "Adam learning rate of the GAN stages", "deblur, reblur, finetune"),
        "batch_size": Key(8, int, "images per update", "deblur, reblur, finetune"),
        "patch": Key(128, int, "training patch side (multiple of 16)", "all stages"),
        "clip": Key(10.0, float, "global gradient-norm clip (0 disables)", "all stages"),
        "deblur_steps": Key(1000, int, "initial deblurring updates", "deblur"),
        "reblur_steps": Key(1000, int, "reblurrer updates, split 1:2:2 over the phases", "reblur"),
        "finetune_steps": Key(500, int, "plain fine-tuning updates", "finetune"),
    },
    "meta": {
        "alpha": Key(1e-2, float, "inner and test-time SGD step size", "meta-train, adapt"),
        "beta": Key(1e-4, float, "outer Adam learning rate", "meta-train"),
        "n_tasks": Key(4, int, "train tasks (and test tasks) per outer step", "meta-train"),
        "task_size": Key(1, int, "pairs per task", "meta-train"),
        "outer_steps": Key(500, int, "outer updates", "meta-train"),
        "adapt_steps": Key(1, int, "test-time updates", "adapt"),
        "second_order": Key(False, bool, "differentiate through the inner step", "meta-train"),
    },
}


def _coerce(section: str, key: str, raw: Any) -> Any:
    spec = SCHEMA[section][key]
    if isinstance(raw, spec.kind) and not (spec.kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if spec.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return spec.kind(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {spec.kind.__name__}") from None


class Config:
    """Validated settings; read values as ``cfg["train"]["seed"]`` or ``cfg.get("train", "seed")``."""

    def __init__(self, values: Mapping[str, Mapping[str, Any]] | None = None):
        self._v = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
        for section, items in (values or {}).items():
            for key, raw in items.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw: Any) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        self._v[section][key] = _coerce(section, key, raw)

    def get(self, section: str, key: str) -> Any:
        return self._v[section][key]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return dict(self._v[section])

    def flat(self) -> dict[str, Any]:
        return {f"{s}.{k}": v for s, items in self._v.items() for k, v in items.items()}

    def to_text(self) -> str:
        lines = []
        for section, items in self._v.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in items.items()]
            lines.append("")
        return "\n".join(lines)

    def apply_env(self, environ: Mapping[str, str] | None = None) -> "Config":
        environ = os.environ if environ is None else environ
        for section, keys in SCHEMA.items():
            for key in keys:
                name = f"{ENV_PREFIX}{section}_{key}".upper()
                if name in environ:
                    self.set(section, key, environ[name])
        return self

    @classmethod
    def parse(cls, text: str) -> "Config":
        parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                           interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def load(cls, path: str | Path | None, environ: Mapping[str, str] | None = None) -> "Config":
        cfg = cls() if path is None else cls.parse(Path(path).read_text())
        return cfg.apply_env(environ)


def describe() -> str:
    """One line per key: name, default, consuming stage, meaning."""
    rows = []
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            rows.append(f"  {section}.{key} = {spec.default!s:<8} [{spec.stage}] {spec.help}")
    return "\n".join(rows)
