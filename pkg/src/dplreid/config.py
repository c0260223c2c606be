"""Layered run configuration: defaults < DPL_SEED < config file < command-line flags.

The file format is one ``key = value`` per line with dotted section prefixes::

    # experiment 3
    seed = 2
    augment.ratio = 0.5
    stage2.decay_epochs = 29, 41

Keys and their types come from the dataclass defaults of each component, so
an unknown key or a value that does not parse as the default's type is an
error naming the key.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .augment import AugmentConfig, TraditionalAugConfig
from .model import ModelConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config
from .synth_data import DatasetConfig

SEED_ENV = "DPL_SEED"


class ConfigError(ValueError):
    pass


# section -> (dataclass, fields owned elsewhere, renamed fields)
_SECTIONS = {
    "data": (DatasetConfig, {"seed"}, {}),
    "augment": (AugmentConfig, set(), {"occlusion_ratio": "ratio"}),
    "trad": (TraditionalAugConfig, set(), {}),
    "model": (ModelConfig, {"num_ids", "id_map", "seed", "image_h", "image_w"}, {}),
    "stage1": (Stage1Config, {"seed", "template", "augment"}, {}),
    "stage2": (Stage2Config, {"seed", "template", "augment", "trad"}, {}),
}

_GLOBALS = {
    "seed": 0,
    "template": "both",
    "data.path": "",  # empty: generate the synthetic dataset
    "library.path": "synthetic",  # "synthetic": shipped library; empty: none
    "eval.metric": "cosine",
    "eval.ratio": 1.0,
    "eval.align": True,
}


def _field_map() -> Dict[str, Tuple[str, str]]:
    """Dotted key -> (section, dataclass field name)."""
    out = {}
    for section, (cls, skip, rename) in _SECTIONS.items():
        for f in fields(cls):
            if f.name not in skip:
                out[f"{section}.{rename.get(f.name, f.name)}"] = (section, f.name)
    return out


FIELD_MAP = _field_map()


def default_values() -> Dict[str, Any]:
    values = dict(_GLOBALS)
    instances = {s: cls() for s, (cls, _, _) in _SECTIONS.items()}
    for key, (section, name) in FIELD_MAP.items():
        values[key] = getattr(instances[section], name)
    return values


DEFAULTS = default_values()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(text: str, like: Any) -> Any:
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text.strip())
    if isinstance(like, float):
        return float(text.strip())
    return text.strip()


def coerce(key: str, value: Any) -> Any:
    """Convert ``value`` (a string from a file/flag or a Python value) to the key's type."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    like = DEFAULTS[key]
    try:
        if isinstance(like, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            items = [i for i in items if not (isinstance(i, str) and not i.strip())]
            elem = like[0] if like else 0
            return tuple(_parse_scalar(i, elem) if isinstance(i, str) else type(elem)(i) for i in items)
        if isinstance(value, str):
            return _parse_scalar(value, like)
        if isinstance(like, bool):
            if not isinstance(value, bool):
                raise TypeError(f"expected a boolean, got {value!r}")
            return value
        if isinstance(like, (int, float)) and isinstance(value, bool):
            raise TypeError(f"expected a number, got {value!r}")
        if isinstance(like, int) and not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        if isinstance(like, float):
            return float(value)
        if isinstance(like, str) and not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k] = coerce(k, v)
        return RunConfig(vals)

    def dump(self) -> str:
        """Fully resolved config in the file format; parses back to the same values."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    # --- component configs ----------------------------------------------------
    def _section(self, section: str) -> Dict[str, Any]:
        return {name: self.values[key] for key, (s, name) in FIELD_MAP.items() if s == section}

    def _build(self, cls, **kw):
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {cls.__name__}: {exc}") from None

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def template(self) -> str:
        return self.values["template"]

    def dataset(self) -> DatasetConfig:
        return self._build(DatasetConfig, seed=self.seed, **self._section("data"))

    def augment(self) -> AugmentConfig:
        return self._build(AugmentConfig, **self._section("augment"))

    def traditional(self) -> TraditionalAugConfig:
        return self._build(TraditionalAugConfig, **self._section("trad"))

    def model(self, image_h: Optional[int] = None, image_w: Optional[int] = None) -> ModelConfig:
        data = self.dataset()
        return self._build(ModelConfig, seed=self.seed, image_h=image_h or data.image_h,
                           image_w=image_w or data.image_w, **self._section("model"))

    def stage1(self) -> Stage1Config:
        return self._build(Stage1Config, seed=self.seed, template=self.template, augment=self.augment(),
                           **self._section("stage1"))

    def stage2(self) -> Stage2Config:
        return self._build(Stage2Config, seed=self.seed, template=self.template, augment=self.augment(),
                           trad=self.traditional(), **self._section("stage2"))

    def eval_augment(self) -> AugmentConfig:
        return replace(self.augment(), occlusion_ratio=self.values["eval.ratio"], align=self.values["eval.align"])


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[Mapping[str, Any]] = None,
                env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Resolve defaults, the ``DPL_SEED`` fallback, an optional file, then overrides.

    ``None`` values in ``overrides`` mean "flag not given" and are skipped.
    """
    env = os.environ if env is None else env
    cfg = RunConfig()
    if env.get(SEED_ENV, "").strip():
        try:
            cfg = cfg.with_overrides({"seed": env[SEED_ENV]})
        except ConfigError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = cfg.with_overrides(parse_config_text(p.read_text(), str(p)))
    if overrides:
        cfg = cfg.with_overrides({k: v for k, v in overrides.items() if v is not None})
    return cfg
