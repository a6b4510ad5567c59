"""Flat key-value run configuration shared by the command line tools.

One TOML document holds every field of :class:`TaskSpec`, :class:`DroConfig`,
:class:`TrainConfig` and :class:`SynthSpec` at top level, e.g.::

    seed = 3
    model = "maml"
    n_way = 5
    k_shot = 5
    mode = "group_adjusted_dro"
    shift = 3.0

``seed`` drives both the generator and training. Unknown keys are rejected
and everything is validated before any work starts.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from metadro.dro import DroConfig
from metadro.episodes import TaskSpec
from metadro.errors import ConfigError
from metadro.synth import SynthSpec
from metadro.trainer import TrainConfig

_NESTED = ("task", "dro", "seed")
_SECTIONS = {
    "task": TaskSpec(2, 1),
    "dro": DroConfig(),
    "train": TrainConfig(),
    "synth": SynthSpec(),
}


def _keys() -> dict[str, tuple[str, Any]]:
    """Flat key -> (section, default value)."""
    keys: dict[str, tuple[str, Any]] = {}
    for section, default in _SECTIONS.items():
        for f in fields(default):
            if section in ("train", "synth") and f.name in _NESTED:
                continue
            keys[f.name] = (section, getattr(default, f.name))
    keys["seed"] = ("shared", 0)
    return keys


KEYS = _keys()


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    synth: SynthSpec

    @property
    def seed(self) -> int:
        return self.train.seed


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def build_config(values: Mapping[str, Any]) -> RunConfig:
    """Validate a flat mapping into train and synth settings."""
    parts: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        section, default = KEYS[key]
        value = _coerce(key, value, default)
        if section == "shared":
            parts["train"][key] = parts["synth"][key] = value
        else:
            parts[section][key] = value
    task_kw = {"n_way": 5, "k_shot": 5, **parts["task"]}
    try:
        task = TaskSpec(**task_kw)
    except ValueError as exc:
        raise ConfigError("n_way/k_shot/q_query", str(exc)) from None
    dro = DroConfig(**parts["dro"])
    train = TrainConfig(task=task, dro=dro, **parts["train"])
    synth = SynthSpec(**parts["synth"])
    return RunConfig(train, synth)


def read_values(path: str | Path) -> dict[str, Any]:
    """Parse a config file; nested tables are not allowed."""
    with Path(path).open("rb") as fh:
        try:
            values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(key, "nested tables are not supported; use flat keys")
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides``; overrides win."""
    values = read_values(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def to_values(config: RunConfig) -> dict[str, Any]:
    """Flat mapping that :func:`build_config` turns back into ``config``."""
    out: dict[str, Any] = {}
    for key, (section, _) in KEYS.items():
        if section == "shared":
            out[key] = config.train.seed
        elif section == "synth":
            out[key] = getattr(config.synth, key)
        elif section in ("task", "dro"):
            out[key] = getattr(getattr(config.train, section), key)
        else:
            out[key] = getattr(config.train, key)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def dump_toml(config: RunConfig) -> str:
    """Render a flat config document (strings, numbers and number arrays only)."""
    def fmt(v):
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in to_values(config).items())

