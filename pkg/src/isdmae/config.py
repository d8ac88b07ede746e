"""Flat ``key = value`` run configuration files.

Each key names a field of one of the config dataclasses (model, train,
schedule, augment, phantom).  Field names are unique across sections, so no
section prefix is needed.  ``#`` starts a comment.

    # desk smoke run
    stage_channels = 16, 32, 64
    batch_size = 4
    attention_enabled = false
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .data import PhantomSpec
from .errors import FormatError
from .model import ModelConfig
from .training import AugmentSpec, LrSchedule, RunConfig, TrainConfig

SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "schedule": LrSchedule,
    "augment": AugmentSpec,
    "phantom": PhantomSpec,
}


def _key_index() -> dict[str, tuple[str, dataclasses.Field]]:
    index: dict[str, tuple[str, dataclasses.Field]] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in index:
                raise AssertionError(f"config key {f.name!r} is ambiguous")
            index[f.name] = (section, f)
    return index


KEYS = _key_index()


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(text: str, tp):
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _items(text: str) -> list[str]:
    return [t.strip() for t in text.strip().strip("[]()").split(",") if t.strip()]


def parse_value(text: str, field: dataclasses.Field, cls: type):
    """Convert ``text`` according to the annotated type of ``field``."""
    tp = typing.get_type_hints(cls)[field.name]
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (list, tuple):
        elem = args[0] if args else str
        values = [_parse_scalar(t, elem) for t in _items(text)]
        if origin is tuple:
            if len(args) > 1 and args[1] is not Ellipsis and len(values) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(values)
        return values
    return _parse_scalar(text.strip(), tp)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict]:
    """Parse into ``{section: {field: value}}``; raises :class:`FormatError`."""
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        section, field = KEYS[key]
        try:
            out[section][key] = parse_value(value, field, SECTIONS[section])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path) -> dict[str, dict]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text, str(p))


def _replace(obj, overrides: dict, section: str):
    try:
        return dataclasses.replace(obj, **overrides)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid {section} configuration: {exc}") from exc


def apply_to_run(cfg: RunConfig, parsed: dict[str, dict]) -> RunConfig:
    """A copy of ``cfg`` with the model/train/schedule/augment overrides applied."""
    return RunConfig(
        model=_replace(cfg.model, parsed.get("model", {}), "model"),
        train=_replace(cfg.train, parsed.get("train", {}), "train"),
        schedule=_replace(cfg.schedule, parsed.get("schedule", {}), "schedule"),
        augment=_replace(cfg.augment, parsed.get("augment", {}), "augment"),
    )


def apply_to_phantom(spec: PhantomSpec, parsed: dict[str, dict]) -> PhantomSpec:
    return _replace(spec, parsed.get("phantom", {}), "phantom")
