"""INI run configuration: flat sections of ``key = value`` pairs.

Parse rules
-----------
* Standard ``configparser`` syntax with interpolation disabled; keys are
  case-sensitive; ``#`` and ``;`` start full-line comments.
* A section maps onto one config dataclass; unknown keys are errors.
* Values are converted by the type of the field's default: ``int``,
  ``float`` (Python float syntax), ``bool`` (``true``/``false``/``1``/``0``/
  ``yes``/``no``), tuples as comma-separated numbers, strings verbatim.
  The literal ``none`` (any case) means "unset" for optional fields.
* ``--set section.key=value`` overrides are applied after the file is read
  and follow the same rules.
* Relative paths are resolved against the current working directory.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path

from .errors import DenseViTError


class ConfigError(DenseViTError, ValueError):
    """Malformed config file, unknown key, or unparsable value."""


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    cp.optionxform = str
    return cp


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    cp = _parser()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    apply_overrides(cp, overrides)
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides) -> None:
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())


def section(cp: configparser.ConfigParser, name: str) -> dict:
    return dict(cp.items(name)) if cp.has_section(name) else {}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def convert(text: str, default):
    """Parse ``text`` into the type of ``default``."""
    if text.strip().lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            return parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in items)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {type(default).__name__}") from None
    if default is None:  # optional field without a typed default: int, float, bool or tuple by shape
        for attempt in (int, float):
            try:
                return attempt(text)
            except ValueError:
                pass
        if "," in text:
            return tuple(float(t) if "." in t else int(t) for t in text.split(",") if t.strip())
        try:
            return parse_bool(text)
        except ConfigError:
            return text
    return text


def build(cls, values: dict, base=None, skip=()):
    """Instantiate dataclass ``cls`` from string ``values`` over ``base`` (or defaults)."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    current = base if base is not None else cls()
    kwargs = {}
    for key, text in values.items():
        if key in skip:
            continue
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = convert(text, getattr(current, key))
    try:
        return dataclasses.replace(current, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def dump(sections: dict) -> str:
    """Render ``{section: dataclass-or-dict}`` back to INI text (parsable by ``load_config``)."""
    cp = _parser()
    for name, obj in sections.items():
        data = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
        cp.add_section(name)
        for key, value in data.items():
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (tuple, list)):
                text = ", ".join(repr(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            cp.set(name, key, text)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
