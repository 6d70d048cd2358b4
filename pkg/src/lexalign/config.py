"""Flat ``key = value`` config files.

One assignment per line; ``#`` starts a comment. Keys must be fields of the
target dataclass -- an unknown key is an error, never a warning.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from lexalign.errors import ValidationError

_CASTS = {"int": int, "float": float, "str": str}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValidationError(f"{source}:{lineno}: missing key")
        if key in out:
            raise ValidationError(f"{source}:{lineno}: {key}: set twice")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_text(text, str(p))


def coerce(cls, raw: dict[str, str]) -> dict:
    """Typed values for the fields of dataclass ``cls``."""
    types = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(cls)}
    typed = {}
    for key, value in raw.items():
        if key not in types:
            raise ValidationError(f"{key}: unknown config key (known: {', '.join(sorted(types))})")
        cast = _CASTS[types[key]]
        try:
            typed[key] = cast(value)
        except ValueError:
            raise ValidationError(f"{key}: expected {types[key]}, got {value!r}") from None
    return typed


def apply(base, raw: dict[str, str]):
    """``base`` with ``raw`` string overrides applied (re-validated on construction)."""
    return replace(base, **coerce(type(base), raw))


def parse_assignments(items) -> dict[str, str]:
    """``["a=1", "b=2"]`` (from repeated ``--set``) as a dict."""
    return parse_text("\n".join(items or []), "--set")
