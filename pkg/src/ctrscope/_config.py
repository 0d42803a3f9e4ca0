"""Shared loader for the dataclass config sections."""

from __future__ import annotations

import dataclasses

from .errors import SchemaError


def _coerce(value, type_name: str, where: str):
    # YAML 1.1 reads "1e-4" as a string; accept it for numeric fields
    base = type_name.split("|")[0].strip()
    if base not in ("float", "int") or not isinstance(value, (str, int, float)) or isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and not (base == "int" and isinstance(value, float)):
        return float(value) if base == "float" else value
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected a number, got {value!r}") from None
    if base == "int":
        if not number.is_integer():
            raise SchemaError(f"{where}: expected an integer, got {value!r}")
        return int(number)
    return number


def from_mapping(cls, d: dict, section: str, **fixed):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise SchemaError(f"unknown {section} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, str(fields[k].type), f"{section}.{k}") for k, v in d.items()}
    return cls(**kwargs, **fixed)
