"""Text checkpoints for trainable fields.

Format: a short header (format tag, family name, one JSON line of
construction constants, parameter count) followed by the flat parameter
vector, one repr() float per line. repr round-trips float64 exactly, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import ConfigError

HEADER = "fluxfields-field v1"

_REGISTRY = {}


def register_family(name: str, cls) -> None:
    _REGISTRY[name] = cls


def family_name(field) -> str:
    for name, cls in _REGISTRY.items():
        if type(field) is cls:
            return name
    raise ConfigError(f"field type {type(field).__name__} is not checkpointable")


def save_field(field, path) -> None:
    name = family_name(field)
    params = field.get_params()
    lines = [
        HEADER,
        f"family: {name}",
        "meta: " + json.dumps(field.checkpoint_meta(), sort_keys=True),
        f"params: {params.size}",
    ]
    lines.extend(repr(float(p)) for p in params)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise ConfigError(f"{path}: not a field checkpoint")
    fields = {}
    for line in lines[1:4]:
        key, _, value = line.partition(": ")
        fields[key] = value
    family = fields.get("family")
    if family not in _REGISTRY:
        raise ConfigError(f"{path}: unknown field family {family!r}")
    meta = json.loads(fields["meta"])
    count = int(fields["params"])
    values = [float(v) for v in lines[4 : 4 + count]]
    if len(values) != count:
        raise ConfigError(f"{path}: expected {count} parameters, found {len(values)}")
    return _REGISTRY[family].from_checkpoint(meta, np.asarray(values))
