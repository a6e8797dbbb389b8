"""Flat ``key = value`` run configuration.

Resolution order is defaults, then the config file, then command-line
flags.  The resolved mapping is echoed to ``<out>/<command>.cfg``; feeding
that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

# key -> (type, default)
DEFAULTS: dict[str, tuple[type, Any]] = {
    "data": (str, None),
    "mode": (str, "pixel"),
    "n": (int, 3),
    "caf": (bool, True),
    "patch_side": (int, 7),
    "d": (int, 64),
    "blocks": (int, 5),
    "heads": (int, 4),
    "mlp_hidden": (int, 8),
    "dropout": (float, 0.1),
    "readout": (str, "cls"),
    "pos": (str, "learned"),
    "epochs": (int, None),
    "lr": (float, 5e-4),
    "decay_factor": (float, 0.9),
    "batch": (int, 64),
    "weight_decay": (float, None),
    "seed": (int, 0),
    "deterministic": (bool, False),
    "bits": (int, 32),
    "checkpoint_every": (int, 0),
    "normalize": (bool, True),
    "out": (str, "runs/latest"),
    "synth_k": (int, 4),
    "synth_m": (int, 32),
    "synth_per_class": (int, 100),
    "synth_noise": (float, 0.05),
    "synth_seed": (int, 0),
}


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "on", "yes"):
        return True
    if value in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value, types: dict[str, tuple[type, Any]] = DEFAULTS):
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key][0]
    if value is None or (isinstance(value, str) and value.strip().lower() == "none"):
        return None
    try:
        if kind is bool:
            return parse_bool(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def read_config(path, types: dict[str, tuple[type, Any]] = DEFAULTS) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value, types)
    return values


def format_config(values: dict[str, Any]) -> str:
    def show(v):
        if isinstance(v, bool):
            return "on" if v else "off"
        if isinstance(v, float):
            return repr(v)
        return "none" if v is None else str(v)

    return "".join(f"{k} = {show(values[k])}\n" for k in sorted(values))


@dataclass
class RunSpec:
    command: str
    values: dict[str, Any] = field(default_factory=dict)
    config_path: str | None = None

    @classmethod
    def resolve(cls, command: str, flags: dict[str, Any], config_path: str | None = None,
                extra: dict[str, tuple[type, Any]] | None = None) -> "RunSpec":
        types = {**DEFAULTS, **(extra or {})}
        values = {k: v for k, (_, v) in types.items()}
        if config_path:
            for key, value in read_config(config_path, types).items():
                values[key] = value
        for key, value in flags.items():
            if value is not None:
                values[key] = coerce(key, value, types)
        return cls(command, values, config_path)

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / f"{self.command}.cfg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"# {self.command}\n" + format_config(self.values))
        return path
