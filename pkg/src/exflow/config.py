"""Flat key=value run configuration.

One `key = value` pair per line; blank lines and lines starting with `#`
are ignored. Unknown keys and malformed values are rejected by name so a
typo cannot silently fall back to a default. `RunConfig.present` records
which keys the file actually set, letting commands distinguish an
explicit value from a default when deciding what overrides a stored
model's hyperparameters.
"""

from __future__ import annotations

from exflow.errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_hidden(raw: str):
    if raw.lower() == "auto":
        return None
    return int(raw)


# key -> (parser, default, human-readable constraint, check)
_SCHEMA = {
    "layers": (int, 6, "integer >= 1", lambda v: v >= 1),
    "embed_width": (int, 16, "integer >= 1", lambda v: v >= 1),
    "hidden": (_parse_hidden, None, "integer >= 1 or 'auto'",
               lambda v: v is None or v >= 1),
    "pseudo_count": (int, 128, "integer >= 1", lambda v: v >= 1),
    "alpha1": (float, 1.0, "float >= 0", lambda v: v >= 0),
    "alpha2": (float, 1.0, "float >= 0", lambda v: v >= 0),
    "lr": (float, 1e-3, "float > 0", lambda v: v > 0),
    "epochs": (int, 200, "integer >= 1", lambda v: v >= 1),
    "patience": (int, 10, "integer >= 0 (0 disables early stopping)",
                 lambda v: v >= 0),
    "batch_size": (int, 64, "integer >= 1", lambda v: v >= 1),
    "seed": (int, 0, "integer >= 0", lambda v: v >= 0),
    "resample_pseudo": (_parse_bool, True, "boolean", lambda v: True),
    "standardize": (_parse_bool, False, "boolean", lambda v: True),
    # synthetic generator scale, read only by the synth and benchmark commands
    "dim": (int, 100, "integer >= 2", lambda v: v >= 2),
    "n_tasks": (int, 4, "integer >= 1", lambda v: v >= 1),
    "task_size": (int, 500, "integer >= 1", lambda v: v >= 1),
    "test_size": (int, 1000, "integer >= 1", lambda v: v >= 1),
    "noise_var": (float, 0.5, "float > 0", lambda v: v > 0),
}

# config keys that map onto UpdateConfig fields when explicitly set
_UPDATE_KEYS = {
    "alpha1": "alpha1",
    "alpha2": "alpha2",
    "pseudo_count": "pseudo_count",
    "epochs": "epochs",
    "patience": "patience",
    "batch_size": "batch_size",
    "lr": "lr",
    "resample_pseudo": "resample_each_step",
}


class RunConfig:
    """Parsed configuration with defaults for every unset key."""

    def __init__(self, **values):
        unknown = set(values) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        self.present = frozenset(values)
        for key, (_, default, want, check) in _SCHEMA.items():
            v = values.get(key, default)
            if not check(v):
                raise ConfigError(f"config key {key!r} must be {want}, got {v!r}")
            setattr(self, key, v)

    def update_overrides(self) -> dict:
        """Explicitly-set training keys, named for UpdateConfig.for_model."""
        return {
            _UPDATE_KEYS[k]: getattr(self, k)
            for k in self.present if k in _UPDATE_KEYS
        }


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin} line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{origin} line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{origin} line {lineno}: duplicate config key {key!r}")
        parser, _, want, _ = _SCHEMA[key]
        try:
            values[key] = parser(raw)
        except ValueError:
            raise ConfigError(
                f"{origin} line {lineno}: config key {key!r} must be {want}, "
                f"got {raw!r}"
            )
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, origin=str(path))
