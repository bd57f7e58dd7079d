"""Experiment configuration: sectioned ``key = value`` text files.

Defaults are the published training setup (model dim 512, 3 layers,
8 heads, batch 16, beam 3, lr 1e-4 visual / 5e-4 rest, decay 0.8).
Tests and demos run the :func:`desk` preset, which shrinks the model to
laptop scale without touching the optimization defaults.

Unknown keys are hard errors: a silently ignored typo corrupts an
experiment. Every resolved config has a stable sha256 digest that
artifacts (checkpoints, corpora) embed for compatibility checks.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Bad config file contents or an unknown/invalid key."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "on", "yes", "1"):
        return True
    if low in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_intlist(s: str):
    return tuple(int(part) for part in str(s).split(",") if part.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: str(s).strip(),
    "intlist": _parse_intlist,
}

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "model": {
        "dim": ("int", 512),
        "heads": ("int", 8),
        "enc_layers": ("int", 3),
        "dec_layers": ("int", 3),
        "ffn_ratio": ("int", 4),
        "align_blocks": ("int", 1),
        "fusion": ("str", "add"),  # add | concat
        "branch": ("str", "full"),  # full | no_visual | no_sem
        "patch_positions": ("bool", True),
        "tie_output": ("bool", False),
        "separate_dict_table": ("bool", False),
        "dictionary_file": ("str", ""),
    },
    "vision": {
        "channels": ("intlist", (32, 64)),
        "kernel": ("int", 3),
        "stride": ("int", 2),
        "in_channels": ("int", 1),
    },
    "training": {
        "batch_size": ("int", 16),
        "epochs": ("int", 100),
        "lr_visual": ("float", 1e-4),
        "lr_rest": ("float", 5e-4),
        "lr_decay": ("float", 0.8),
        "adam_beta1": ("float", 0.9),
        "adam_beta2": ("float", 0.999),
        "adam_eps": ("float", 1e-8),
        "grad_clip": ("float", 5.0),
        "warmup_epochs": ("int", 0),
        "weight_decay": ("float", 0.0),
        "label_smoothing": ("float", 0.0),
        "seed": ("int", 0),
        "metrics_every": ("int", 1),
    },
    "decode": {
        "beam": ("int", 3),
        "max_len": ("int", 60),
        "length_alpha": ("float", 0.0),
    },
    "data": {
        "min_freq": ("int", 3),
    },
    "synthetic": {
        "image_size": ("int", 20),
        "views": ("int", 1),
        "mention_prob": ("float", 0.6),
        "abnormal_prob": ("float", 0.5),
    },
}

_CHOICES = {
    ("model", "fusion"): ("add", "concat"),
    ("model", "branch"): ("full", "no_visual", "no_sem"),
}


class Config:
    """Resolved configuration: schema defaults plus file overrides."""

    def __init__(self, overrides: dict[tuple[str, str], object] | None = None):
        self._values: dict[tuple[str, str], object] = {}
        for section, keys in SCHEMA.items():
            for key, (_, default) in keys.items():
                self._values[(section, key)] = default
        for sk, value in (overrides or {}).items():
            self._set(sk, value)

    def _set(self, sk: tuple[str, str], value) -> None:
        section, key = sk
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        typ = SCHEMA[section][key][0]
        if isinstance(value, str):
            try:
                value = _PARSERS[typ](value)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from e
        choices = _CHOICES.get(sk)
        if choices and value not in choices:
            raise ConfigError(
                f"[{section}] {key} must be one of {choices}, got {value!r}"
            )
        self._values[sk] = value

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        try:
            return self._values[(section, key)]
        except KeyError:
            raise ConfigError(f"unknown config key [{section}] {key}") from None

    def updated(self, **dotted_values) -> "Config":
        """A copy with ``section_key=value`` style overrides applied."""
        new = Config()
        new._values = dict(self._values)
        for dotted, value in dotted_values.items():
            section, _, key = dotted.partition("__")
            new._set((section, key), value)
        return new

    def resolved_text(self) -> str:
        """Canonical textual form; the digest is computed from this."""
        lines = []
        for section in sorted(SCHEMA):
            lines.append(f"[{section}]")
            for key in sorted(SCHEMA[section]):
                value = self._values[(section, key)]
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()


def parse_config_text(text: str) -> Config:
    """Parse ``[section]`` / ``key = value`` lines; errors carry line numbers."""
    overrides: dict[tuple[str, str], object] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown config key [{section}] {key}")
        try:
            overrides[(section, key)] = _PARSERS[SCHEMA[section][key][0]](value.strip())
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for [{section}] {key}: {e}")
    cfg = Config()
    for sk, v in overrides.items():
        cfg._set(sk, v)
    return cfg


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def desk() -> Config:
    """Laptop-scale preset: small dims, same optimization defaults."""
    cfg = Config()
    cfg._set(("model", "dim"), 64)
    cfg._set(("model", "heads"), 4)
    cfg._set(("model", "enc_layers"), 2)
    cfg._set(("model", "dec_layers"), 2)
    cfg._set(("vision", "channels"), (8, 16))
    cfg._set(("data", "min_freq"), 1)
    return cfg
