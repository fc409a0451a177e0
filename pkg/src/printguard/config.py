"""Experiment configuration loaded from plain-text ``key = value`` sections."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

ATTACK_CLASSES = ("under_extrusion", "over_extrusion", "noise_injection",
                  "dimensional_change", "cavity_insertion")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    n_train: int = 20_000
    n_val: int = 5_000
    n_attack: int = 1_000
    window: int = 2
    skip_warmup: bool = True
    attacks: tuple[str, ...] = ATTACK_CLASSES
    min_size: float = 15.0
    max_size: float = 30.0
    min_layers: int = 15
    max_layers: int = 30
    cavity_band: tuple[float, float] = (0.4, 0.6)
    # features
    variance_threshold: float = 0.01
    correlation_threshold: float = 0.95
    precision: int = 4
    # encoder
    encoder_seed: int = 0
    resolutions: tuple[float, ...] = (1.0, 0.25, 0.0625)
    # training
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 25
    key_swaps: int = 1
    value_rate: float = 0.1
    jitter: float = 0.05
    # detectors
    k: int = 4
    percentile: float = 95.0
    pca_dims: int = 2
    # reporting only
    reference_counts: tuple[int, ...] = ()

    def __post_init__(self):
        if min(self.n_train, self.n_val) < 20 or self.n_attack < 1:
            raise ConfigError("need >= 20 benign windows per split and >= 1 attack window per class")
        if self.window < 1:
            raise ConfigError("window must be >= 1 sample")
        unknown = set(self.attacks) - set(ATTACK_CLASSES)
        if unknown:
            raise ConfigError(f"unknown attack classes {sorted(unknown)}")
        if not self.min_size <= self.max_size or not 1 <= self.min_layers <= self.max_layers:
            raise ConfigError("part family bounds are inverted")
        if self.pca_dims not in (2, 3):
            raise ConfigError("pca_dims must be 2 or 3")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **values: Any) -> "ExperimentConfig":
        return replace(self, **values)


DESK_SCALE = ExperimentConfig()
FULL_SCALE = ExperimentConfig(n_train=98_720, n_val=57_373, n_attack=10_000,
                               reference_counts=(98_720, 57_373, 10_120, 9_950, 15_456, 9_324, 10_521))
SMOKE_SCALE = ExperimentConfig(n_train=600, n_val=200, n_attack=60, epochs=3)
PRESETS = {"desk": DESK_SCALE, "full": FULL_SCALE, "smoke": SMOKE_SCALE}


def _coerce(raw: str, template: Any, name: str) -> Any:
    try:
        if isinstance(template, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if template and isinstance(template[0], (int, float)):
                kind = type(template[0])
                return tuple(kind(s) for s in items)
            if name == "reference_counts":
                return tuple(int(s) for s in items)
            if name in ("resolutions", "cavity_band"):
                return tuple(float(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def load_config(path: str | Path | None = None, base: ExperimentConfig = DESK_SCALE) -> ExperimentConfig:
    """Read ``key = value`` lines (any section) on top of ``base``.

    A ``preset`` key in an ``[experiment]`` section swaps the base for one of
    the named presets before other keys apply.
    """
    if path is None:
        return base
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name: f for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key == "preset":
                if raw not in PRESETS:
                    raise ConfigError(f"unknown preset {raw!r}")
                base = PRESETS[raw]
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            values[key] = raw
    typed = {k: _coerce(v, getattr(base, k), k) for k, v in values.items()}
    return replace(base, **typed)
