"""Run configuration: defaults, YAML file loading, and flag precedence."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import yaml

from .training import CombinationMode

MAX_EPOCHS = 50


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs beyond the dataset."""

    data: str | None = None
    label_column: str = "label"
    d: int = 5  # window length
    k: int = 5  # graph neighbors
    w: int = 16  # embedding dimension
    latent: int | None = None
    epochs: int = 50
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    mode: str = "mgda_ub"
    c_pred: float = 0.5
    c_recon: float = 0.5
    period: int = 1
    train_frac: float = 0.6
    val_frac: float = 0.2
    no_vae_head: bool = False
    no_pred_head: bool = False
    no_shared_layer: bool = False
    no_mgda: bool = False

    def validate(self) -> "RunConfig":
        if self.d < 1:
            raise ConfigError(f"window d must be >= 1, got {self.d}")
        if self.k < 1:
            raise ConfigError(f"neighbor count k must be >= 1, got {self.k}")
        if self.w < 1:
            raise ConfigError(f"embedding dim w must be >= 1, got {self.w}")
        if self.latent is not None and self.latent < 1:
            raise ConfigError(f"latent size must be >= 1, got {self.latent}")
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise ConfigError(f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.mode not in ("mgda_ub", "fixed", "alternating"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.no_vae_head and self.no_pred_head:
            raise ConfigError("at most one head may be ablated")
        if not 0 < self.train_frac < 1 or not 0 < self.val_frac < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac >= 1:
            raise ConfigError("train_frac + val_frac must leave room for a test split")
        try:
            self.combination_mode()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def combination_mode(self) -> CombinationMode:
        """Effective loss-combination mode; disabling balancing means
        alternating single-head epochs."""
        kind = "alternating" if self.no_mgda and self.mode == "mgda_ub" else self.mode
        return CombinationMode(kind, self.c_pred, self.c_recon, self.period)

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def load_config_file(path: str) -> dict:
    """Read a YAML mapping of RunConfig fields."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping of option names to values")
    unknown = sorted(set(doc) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"{path}: unknown option(s) {', '.join(unknown)}")
    return doc


def build_config(file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Merge defaults <- config file <- command-line flags, then validate.

    `flag_values` entries that are None mean "flag not given" and are skipped.
    """
    merged: dict = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config option '{key}'")
            merged[key] = value
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()
