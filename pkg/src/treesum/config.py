"""Flat configuration: one dataclass, a key=value file format, and CLI-style
overrides. Unknown keys are rejected so sweeps and snapshots stay diffable."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace


@dataclass
class Config:
    # model dimensions
    embedding_dim: int = 200
    hidden_dim: int = 200
    topic_hidden_dim: int = 200
    latent_dim: int = 32
    tree_branching: list[int] = field(default_factory=lambda: [4, 4])
    # training
    learning_rate: float = 5e-3
    batch_size: int = 8
    dropout: float = 0.2
    kl_weight_increment: float = 2.5e-5
    kl_anneal: bool = True  # false: beta = 1 from step 0 (ablation)
    gumbel_temperature_init: float = 1.0
    gumbel_temperature_decay: float = 2.5e-5
    gumbel_temperature_min: float = 0.1
    var_floor: float = math.exp(0.5)
    disc_weight: float = 1.0
    disc_sample_len: int = 20
    max_steps: int = 2000
    seed: int = 0
    validate_every: int = 0  # 0 disables periodic validation
    validation_instances: int = 16
    patience: int = 0  # validations without improvement before stopping; 0 = off
    checkpoint_every: int = 500
    stop_prior_gradients: bool = False
    # ablations
    no_discriminator: bool = False
    no_attention: bool = False
    beam_decode: bool = False
    beam_decode_width: int = 5
    # decoding and extraction
    nucleus_p: float = 0.4
    max_decode_len: int = 30
    max_summary_sentences: int = 6
    extraction_beam_width: int = 8
    redundancy_threshold: float = 0.6
    oracle_count: int = 4
    # corpus
    min_count: int = 16
    reviews_per_instance: int = 8
    instances_per_product: int = 12
    max_review_sentences: int = 50
    max_sentence_len: int = 30

    def validate(self) -> "Config":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.kl_weight_increment <= 0:
            raise ValueError("kl_weight_increment must be > 0")
        if min(self.gumbel_temperature_init, self.gumbel_temperature_min) <= 0:
            raise ValueError("gumbel temperatures must be > 0")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be > 0")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ValueError("nucleus_p must be in (0, 1]")
        if not 0.0 < self.redundancy_threshold <= 1.0:
            raise ValueError("redundancy_threshold must be in (0, 1]")
        if any(b < 1 for b in self.tree_branching):
            raise ValueError("tree branching factors must be >= 1")
        if min(self.embedding_dim, self.hidden_dim, self.topic_hidden_dim, self.latent_dim) < 1:
            raise ValueError("model dimensions must be >= 1")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def hash(self) -> str:
        payload = "\n".join(f"{k}={_format(v)}" for k, v in sorted(self.as_dict().items()))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "Config":
        return replace(self, **_coerce_all(overrides)).validate()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for name, value in self.as_dict().items():
                f.write(f"{name}={_format(value)}\n")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ValueError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("list"):
        return [int(v) for v in raw.split(",") if v.strip() != ""]
    return raw


def _coerce_all(overrides: dict[str, str]) -> dict:
    return {k: v if not isinstance(v, str) else _coerce(k, v) for k, v in overrides.items()}


def load_config(path, overrides: dict[str, str] | None = None) -> Config:
    """Read a key=value config file, apply overrides, validate."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value
    if overrides:
        values.update(overrides)
    return Config(**_coerce_all(values)).validate()
