"""Run configuration and its key-value text format.

A config file holds one ``key = value`` pair per line. ``#`` starts a
comment, blank lines are ignored and keys are the field names of
:class:`RunConfig`. Booleans are ``true``/``false``, ``ks`` is a
comma-separated integer list and an empty value means "unset" for the
optional path fields. A tab delimiter is written ``\\t``. Unknown keys and
malformed values are errors that name the offending line.

Example::

    # synthetic desk run
    dataset = synthetic
    codebook_size = 16
    neighbors = 10
    user_feature = false
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

STAGES = ("prepare", "pretrain", "quantize", "index", "train", "eval")


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "synthetic"
    delimiter: str = ","
    header: bool = False
    rating_threshold: int = 3
    item_attributes: str | None = None
    user_attributes: str | None = None
    max_seq_len: int = 50
    synth_users: int = 200
    synth_items: int = 100
    synth_groups: int = 4
    # about 6% density, near MovieLens-1M; denser data saturates the ID-only model
    synth_p_in: float = 0.2
    synth_p_out: float = 0.01
    synth_genre_noise: float = 0.1
    synth_release_span: float = 0.0
    # pretraining
    pretrain_epochs: int = 10
    pretrain_batch_size: int = 1024
    pretrain_lr: float = 1e-3
    pretrain_patience: int = 2
    feature_dim: int = 16
    # quantizer
    dim: int = 64
    layers: int = 4
    codebook_size: int = 128
    beta: float = 0.25
    quantizer_epochs: int = 50
    quantizer_batch_size: int = 1024
    quantizer_lr: float = 1e-3
    quantizer_n_init: int = 1
    # neighbor index
    neighbors: int = 30
    latent_neighbors: int = 2
    # recommender
    hidden: int = 128
    sem_dim: int = 0
    epochs: int = 50
    batch_size: int = 1024
    lr: float = 1e-3
    patience: int = 3
    semantic_history: str = "causal"
    user_feature: bool = True
    item_feature: bool = True
    user_linkage: bool = True
    item_linkage: bool = True
    latent_linkage: bool = True
    # evaluation
    eval_batch_size: int = 1024
    ks: tuple[int, ...] = (5, 10, 20)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("rating_threshold", "max_seq_len", "synth_users", "synth_items", "synth_groups",
                    "pretrain_epochs", "pretrain_batch_size", "pretrain_patience", "feature_dim", "dim",
                    "layers", "quantizer_epochs", "quantizer_batch_size", "quantizer_n_init", "neighbors",
                    "hidden", "epochs", "batch_size", "patience", "eval_batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pretrain_lr", "quantizer_lr", "lr", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be at least 2, got {self.codebook_size}")
        if self.dim % self.layers:
            raise ValueError(f"dim {self.dim} is not divisible by layers {self.layers}")
        if self.latent_neighbors < 0 or self.sem_dim < 0:
            raise ValueError("latent_neighbors and sem_dim must be non-negative")
        if self.semantic_history not in ("frozen", "causal"):
            raise ValueError(f"semantic_history must be frozen or causal, got {self.semantic_history!r}")
        if not self.ks or any(k <= 0 for k in self.ks):
            raise ValueError(f"ks must be positive integers, got {self.ks}")
        for name in ("synth_p_in", "synth_p_out", "synth_genre_noise", "synth_release_span"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def semantic_dim(self) -> int:
        """Per-layer semantic embedding width; 0 means ``dim // layers``."""
        return self.sem_dim or self.dim // self.layers

    @property
    def synthetic(self) -> bool:
        return self.dataset == "synthetic"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def stage_fingerprint(self, stage: str) -> str:
        """Hash of every key that can influence ``stage`` or anything upstream of it."""
        keys = []
        for s in STAGES[:STAGES.index(stage) + 1]:
            keys += STAGE_KEYS[s]
        text = "\n".join(f"{k}={format_value(getattr(self, k))}" for k in ["seed"] + keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


STAGE_KEYS = {
    "prepare": ["dataset", "delimiter", "header", "rating_threshold", "item_attributes", "user_attributes",
                "synth_users", "synth_items", "synth_groups", "synth_p_in", "synth_p_out", "synth_genre_noise",
                "synth_release_span"],
    "pretrain": ["max_seq_len", "pretrain_epochs", "pretrain_batch_size", "pretrain_lr", "pretrain_patience",
                 "feature_dim", "hidden", "dim"],
    "quantize": ["layers", "codebook_size", "beta", "quantizer_epochs", "quantizer_batch_size", "quantizer_lr",
                 "quantizer_n_init"],
    "index": ["neighbors", "latent_neighbors"],
    "train": ["sem_dim", "epochs", "batch_size", "lr", "patience", "semantic_history", "user_feature",
              "item_feature", "user_linkage", "item_linkage", "latent_linkage"],
    "eval": ["eval_batch_size", "ks"],
}

# Overrides for the bundled planted-cluster data: ~100 items cannot fill a
# 128-word codebook, ~1k train interactions give a single pretrain step per
# epoch at batch 1024, and the pretrain validation loss rises for a few
# epochs before it falls. The recommender keeps batch 1024: smaller batches
# drive the sigmoid scores into saturation within a few epochs.
SYNTHETIC_PRESET = {
    "codebook_size": 16,
    "neighbors": 10,
    "pretrain_epochs": 30,
    "pretrain_batch_size": 256,
    "pretrain_patience": 10,
    "quantizer_epochs": 50,
    "quantizer_batch_size": 128,
    "quantizer_lr": 1e-2,
    "quantizer_n_init": 3,
    "epochs": 80,
}


def synthetic_config(**changes) -> RunConfig:
    return RunConfig(**(SYNTHETIC_PRESET | changes))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value).replace("\t", "\\t")


def _field_types() -> dict[str, object]:
    return get_type_hints(RunConfig)


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of field ``key``."""
    kind = _field_types()[key]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected true or false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind == tuple[int, ...]:
        return tuple(int(p) for p in text.split(",") if p.strip())
    if kind == (str | None):
        return text or None
    return text.replace("\\t", "\t")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    names = {f.name for f in fields(RunConfig)}
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"{source}:{line_no}: expected 'key = value'")
        if key not in names:
            raise ValueError(f"{source}:{line_no}: unknown key {key!r}")
        try:
            out[key] = parse_value(key, value)
        except ValueError as exc:
            raise ValueError(f"{source}:{line_no}: {exc}") from None
    return out


def load_config(path, base: RunConfig | None = None, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    base = base or RunConfig()
    return base.replace(**(values | overrides))


def dump_config(config: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(config, f.name))}\n" for f in fields(RunConfig))


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
