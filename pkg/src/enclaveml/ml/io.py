"""Model and dataset files behind the file shield."""

from __future__ import annotations

import os

from ..fsshield import FreshnessClient, Mode, shield_read, shield_write
from .data import DatasetShard
from .model import ModelArtifact


def save_model_shielded(path: str | os.PathLike, model: ModelArtifact, key,
                        freshness: FreshnessClient | None = None, mode: Mode = Mode.ENCRYPT_AUTH):
    return shield_write(path, model.encode(), key, freshness, mode)


def load_model_shielded(path: str | os.PathLike, key,
                        freshness: FreshnessClient | None = None) -> ModelArtifact:
    return ModelArtifact.decode(shield_read(path, key, freshness))


def load_model(path: str | os.PathLike) -> ModelArtifact:
    with open(path, "rb") as f:
        return ModelArtifact.decode(f.read())


def load_shard(path: str | os.PathLike, key=None) -> DatasetShard:
    if key is not None:
        return DatasetShard.decode(shield_read(path, key))
    with open(path, "rb") as f:
        return DatasetShard.decode(f.read())
