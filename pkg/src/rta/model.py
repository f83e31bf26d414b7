"""RTA models: a song representer paired with a playlist aggregator.

Scores are ``f(p, s) = <g(h_{s_1}, ..., h_{s_l}), h_s>`` with ``h = phi(song)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .aggregate import Aggregator, build_aggregator
from .corpus import ConfigError
from .init import METADATA_FAMILIES, EmbeddingStore
from .represent import AttentionRepresenter, DirectRepresenter, FMRepresenter, Representer

PRESETS = {
    "mf-avg": ("direct", "avg"),
    "mf-cnn": ("direct", "cnn"),
    "mf-gru": ("direct", "gru"),
    "mf-transformer": ("direct", "transformer"),
    "fm-transformer": ("fm", "transformer"),
    "nn-transformer": ("attention", "transformer"),
}

# learning rates picked on validation NDCG of the synthetic clustered corpus
RECOMMENDED_LR = {
    "mf-avg": 0.5,
    "mf-cnn": 0.3,
    "mf-gru": 1.0,
    "mf-transformer": 0.1,
    "fm-transformer": 0.1,
    "nn-transformer": 0.1,
}


@dataclass
class ModelConfig:
    name: str = "mf-avg"
    max_len: int = 250
    dropout: float = 0.1
    freeze_songs: bool = False
    init_seed: int = 0
    cnn: dict = field(default_factory=lambda: {"kernel": 3, "layers": 2})
    gru: dict = field(default_factory=lambda: {"layers": 1})
    transformer: dict = field(default_factory=lambda: {"layers": 2, "n_heads": 4, "ff_mult": 4})
    attention: dict = field(default_factory=lambda: {"n_layers": 1, "n_heads": 4, "include_song": True})

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ConfigError(f"unknown model {self.name!r}; choose from {sorted(PRESETS)}")
        if not 0.0 <= self.dropout <= 0.5:
            raise ConfigError("dropout must lie in [0, 0.5]")

    @property
    def kinds(self) -> tuple[str, str]:
        return PRESETS[self.name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class RtaModel(nn.Module):
    def __init__(self, representer: Representer, aggregator: Aggregator, config: ModelConfig | None = None):
        super().__init__()
        if representer.dim != aggregator.dim:
            raise nx.ShapeError("model", (representer.dim,), (aggregator.dim,))
        self.representer = representer
        self.aggregator = aggregator
        self.config = config

    @property
    def dim(self) -> int:
        return self.representer.dim

    @property
    def n_songs(self) -> int:
        return self.representer.n_songs

    def playlist_vector(self, song_ids) -> torch.Tensor:
        return self.aggregator(self.representer(song_ids))

    def score(self, song_ids, candidates) -> torch.Tensor:
        """f(p, s) for every candidate s."""
        return self.representer(candidates) @ self.playlist_vector(song_ids)


def build_model(config: ModelConfig, store: EmbeddingStore, song_metadata: dict[str, np.ndarray]) -> RtaModel:
    rng = nx.Rng(config.init_seed)
    rep_kind, agg_kind = config.kinds
    if rep_kind == "direct":
        rep = DirectRepresenter(store, trainable=not config.freeze_songs)
    elif rep_kind == "fm":
        rep = FMRepresenter(store, song_metadata)
    else:
        rep = AttentionRepresenter(store, song_metadata, rng.child(1), dropout=config.dropout, **config.attention)
        if config.freeze_songs and rep.include_song:
            rep.song.requires_grad_(False)
    extra = {"cnn": config.cnn, "gru": config.gru, "transformer": config.transformer}.get(agg_kind, {})
    agg = build_aggregator(agg_kind, store.D, config.max_len, rng.child(2), dropout=config.dropout, **extra)
    return RtaModel(rep, agg, config)


def skeleton_store(n_songs: int, dim: int, table_rows: dict[str, int]) -> EmbeddingStore:
    """Zero-filled store of the right shapes, to be overwritten by a state dict."""
    meta = {f: (np.zeros((table_rows[f], dim), np.float32), np.ones(table_rows[f], bool)) for f in METADATA_FAMILIES}
    return EmbeddingStore(np.zeros((n_songs, dim), np.float32), meta)
