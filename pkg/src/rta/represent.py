"""Song representation functions: direct embeddings, metadata mean (FM), metadata attention.

A representer only ever sees a song id and that song's metadata value ids,
so the whole catalog can be embedded offline.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .corpus import ConfigError
from .formats import atomic_write, dump_catalog, load_catalog
from .init import METADATA_FAMILIES, EmbeddingStore


def _metadata_matrix(store: EmbeddingStore, song_metadata: dict[str, np.ndarray]):
    """Stack per-song metadata ids as (N, 4) plus a known mask; cold values get id 0."""
    ids, known = [], []
    for f in METADATA_FAMILIES:
        table, mask = store.metadata[f]
        v = np.asarray(song_metadata[f], dtype=np.int64)
        ok = (v >= 0) & (v < len(mask))
        ok[ok] = mask[v[ok]]
        ids.append(np.where(ok, v, 0))
        known.append(ok)
    return torch.from_numpy(np.stack(ids, 1)), torch.from_numpy(np.stack(known, 1))


class Representer(nn.Module):
    kind = "base"

    def __init__(self, n_songs: int, dim: int):
        super().__init__()
        self.n_songs = n_songs
        self.dim = dim

    def _ids(self, song_ids) -> torch.Tensor:
        ids = torch.as_tensor(song_ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.n_songs):
            bad = ids[(ids < 0) | (ids >= self.n_songs)][0].item()
            raise KeyError(f"unknown song id {bad}")
        return ids

    @torch.no_grad()
    def catalog(self, chunk: int = 8192) -> torch.Tensor:
        return torch.cat([self(torch.arange(s, min(self.n_songs, s + chunk))) for s in range(0, self.n_songs, chunk)])


class DirectRepresenter(Representer):
    kind = "direct"

    def __init__(self, store: EmbeddingStore, trainable: bool = True):
        super().__init__(len(store.song_vectors), store.D)
        self.song = nn.Parameter(torch.tensor(store.song_vectors, dtype=nx.DTYPE), requires_grad=trainable)

    def forward(self, song_ids):
        return self.song[self._ids(song_ids)]


class _MetadataTables(nn.Module):
    """One trainable table per metadata family, addressable as ``tables[family]``."""

    def __init__(self, store: EmbeddingStore):
        super().__init__()
        for f in METADATA_FAMILIES:
            setattr(self, f, nn.Parameter(torch.tensor(store.metadata[f][0], dtype=nx.DTYPE)))

    def __getitem__(self, family: str) -> nn.Parameter:
        return getattr(self, family)


class FMRepresenter(Representer):
    """Mean of the artist, album, duration-bucket and popularity-bucket vectors."""

    kind = "fm"

    def __init__(self, store: EmbeddingStore, song_metadata: dict[str, np.ndarray]):
        super().__init__(len(song_metadata["artist"]), store.D)
        self.tables = _MetadataTables(store)
        ids, known = _metadata_matrix(store, song_metadata)
        self.register_buffer("meta_ids", ids)
        self.register_buffer("meta_known", known)

    def forward(self, song_ids):
        ids = self._ids(song_ids)
        meta, known = self.meta_ids[ids], self.meta_known[ids].to(nx.DTYPE)
        total = sum(self.tables[f][meta[..., j]] * known[..., j, None] for j, f in enumerate(METADATA_FAMILIES))
        return total / known.sum(-1, keepdim=True).clamp(min=1.0)


# finite so that a fully masked row yields uniform weights instead of NaN
_MASKED = -1e9


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention with optional key mask and causal mask."""

    def __init__(self, dim: int, n_heads: int, rng: nx.Rng, dropout: float = 0.0, out_std: float | None = None):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(f"{n_heads} heads do not divide dimension {dim}")
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        for lin in (self.q, self.k, self.v):
            nx.init_linear(lin, rng)
        nx.init_linear(self.o, rng, std=out_std)
        self.drop = nx.Dropout(dropout)

    def forward(self, x, key_mask=None, causal=False):
        b, t, d = x.shape
        h = self.n_heads

        def heads(z):
            return z.view(b, t, h, d // h).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(d // h)
        if causal:
            future = torch.ones(t, t, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, _MASKED)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], _MASKED)
        weights = nx.softmax(scores, -1)
        out = nx.matmul(self.drop(weights), v).transpose(1, 2).reshape(b, t, d)
        return self.o(out)


class AttentionRepresenter(Representer):
    """Self-attention over the tokens [e_s, e_artist, e_album, e_dur, e_pop], mean-pooled.

    Each layer is ``x <- LayerNorm(x + MHSA(x))``; cold tokens are masked out
    of both attention and pooling.
    """

    kind = "attention"

    def __init__(
        self,
        store: EmbeddingStore,
        song_metadata: dict[str, np.ndarray],
        rng: nx.Rng,
        n_layers: int = 1,
        n_heads: int = 4,
        include_song: bool = True,
        dropout: float = 0.0,
    ):
        super().__init__(len(song_metadata["artist"]), store.D)
        self.include_song = include_song
        if include_song:
            self.song = nn.Parameter(torch.tensor(store.song_vectors, dtype=nx.DTYPE))
        self.tables = _MetadataTables(store)
        ids, known = _metadata_matrix(store, song_metadata)
        self.register_buffer("meta_ids", ids)
        self.register_buffer("meta_known", known)
        self.layers = nn.ModuleList(SelfAttention(self.dim, n_heads, rng, dropout) for _ in range(n_layers))
        self.norms = nn.ModuleList(nn.LayerNorm(self.dim) for _ in range(n_layers))

    def tokens(self, ids):
        meta, known = self.meta_ids[ids], self.meta_known[ids]
        toks = [self.tables[f][meta[..., j]] for j, f in enumerate(METADATA_FAMILIES)]
        if self.include_song:
            toks.insert(0, self.song[ids])
            known = torch.cat([torch.ones_like(known[..., :1]), known], -1)
        return torch.stack(toks, -2), known

    def forward(self, song_ids):
        ids = self._ids(song_ids)
        shape = ids.shape
        x, known = self.tokens(ids.reshape(-1))
        for attn, norm in zip(self.layers, self.norms):
            x = norm(x + attn(x, key_mask=known))
        w = known.to(x.dtype)[..., None]
        out = (x * w).sum(-2) / w.sum(-2).clamp(min=1.0)
        return out.reshape(*shape, self.dim)


# -- functional forms ----------------------------------------------------------


def phi_direct(song_id: int, store: EmbeddingStore) -> np.ndarray:
    if not 0 <= int(song_id) < len(store.song_vectors):
        raise KeyError(f"unknown song id {song_id}")
    return store.song_vectors[int(song_id)]


def phi_fm(song_id: int, song_metadata: dict[str, np.ndarray], store: EmbeddingStore) -> np.ndarray:
    """Mean of the known metadata vectors of one song; zero vector if none is known."""
    vecs = []
    for f in METADATA_FAMILIES:
        table, known = store.metadata[f]
        v = int(song_metadata[f][song_id])
        if 0 <= v < len(known) and known[v]:
            vecs.append(table[v])
    if not vecs:
        return np.zeros(store.D, dtype=np.float32)
    return np.mean(vecs, axis=0).astype(np.float32)


@torch.no_grad()
def phi_attention(song_id: int, representer: AttentionRepresenter) -> np.ndarray:
    return representer(torch.tensor([song_id]))[0].numpy()


@torch.no_grad()
def precompute_catalog(representer: Representer, chunk: int = 4096, workers: int = 1) -> np.ndarray:
    """Embed every catalog song; chunk boundaries are fixed so worker count never changes bits."""
    was_training = representer.training
    representer.eval()
    bounds = [(s, min(representer.n_songs, s + chunk)) for s in range(0, representer.n_songs, chunk)]
    out = np.empty((representer.n_songs, representer.dim), dtype=np.float32)

    def run(b):
        s, e = b
        with torch.no_grad():  # grad mode is thread-local
            out[s:e] = representer(torch.arange(s, e)).numpy()

    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(run, bounds))
        else:
            for b in bounds:
                run(b)
    finally:
        representer.train(was_training)
    if not np.isfinite(out).all():
        bad = int(np.argwhere(~np.isfinite(out))[0, 0])
        raise FloatingPointError(f"non-finite representation for song {bad}")
    return out


def save_catalog(matrix: np.ndarray, path, checkpoint_hash: str) -> None:
    atomic_write(path, dump_catalog(matrix, checkpoint_hash))


__all__ = [
    "AttentionRepresenter",
    "DirectRepresenter",
    "FMRepresenter",
    "Representer",
    "SelfAttention",
    "load_catalog",
    "phi_attention",
    "phi_direct",
    "phi_fm",
    "precompute_catalog",
    "save_catalog",
]
