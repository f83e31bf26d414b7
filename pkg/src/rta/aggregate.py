"""Playlist aggregation functions g: average, gated CNN, GRU and Transformer decoder.

Every aggregator is causal. ``prefix_states`` maps a right-padded batch
``(B, T, D)`` to ``(B, T, D)`` where row ``i`` equals g applied to the first
``i + 1`` vectors, so one forward pass yields the playlist vector of every
prefix of a playlist.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .corpus import ConfigError
from .represent import SelfAttention


def _as_batch(sequence) -> torch.Tensor:
    if isinstance(sequence, torch.Tensor) and sequence.is_floating_point():
        x = sequence
    else:
        x = torch.as_tensor(sequence, dtype=nx.DTYPE)
    if x.dim() != 2:
        raise nx.ShapeError("aggregate", x.shape, ("l", "D"))
    if x.shape[0] == 0:
        raise ValueError("cannot aggregate an empty playlist")
    return x[None]


class Aggregator(nn.Module):
    kind = "base"

    def __init__(self, dim: int, max_len: int):
        super().__init__()
        self.dim = dim
        self.max_len = max_len

    def prefix_states(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def last_states(self, x: torch.Tensor, lengths) -> torch.Tensor:
        """Playlist vectors of a right-padded batch with the given true lengths."""
        states = self.prefix_states(x)
        idx = torch.as_tensor(lengths, dtype=torch.long) - 1
        return states[torch.arange(len(idx)), idx]

    def forward(self, sequence) -> torch.Tensor:
        """g(h_1, ..., h_l) for a single (l, D) sequence."""
        x = sequence[None] if isinstance(sequence, torch.Tensor) and sequence.dim() == 2 else _as_batch(sequence)
        if x.shape[1] == 0:
            raise ValueError("cannot aggregate an empty playlist")
        if x.shape[-1] != self.dim:
            raise nx.ShapeError(self.kind, x.shape, (self.dim,))
        return self.prefix_states(x)[0, -1]


class AvgAggregator(Aggregator):
    kind = "avg"

    def prefix_states(self, x):
        counts = torch.arange(1, x.shape[1] + 1, dtype=x.dtype)
        return x.cumsum(1) / counts[None, :, None]


class GatedCNNAggregator(Aggregator):
    """Stacked causal convolutions with gated linear units, ``A * sigmoid(B)``.

    The receptive field is ``(kernel - 1) * layers + 1`` songs.
    """

    kind = "cnn"

    def __init__(self, dim, max_len, rng: nx.Rng, kernel=3, layers=2, residual=True, dropout=0.0):
        super().__init__(dim, max_len)
        if not 2 <= kernel <= 5:
            raise ConfigError("CNN kernel size must lie in [2, 5]")
        self.kernel = kernel
        self.residual = residual
        bound = 1.0 / math.sqrt(dim * kernel)
        self.lin_w = nn.ParameterList(nn.Parameter(rng.uniform((dim, dim, kernel), bound)) for _ in range(layers))
        self.lin_bias = nn.ParameterList(nn.Parameter(torch.zeros(dim)) for _ in range(layers))
        self.gate_w = nn.ParameterList(nn.Parameter(rng.uniform((dim, dim, kernel), bound)) for _ in range(layers))
        self.gate_bias = nn.ParameterList(nn.Parameter(torch.zeros(dim)) for _ in range(layers))
        self.drop = nx.Dropout(dropout)

    def prefix_states(self, x):
        for wa, ba, wb, bb in zip(self.lin_w, self.lin_bias, self.gate_w, self.gate_bias):
            a = nx.conv1d_causal(x, wa, ba)
            b = nx.conv1d_causal(x, wb, bb)
            h = self.drop(a * nx.sigmoid(b))
            x = x + h if self.residual else h
        return x


class GRUAggregator(Aggregator):
    """GRU from a zero state; the hidden state is projected to D when widths differ."""

    kind = "gru"

    def __init__(self, dim, max_len, rng: nx.Rng, hidden=None, layers=1, dropout=0.0):
        super().__init__(dim, max_len)
        hidden = hidden or dim
        self.gru = nn.GRU(dim, hidden, num_layers=layers, batch_first=True)
        bound = 1.0 / math.sqrt(hidden)
        with torch.no_grad():
            for name, p in self.gru.named_parameters():
                p.copy_(rng.uniform(tuple(p.shape), bound) if name.startswith("weight") else torch.zeros_like(p))
        self.proj = None
        if hidden != dim:
            self.proj = nn.Linear(hidden, dim)
            nx.init_linear(self.proj, rng)
        self.drop = nx.Dropout(dropout)

    def prefix_states(self, x):
        if x.shape[-1] != self.dim:
            raise nx.ShapeError("gru", x.shape, (self.dim,))
        out, _ = self.gru(self.drop(x))
        return self.proj(out) if self.proj is not None else out


class DecoderBlock(nn.Module):
    def __init__(self, dim, n_heads, ff_width, rng, dropout, out_std):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, rng, dropout, out_std=out_std)
        self.norm2 = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, ff_width)
        self.ff_out = nn.Linear(ff_width, dim)
        nx.init_linear(self.ff_in, rng)
        nx.init_linear(self.ff_out, rng, std=out_std)
        self.drop = nx.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x), causal=True))
        return x + self.drop(self.ff_out(F.gelu(self.ff_in(self.norm2(x)))))


class TransformerAggregator(Aggregator):
    """Causally masked pre-norm decoder stack with learned positions; no final norm."""

    kind = "transformer"

    def __init__(self, dim, max_len, rng: nx.Rng, layers=2, n_heads=4, ff_mult=4, dropout=0.0, out_std=0.02, pos_std=0.01):
        super().__init__(dim, max_len)
        self.pos = nn.Parameter(rng.normal((max_len, dim), pos_std))
        self.blocks = nn.ModuleList(DecoderBlock(dim, n_heads, ff_mult * dim, rng, dropout, out_std) for _ in range(layers))
        self.drop = nx.Dropout(dropout)

    def prefix_states(self, x):
        t = x.shape[1]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        x = self.drop(nx.add(x, self.pos[:t]))
        for block in self.blocks:
            x = block(x)
        return x


def g_avg(sequence) -> torch.Tensor:
    x = _as_batch(sequence)
    return x[0].mean(0)


def g_cnn(sequence, params: GatedCNNAggregator) -> torch.Tensor:
    return params(_as_batch(sequence)[0])


def g_gru(sequence, params: GRUAggregator) -> torch.Tensor:
    return params(_as_batch(sequence)[0])


def g_transformer(sequence, params: TransformerAggregator) -> torch.Tensor:
    return params(_as_batch(sequence)[0])


def causal_prefix_states(sequence, aggregator: Aggregator) -> torch.Tensor:
    """(l, D) matrix whose row i is g applied to the first i + 1 vectors."""
    return aggregator.prefix_states(_as_batch(sequence))[0]


def build_aggregator(kind: str, dim: int, max_len: int, rng: nx.Rng, dropout: float = 0.0, **kw) -> Aggregator:
    if kind == "avg":
        return AvgAggregator(dim, max_len)
    if kind == "cnn":
        return GatedCNNAggregator(dim, max_len, rng, dropout=dropout, **kw)
    if kind == "gru":
        return GRUAggregator(dim, max_len, rng, dropout=dropout, **kw)
    if kind == "transformer":
        return TransformerAggregator(dim, max_len, rng, dropout=dropout, **kw)
    raise ConfigError(f"unknown aggregator kind {kind!r}")
