"""Online scoring: playlist vector from precomputed song rows, exact top-k by inner product."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .aggregate import Aggregator
from .model import RtaModel


@dataclass(frozen=True)
class RankRequest:
    seed_song_ids: tuple
    n_reco: int = 500
    exclude_seed: bool = True

    def __post_init__(self):
        if len(self.seed_song_ids) < 1:
            raise ValueError("a request needs at least one seed song")
        if self.n_reco < 1:
            raise ValueError("n_reco must be positive")


@dataclass
class RankedList:
    song_ids: np.ndarray
    scores: np.ndarray
    fallback: bool = False
    timings: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.song_ids)


class Scratch:
    """Preallocated per-worker buffers sized to the catalog."""

    def __init__(self, n_rows: int):
        self.scores = np.empty(n_rows, dtype=np.float32)
        self.work = np.empty(n_rows, dtype=np.float32)
        self.mask = np.empty(n_rows, dtype=bool)


def _aggregator(model) -> Aggregator:
    return model.aggregator if isinstance(model, RtaModel) else model


@torch.no_grad()
def playlist_embedding(seed_song_ids, model, catalog_matrix: np.ndarray) -> np.ndarray:
    """Apply g to the precomputed rows of the seed songs; no catalog-wide work."""
    ids = np.asarray(seed_song_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot embed an empty seed")
    n = catalog_matrix.shape[0]
    if ids.min() < 0 or ids.max() >= n:
        raise KeyError(f"unknown song id in seed {ids.tolist()}")
    agg = _aggregator(model)
    was_training = agg.training
    agg.eval()
    try:
        vec = agg(torch.from_numpy(np.ascontiguousarray(catalog_matrix[ids], dtype=np.float32)))
    finally:
        agg.train(was_training)
    return vec.numpy().astype(np.float32, copy=False)


def _top_in(scores: np.ndarray, work: np.ndarray, mask: np.ndarray, k: int, offset: int):
    """Exact top-k of one shard (ids shifted by ``offset``), ties by ascending id."""
    n = len(scores)
    k = min(k, n)
    if k == 0:  # empty shard: more shards than rows
        return np.zeros(0, np.int64), scores[:0]
    np.copyto(work, scores)
    work.partition(n - k)
    thr = work[n - k]
    np.greater(scores, thr, out=mask)
    above = np.flatnonzero(mask)
    np.equal(scores, thr, out=mask)
    ties = np.flatnonzero(mask)[: k - len(above)]
    cand = np.concatenate([above, ties])
    return cand + offset, scores[cand]


def score_and_top_k(
    playlist_vector,
    catalog_matrix: np.ndarray,
    n_reco: int,
    exclude_set=(),
    scratch: Scratch | None = None,
    pool: ThreadPoolExecutor | None = None,
    shards: int = 1,
) -> RankedList:
    """Exact top-``n_reco`` of ``<h_p, h_s>`` over the catalog minus ``exclude_set``.

    Ties are broken by ascending song id. With ``pool`` and ``shards > 1``
    each contiguous row range is scored and reduced in parallel, then the
    shard winners are merged in a fixed order.
    """
    n = catalog_matrix.shape[0]
    excl = np.unique(np.asarray(list(exclude_set), dtype=np.int64))
    excl = excl[(excl >= 0) & (excl < n)]
    if not 1 <= n_reco <= n - len(excl):
        raise ValueError(f"cannot rank {n_reco} songs out of {n - len(excl)} candidates")
    q = np.ascontiguousarray(playlist_vector, dtype=np.float32)
    if scratch is None:
        scratch = Scratch(n)
    bounds = np.linspace(0, n, max(1, shards) + 1).astype(np.int64)

    def shard(i):
        a, b = int(bounds[i]), int(bounds[i + 1])
        s = scratch.scores[a:b]
        np.dot(catalog_matrix[a:b], q, out=s)
        local = excl[(excl >= a) & (excl < b)] - a
        s[local] = -np.inf
        return _top_in(s, scratch.work[a:b], scratch.mask[a:b], n_reco, a)

    parts = list(pool.map(shard, range(len(bounds) - 1))) if pool is not None and shards > 1 else [
        shard(i) for i in range(len(bounds) - 1)
    ]
    ids = np.concatenate([p[0] for p in parts])
    vals = np.concatenate([p[1] for p in parts])
    order = np.lexsort((ids, -vals.astype(np.float64)))[:n_reco]
    return RankedList(ids[order], vals[order])


def continue_playlist(
    request: RankRequest,
    model,
    catalog_matrix: np.ndarray,
    scratch: Scratch | None = None,
    pool: ThreadPoolExecutor | None = None,
    shards: int = 1,
) -> RankedList:
    t0 = time.perf_counter()
    vec = playlist_embedding(request.seed_song_ids, model, catalog_matrix)
    t1 = time.perf_counter()
    exclude = request.seed_song_ids if request.exclude_seed else ()
    out = score_and_top_k(vec, catalog_matrix, request.n_reco, exclude, scratch=scratch, pool=pool, shards=shards)
    t2 = time.perf_counter()
    out.timings = {"embed_ms": (t1 - t0) * 1e3, "score_ms": (t2 - t1) * 1e3}
    return out


def full_sort_top_k(playlist_vector, catalog_matrix, n_reco, exclude_set=()) -> RankedList:
    """Reference ranking by sorting every score; used as the exactness oracle."""
    scores = np.asarray(catalog_matrix, dtype=np.float32) @ np.asarray(playlist_vector, dtype=np.float32)
    ids = np.arange(len(scores))
    keep = ~np.isin(ids, np.asarray(list(exclude_set), dtype=np.int64))
    ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores.astype(np.float64)))[:n_reco]
    return RankedList(ids[order], scores[order])


class RtaRecommender:
    """Adapter exposing an RTA model through the ``recommend(seed, n_reco)`` interface."""

    def __init__(self, model, catalog_matrix: np.ndarray, name: str | None = None):
        self.model = model
        self.catalog = np.ascontiguousarray(catalog_matrix, dtype=np.float32)
        self.scratch = Scratch(len(self.catalog))
        cfg = getattr(model, "config", None)
        self.name = name or (cfg.name if cfg is not None else "rta")

    def recommend(self, seed, n_reco: int) -> RankedList:
        return continue_playlist(RankRequest(tuple(int(s) for s in seed), n_reco), self.model, self.catalog, self.scratch)
