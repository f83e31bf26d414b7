"""Masked-continuation evaluation: metrics, per-n_seed protocol, reports and kNN baselines."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import Corpus, GroundTruth, mask_playlist
from .rank import RankedList

_logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "r_precision", "ndcg", "clicks", "popularity")
CSV_COLUMNS = (
    "model",
    "n_seed",
    "n_playlists",
    "precision",
    "precision_ci",
    "recall",
    "recall_ci",
    "r_precision",
    "r_precision_ci",
    "ndcg",
    "ndcg_ci",
    "clicks",
    "clicks_ci",
    "popularity",
    "popularity_ci",
    "coverage",
    "inference_ms_mean",
    "inference_ms_p99",
)
TIMING_COLUMNS = ("inference_ms_mean", "inference_ms_p99")


class Recommender(Protocol):
    name: str

    def recommend(self, seed: Sequence[int], n_reco: int) -> RankedList: ...


# -- per-playlist metrics --------------------------------------------------------


def metric_precision_recall(ranked, ground_truth, n_reco: int) -> tuple[float, float]:
    truth = ground_truth.songs if isinstance(ground_truth, GroundTruth) else set(ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    hits = len(set(np.asarray(ranked[:n_reco]).tolist()) & set(truth))
    return hits / n_reco, hits / len(truth)


def metric_r_precision(ranked, ground_truth_songs, ground_truth_artists: Counter, artist_of) -> float:
    """Song matches plus a quarter credit per artist-only match in the first |G| slots.

    Artist credits are capped by each artist's multiplicity among the
    ground-truth songs; exact song matches do not consume them.
    """
    truth = set(ground_truth_songs)
    g = len(truth)
    if g == 0:
        raise ValueError("empty ground truth")
    credits = Counter(ground_truth_artists)
    songs = artist_only = 0
    for s in np.asarray(ranked[:g]).tolist():
        if s in truth:
            songs += 1
            continue
        a = int(artist_of[s])
        if credits[a] > 0:
            credits[a] -= 1
            artist_only += 1
    return (songs + 0.25 * artist_only) / g


def metric_ndcg(ranked, ground_truth, n_reco: int | None = None, variant: str = "standard") -> float:
    """Binary-relevance NDCG.

    ``standard`` discounts rank i by log2(i + 1); ``challenge`` leaves rank 1
    undiscounted and divides rank i >= 2 by log2(i).
    """
    truth = ground_truth.songs if isinstance(ground_truth, GroundTruth) else set(ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    ranked = np.asarray(ranked)
    if n_reco is not None:
        ranked = ranked[:n_reco]
    n = len(ranked)

    def discount(i):  # i is 1-based
        if variant == "challenge":
            return 1.0 if i == 1 else 1.0 / math.log2(i)
        if variant == "standard":
            return 1.0 / math.log2(i + 1)
        raise ValueError(f"unknown NDCG variant {variant!r}")

    dcg = sum(discount(i + 1) for i, s in enumerate(ranked.tolist()) if s in truth)
    idcg = sum(discount(i) for i in range(1, min(len(truth), n) + 1))
    return dcg / idcg if idcg > 0 else 0.0


def metric_clicks(ranked, ground_truth, n_reco: int | None = None) -> int:
    truth = ground_truth.songs if isinstance(ground_truth, GroundTruth) else set(ground_truth)
    ranked = np.asarray(ranked).tolist()
    n_reco = len(ranked) if n_reco is None else n_reco
    for r, s in enumerate(ranked[:n_reco], start=1):
        if s in truth:
            return (r - 1) // 10
    return n_reco // 10 + 1


def _normalized_popularity(popularity: np.ndarray) -> np.ndarray:
    lo, hi = float(popularity.min()), float(popularity.max())
    if hi == lo:
        return np.zeros(len(popularity))
    return (popularity - lo) / (hi - lo)


def metric_coverage_popularity(all_ranked_lists, popularity) -> tuple[float, float]:
    """Percent of the catalog recommended at least once; mean min-max popularity over all slots."""
    pop = popularity.popularity if isinstance(popularity, Corpus) else np.asarray(popularity)
    lists = [np.asarray(r, dtype=np.int64) for r in all_ranked_lists]
    if not lists:
        raise ValueError("need at least one ranked list")
    flat = np.concatenate(lists)
    coverage = 100.0 * len(np.unique(flat)) / len(pop)
    popularity_pct = 100.0 * float(_normalized_popularity(pop)[flat].mean()) if len(flat) else 0.0
    return coverage, popularity_pct


# -- protocol -------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    n_seed_values: tuple = tuple(range(1, 11))
    playlists_per_bucket: int | None = None
    n_reco: int = 500
    rng_seed: int = 0
    ndcg_variant: str = "standard"

    def bucket_size(self, n_test: int) -> int:
        if self.playlists_per_bucket is not None:
            return self.playlists_per_bucket
        return max(1, min(1000, n_test // len(self.n_seed_values)))


def assign_buckets(test_ids, config: EvalConfig) -> dict[int, np.ndarray]:
    """Shuffle test playlists and give each n_seed value its own disjoint chunk."""
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    ids = rng.permutation(np.asarray(test_ids))
    size = config.bucket_size(len(ids))
    out = {}
    for j, n_seed in enumerate(config.n_seed_values):
        out[int(n_seed)] = ids[j * size : (j + 1) * size]
    return out


def _ci(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


@dataclass
class EvalReport:
    model: str
    buckets: dict = field(default_factory=dict)  # n_seed -> summary or None when absent
    aggregate: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def rows(self, with_timing: bool = True) -> list[dict]:
        rows = []
        for key, summary in [*self.buckets.items(), ("all", self.aggregate)]:
            if summary is None:
                continue
            row = {"model": self.model, "n_seed": key, "n_playlists": summary["n_playlists"]}
            for m in METRICS:
                row[m] = summary[m]
                row[f"{m}_ci"] = summary[f"{m}_ci"]
            row["coverage"] = summary["coverage"]
            t = self.timing.get(str(key), {})
            row["inference_ms_mean"] = t.get("mean_ms", "") if with_timing else ""
            row["inference_ms_p99"] = t.get("p99_ms", "") if with_timing else ""
            rows.append(row)
        return rows

    def to_csv(self, with_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows(with_timing):
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self, with_timing: bool = True) -> dict:
        d = asdict(self)
        d["buckets"] = {str(k): v for k, v in self.buckets.items()}
        if not with_timing:
            d.pop("timing")
        return d

    def to_json(self, with_timing: bool = True) -> str:
        return json.dumps(self.to_dict(with_timing), indent=2, sort_keys=True) + "\n"

    def series(self) -> list[dict]:
        """Long-format per-n_seed values of every metric."""
        out = []
        for n_seed, summary in self.buckets.items():
            if summary is None:
                continue
            for m in (*METRICS, "coverage"):
                out.append({"model": self.model, "n_seed": n_seed, "metric": m, "value": summary[m],
                            "ci": summary.get(f"{m}_ci", 0.0)})
        return out


def _summarize(per: dict[str, list], lists: list, popularity: np.ndarray) -> dict:
    out = {"n_playlists": len(lists)}
    for m in METRICS:
        v = np.asarray(per[m], dtype=np.float64)
        out[m] = float(v.mean())
        out[f"{m}_ci"] = _ci(v)
    out["coverage"], _ = metric_coverage_popularity(lists, popularity)
    return out


def evaluate_model(recommender: Recommender, corpus: Corpus, test_ids, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Run the masked-continuation protocol on ``test_ids``.

    Popularity-oriented metrics use ``corpus.popularity``, which should be
    counted over the training playlists.
    """
    buckets = assign_buckets(test_ids, config)
    norm_pop = _normalized_popularity(corpus.popularity)
    report = EvalReport(getattr(recommender, "name", type(recommender).__name__), config=asdict(config))
    all_per = {m: [] for m in METRICS}
    all_lists, all_times = [], []
    skipped = 0
    for n_seed, ids in buckets.items():
        per = {m: [] for m in METRICS}
        lists, times = [], []
        for pid in ids:
            songs = corpus.songs_of(int(pid))
            if len(songs) <= n_seed:
                skipped += 1
                continue
            seed, truth = mask_playlist(songs, n_seed, corpus.artist_ids)
            t0 = time.perf_counter()
            ranked = recommender.recommend(seed, config.n_reco).song_ids
            times.append((time.perf_counter() - t0) * 1e3)
            p, r = metric_precision_recall(ranked, truth, config.n_reco)
            per["precision"].append(100 * p)
            per["recall"].append(100 * r)
            per["r_precision"].append(100 * metric_r_precision(ranked, truth.songs, truth.artists, corpus.artist_ids))
            per["ndcg"].append(100 * metric_ndcg(ranked, truth, config.n_reco, config.ndcg_variant))
            per["clicks"].append(metric_clicks(ranked, truth, config.n_reco))
            per["popularity"].append(100 * float(norm_pop[np.asarray(ranked)].mean()))
            lists.append(np.asarray(ranked))
        if not lists:
            report.buckets[n_seed] = None
            continue
        report.buckets[n_seed] = _summarize(per, lists, corpus.popularity)
        report.timing[str(n_seed)] = _timing(times)
        for m in METRICS:
            all_per[m].extend(per[m])
        all_lists.extend(lists)
        all_times.extend(times)
    if not all_lists:
        raise ValueError("no test playlist was eligible for evaluation")
    report.aggregate = _summarize(all_per, all_lists, corpus.popularity)
    report.timing["all"] = _timing(all_times)
    report.diagnostics = {"skipped_short_playlists": skipped}
    return report


def _timing(times) -> dict:
    t = np.asarray(times)
    return {"mean_ms": float(t.mean()), "p50_ms": float(np.percentile(t, 50)), "p99_ms": float(np.percentile(t, 99))}


def write_report(reports, out_dir, figures: bool = True, with_timing: bool = True) -> dict[str, Path]:
    """Write ``report.json``, ``report.csv``, ``series.csv`` and (optionally) ``series.png``.

    ``reports`` is one :class:`EvalReport` or a list of them; every file
    holds all models so they can be compared side by side.
    """
    reports = [reports] if isinstance(reports, EvalReport) else list(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "series": out / "series.csv"}
    payload = {"reports": [r.to_dict(with_timing) for r in reports]}
    paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.rows(with_timing):
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    paths["csv"].write_text(buf.getvalue())
    with open(paths["series"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("model", "n_seed", "metric", "value", "ci"), lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.series())
    if figures:
        from .plotting import plot_series

        paths["figure"] = plot_series(reports, out / "series.png")
    return paths


# -- validation protocol used during training --------------------------------------


def validation_protocol(corpus: Corpus, val_ids, rng_seed: int = 0, max_seed: int = 10):
    """Fixed (seed, truth) pairs: n_seed per playlist drawn once from {1..max_seed}."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    draws = rng.integers(1, max_seed + 1, size=len(val_ids))
    pairs = []
    for pid, n_seed in zip(val_ids, draws):
        songs = corpus.songs_of(int(pid))
        if len(songs) < 2:
            continue
        pairs.append(mask_playlist(songs, int(min(n_seed, len(songs) - 1))))
    if not pairs:
        raise ValueError("validation set is empty")
    return pairs


def mean_ndcg(recommender: Recommender, pairs, n_reco: int, variant: str = "standard") -> float:
    vals = [metric_ndcg(recommender.recommend(seed, n_reco).song_ids, truth, n_reco, variant) for seed, truth in pairs]
    return float(np.mean(vals))


# -- baselines --------------------------------------------------------------------------


class _Neighborhood:
    def __init__(self, train_sequences, n_songs: int, popularity=None):
        self.n_songs = n_songs
        self.sets = [np.unique(np.asarray(s, dtype=np.int64)) for s in train_sequences]
        self.sizes = np.array([len(s) for s in self.sets], dtype=np.float64)
        flat = np.concatenate(self.sets) if self.sets else np.zeros(0, np.int64)
        owners = np.repeat(np.arange(len(self.sets)), [len(s) for s in self.sets])
        order = np.argsort(flat, kind="stable")
        self.post_pl = owners[order]
        self.post_ptr = np.zeros(n_songs + 1, dtype=np.int64)
        np.cumsum(np.bincount(flat, minlength=n_songs), out=self.post_ptr[1:])
        pop = np.bincount(flat, minlength=n_songs) if popularity is None else np.asarray(popularity)
        self.popularity = pop
        self.pop_order = np.lexsort((np.arange(n_songs), -pop))

    def overlaps(self, seed_weights: dict[int, float]):
        """Neighbor playlists sharing a seed song, with weighted overlap."""
        pls, ws = [], []
        for s, w in seed_weights.items():
            if 0 <= s < self.n_songs:
                p = self.post_pl[self.post_ptr[s] : self.post_ptr[s + 1]]
                pls.append(p)
                ws.append(np.full(len(p), w))
        if not pls:
            return np.zeros(0, np.int64), np.zeros(0)
        pls = np.concatenate(pls)
        u, inv = np.unique(pls, return_inverse=True)
        return u, np.bincount(inv, weights=np.concatenate(ws))

    def rank(self, neighbors, sims, k, seed, n_reco, damp=None) -> RankedList:
        top = np.lexsort((neighbors, -sims))[:k]
        neighbors, sims = neighbors[top], sims[top]
        fallback = len(neighbors) == 0
        chosen_ids = np.zeros(0, np.int64)
        chosen_scores = np.zeros(0)
        if not fallback:
            songs = np.concatenate([self.sets[q] for q in neighbors])
            weights = np.repeat(sims, [len(self.sets[q]) for q in neighbors])
            u, inv = np.unique(songs, return_inverse=True)
            score = np.bincount(inv, weights=weights)
            if damp is not None:
                score = score / damp(u)
            keep = ~np.isin(u, seed)
            u, score = u[keep], score[keep]
            order = np.lexsort((u, -score))[:n_reco]
            chosen_ids, chosen_scores = u[order], score[order]
        if len(chosen_ids) < n_reco:
            # fill remaining slots by training popularity
            taken = np.concatenate([chosen_ids, np.asarray(seed, np.int64)])
            rest = self.pop_order[~np.isin(self.pop_order, taken)][: n_reco - len(chosen_ids)]
            chosen_ids = np.concatenate([chosen_ids, rest])
            chosen_scores = np.concatenate([chosen_scores, np.zeros(len(rest))])
        return RankedList(chosen_ids, chosen_scores, fallback=fallback)


class SknnRecommender:
    """Session kNN: cosine over binary song incidence, neighbor-similarity voting."""

    name = "sknn"

    def __init__(self, train_sequences, n_songs: int, k_neighbors: int = 100, popularity=None):
        if k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        self.k = k_neighbors
        self.nb = _Neighborhood(train_sequences, n_songs, popularity)

    def recommend(self, seed, n_reco: int) -> RankedList:
        seed_set = np.unique(np.asarray(seed, dtype=np.int64))
        neighbors, overlap = self.nb.overlaps({int(s): 1.0 for s in seed_set})
        sims = overlap / np.sqrt(len(seed_set) * self.nb.sizes[neighbors])
        return self.nb.rank(neighbors, sims, self.k, seed_set, n_reco)


class VsknnRecommender:
    """Session kNN with linearly increasing seed-position weights and a log-popularity damp."""

    name = "vsknn"

    def __init__(self, train_sequences, n_songs: int, k_neighbors: int = 100, popularity=None):
        if k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        self.k = k_neighbors
        self.nb = _Neighborhood(train_sequences, n_songs, popularity)

    def recommend(self, seed, n_reco: int) -> RankedList:
        seq = [int(s) for s in seed]
        weights = {}
        for i, s in enumerate(seq, start=1):
            weights[s] = i / len(seq)  # the latest occurrence of a repeated song wins
        seed_set = np.unique(np.asarray(seq, dtype=np.int64))
        neighbors, overlap = self.nb.overlaps(weights)
        sims = overlap / np.sqrt(len(seed_set) * self.nb.sizes[neighbors])
        pop = self.nb.popularity
        return self.nb.rank(neighbors, sims, self.k, seed_set, n_reco,
                            damp=lambda u: np.log1p(np.maximum(pop[u], 1)))


def sknn_recommend(seed_songs, train_playlists, k_neighbors: int, n_reco: int, n_songs: int | None = None) -> RankedList:
    n_songs = n_songs or int(max(max(p) for p in train_playlists)) + 1
    return SknnRecommender(train_playlists, n_songs, k_neighbors).recommend(seed_songs, n_reco)


def vsknn_recommend(seed_songs, train_playlists, k_neighbors: int, n_reco: int, n_songs: int | None = None) -> RankedList:
    n_songs = n_songs or int(max(max(p) for p in train_playlists)) + 1
    return VsknnRecommender(train_playlists, n_songs, k_neighbors).recommend(seed_songs, n_reco)


class RandomRecommender:
    name = "random"

    def __init__(self, n_songs: int, seed: int = 0):
        self.n_songs = n_songs
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def recommend(self, seed, n_reco: int) -> RankedList:
        pool = np.setdiff1d(np.arange(self.n_songs), np.asarray(seed))
        ids = self.rng.choice(pool, size=n_reco, replace=False)
        return RankedList(ids, np.zeros(n_reco))
