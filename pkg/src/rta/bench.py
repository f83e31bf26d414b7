"""Latency harness for online continuation over a large synthetic catalog."""
from __future__ import annotations

import json
import os
import platform
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .aggregate import build_aggregator
from .rank import RankRequest, Scratch, continue_playlist


@dataclass
class BenchConfig:
    n_rows: int = 2_000_000
    dim: int = 128
    n_requests: int = 1000
    seed_len: int = 10
    n_reco: int = 500
    aggregator: str = "transformer"
    workers: tuple = (1, 8)
    budget_ms: dict = field(default_factory=lambda: {"1": 100.0, "8": 25.0})
    alloc_probe_requests: int = 20
    rng_seed: int = 0


@dataclass
class BenchResult:
    config: dict
    modes: dict
    alloc_peak_bytes: int
    catalog_bytes: int
    host: dict

    def passed(self, workers) -> bool:
        m = self.modes[str(workers)]
        return m["p99_ms"] <= m["budget_ms"]

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_catalog(n_rows: int, dim: int, rng_seed: int = 0) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(rng_seed))
    out = np.empty((n_rows, dim), dtype=np.float32)
    step = 1 << 18
    for a in range(0, n_rows, step):
        out[a : a + step] = gen.standard_normal((min(step, n_rows - a), dim), dtype=np.float32)
    out *= np.float32(1.0 / np.sqrt(dim))
    return out


def _run(requests, aggregator, catalog, workers: int):
    scratch = Scratch(len(catalog))
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    lat = np.empty(len(requests))
    try:
        for i, req in enumerate(requests):
            out = continue_playlist(req, aggregator, catalog, scratch, pool, shards=workers)
            lat[i] = out.timings["embed_ms"] + out.timings["score_ms"]
    finally:
        if pool is not None:
            pool.shutdown()
    return lat


def run_benchmark(config: BenchConfig, catalog: np.ndarray | None = None, aggregator=None) -> tuple[BenchResult, dict]:
    """Sequential requests per worker mode; returns the summary and raw per-request latencies."""
    rng = nx.Rng(config.rng_seed)
    if catalog is None:
        catalog = synthetic_catalog(config.n_rows, config.dim, config.rng_seed)
    n, dim = catalog.shape
    if aggregator is None:
        aggregator = build_aggregator(config.aggregator, dim, max(config.seed_len, 1), rng.child(1)).eval()
    gen = rng.child(2).gen
    requests = [
        RankRequest(tuple(int(s) for s in gen.choice(n, config.seed_len, replace=False)), config.n_reco)
        for _ in range(config.n_requests)
    ]
    samples, modes = {}, {}
    with torch.inference_mode():
        _run(requests[:10], aggregator, catalog, 1)
        for w in config.workers:
            lat = _run(requests, aggregator, catalog, int(w))
            samples[str(w)] = lat.tolist()
            modes[str(w)] = {
                "workers": int(w),
                "p50_ms": float(np.percentile(lat, 50)),
                "p99_ms": float(np.percentile(lat, 99)),
                "mean_ms": float(lat.mean()),
                "max_ms": float(lat.max()),
                "budget_ms": float(config.budget_ms.get(str(w), float("inf"))),
            }
        # allocation probe: per-request peak with buffers already allocated
        scratch = Scratch(n)
        peak = 0
        tracemalloc.start()
        try:
            for req in requests[: config.alloc_probe_requests]:
                tracemalloc.reset_peak()
                base = tracemalloc.get_traced_memory()[0]
                continue_playlist(req, aggregator, catalog, scratch)
                peak = max(peak, tracemalloc.get_traced_memory()[1] - base)
        finally:
            tracemalloc.stop()
    host = {"cpu_count": os.cpu_count(), "machine": platform.machine(), "processor": platform.processor(),
            "python": platform.python_version(), "torch_threads": torch.get_num_threads()}
    cfg = asdict(config)
    cfg["workers"] = list(config.workers)
    return BenchResult(cfg, modes, int(peak), int(catalog.nbytes), host), samples


def write_bench(result: BenchResult, samples: dict, out_dir, figure: bool = True) -> dict[str, Path]:
    from .plotting import plot_latency

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "latency.json", "csv": out / "latency.csv"}
    paths["json"].write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["csv"], "w") as fh:
        fh.write("workers,request,latency_ms\n")
        for w, xs in samples.items():
            for i, x in enumerate(xs):
                fh.write(f"{w},{i},{x:.6f}\n")
    if figure:
        paths["png"] = plot_latency({f"{w} worker(s)": xs for w, xs in samples.items()}, out / "latency.png",
                                    {f"{w} worker(s)": m["budget_ms"] for w, m in result.modes.items()})
    return paths
