"""HTTP continuation endpoint over an immutable, hash-checked engine."""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import ArtifactError, load_catalog, sha256_file
from .rank import RankRequest, Scratch, continue_playlist
from .train import Checkpoint

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.rtak"
CATALOG_FILE = "catalog.rtap"
SONGS_FILE = "songs.txt"


class ServeError(Exception):
    """Request failure carrying an HTTP status and a machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message

    def body(self) -> dict:
        return {"error": {"code": self.code, "message": self.message}}


@dataclass(frozen=True)
class ServeConfig:
    artifact_dir: str
    bind_address: str = "127.0.0.1:8000"
    worker_threads: int = 1
    default_n_reco: int = 100
    max_seed_len: int | None = None
    shards: int = 1

    def __post_init__(self):
        if self.worker_threads < 1 or self.shards < 1:
            raise ValueError("worker_threads and shards must be >= 1")
        if self.default_n_reco < 1:
            raise ValueError("default_n_reco must be >= 1")
        host, _, port = self.bind_address.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bind_address must look like host:port, got {self.bind_address!r}")

    @property
    def host(self) -> str:
        return self.bind_address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rpartition(":")[2])


@dataclass
class ContinuationResponse:
    recommendations: list
    scores: list | None
    latency_ms: dict
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"recommendations": self.recommendations, "latency_ms": self.latency_ms, "warnings": self.warnings}
        if self.scores is not None:
            out["scores"] = self.scores
        return out


class Engine:
    """Loaded model, memory-resident catalog and per-thread scoring scratch. Read-only after construction."""

    def __init__(self, model, catalog: np.ndarray, song_uris: list[str], name: str, checkpoint_hash: str,
                 max_seed_len: int, shards: int = 1):
        self.model = model
        self.aggregator = model.aggregator
        self.catalog = catalog
        self.song_uris = song_uris
        self.uri_to_id = {u: i for i, u in enumerate(song_uris)}
        self.name = name
        self.checkpoint_hash = checkpoint_hash
        self.max_seed_len = max_seed_len
        self.shards = shards
        self.pool = ThreadPoolExecutor(shards) if shards > 1 else None
        self._local = threading.local()

    @property
    def catalog_size(self) -> int:
        return self.catalog.shape[0]

    def scratch(self) -> Scratch:
        s = getattr(self._local, "scratch", None)
        if s is None:
            s = self._local.scratch = Scratch(self.catalog_size)
        return s

    def resolve(self, seed_tracks) -> tuple[list[int], list[str]]:
        """Map external URIs or integer ids to song ids; unknown entries become warnings."""
        ids, warnings = [], []
        for t in seed_tracks:
            sid = self.uri_to_id.get(t) if isinstance(t, str) else None
            if sid is None:
                try:
                    cand = int(t)
                except (TypeError, ValueError):
                    cand = -1
                if isinstance(t, bool) or not 0 <= cand < self.catalog_size:
                    warnings.append(f"unknown seed track {t!r} dropped")
                    continue
                sid = cand
            ids.append(sid)
        return ids, warnings

    def continue_ids(self, seed_ids, n_reco: int):
        req = RankRequest(tuple(seed_ids), n_reco)
        return continue_playlist(req, self.aggregator, self.catalog, self.scratch(), self.pool, self.shards)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(wait=True)


def load_engine(config: ServeConfig) -> Engine:
    """Load artifacts, refuse a catalog built from another checkpoint, run a warm-up request."""
    root = Path(config.artifact_dir)
    ck_path, cat_path, songs_path = root / CHECKPOINT_FILE, root / CATALOG_FILE, root / SONGS_FILE
    for p in (ck_path, cat_path):
        if not p.is_file():
            raise ArtifactError(p, "missing artifact")
    ck_hash = sha256_file(ck_path)
    catalog, recorded = load_catalog(cat_path)
    if recorded != ck_hash:
        raise ArtifactError(cat_path, f"catalog was built from checkpoint {recorded[:12]}, not {ck_hash[:12]}; re-run precompute")
    try:
        ck = Checkpoint.load(ck_path)
    except ValueError as exc:
        raise ArtifactError(ck_path, str(exc)) from exc
    model = ck.build_model()
    for p in model.parameters():
        p.requires_grad_(False)
    if catalog.shape[1] != model.dim:
        raise ArtifactError(cat_path, f"catalog dimension {catalog.shape[1]} != model dimension {model.dim}")
    if songs_path.is_file():
        uris = songs_path.read_text().splitlines()
        if len(uris) != catalog.shape[0]:
            raise ArtifactError(songs_path, f"{len(uris)} song ids for {catalog.shape[0]} catalog rows")
    else:
        uris = [str(i) for i in range(catalog.shape[0])]
    max_len = model.aggregator.max_len
    seed_len = min(config.max_seed_len or max_len, max_len)
    engine = Engine(model, catalog, uris, ck.model_config.get("name", "rta"), ck_hash, seed_len, config.shards)
    engine.continue_ids([0], min(config.default_n_reco, engine.catalog_size - 1))
    log.info("engine ready: %s, %d songs", engine.name, engine.catalog_size)
    return engine


def handle_continuation(engine: Engine | None, request: dict, default_n_reco: int = 100) -> ContinuationResponse:
    if engine is None:
        raise ServeError(503, "engine_not_loaded", "no engine is loaded")
    if not isinstance(request, dict) or not isinstance(request.get("seed_tracks"), list):
        raise ServeError(422, "bad_request", "body must be an object with a 'seed_tracks' list")
    n_reco = request.get("n_reco", default_n_reco)
    if n_reco is None:
        n_reco = default_n_reco
    if isinstance(n_reco, bool) or not isinstance(n_reco, int) or n_reco < 1:
        raise ServeError(422, "bad_request", "n_reco must be a positive integer")
    ids, warnings = engine.resolve(request["seed_tracks"])
    if not ids:
        raise ServeError(400, "unknown_seed", "none of the seed tracks is in the catalog")
    if len(ids) > engine.max_seed_len:
        warnings.append(f"seed truncated to its last {engine.max_seed_len} tracks")
        ids = ids[-engine.max_seed_len :]
    available = engine.catalog_size - len(set(ids))
    if n_reco > available:
        warnings.append(f"n_reco reduced to {available}: catalog exhausted")
        n_reco = available
    if n_reco < 1:
        raise ServeError(400, "catalog_exhausted", "the seed covers the whole catalog")
    out = engine.continue_ids(ids, n_reco)
    return ContinuationResponse(
        recommendations=[engine.song_uris[i] for i in out.song_ids],
        scores=[float(s) for s in out.scores],
        latency_ms={"embed": out.timings["embed_ms"], "score": out.timings["score_ms"]},
        warnings=warnings,
    )


class EngineSlot:
    """Atomic reference to the live engine; a reload builds a new engine and swaps it in."""

    def __init__(self, config: ServeConfig, engine: Engine | None = None):
        self.config = config
        self.engine = engine
        self._reloading = threading.Lock()

    def reload(self) -> Engine:
        if not self._reloading.acquire(blocking=False):
            raise ServeError(409, "reload_in_progress", "a reload is already running")
        try:
            new = load_engine(self.config)
            old, self.engine = self.engine, new
            # in-flight requests keep their own reference to the old engine
            if old is not None and old.pool is not None:
                threading.Thread(target=old.close, daemon=True).start()
            return new
        finally:
            self._reloading.release()

    @property
    def reloading(self) -> bool:
        return self._reloading.locked()


def create_app(config: ServeConfig, engine: Engine | None = None, load: bool = True):
    from contextlib import asynccontextmanager

    import anyio.to_thread
    from fastapi import Body, FastAPI
    from fastapi.responses import JSONResponse

    slot = EngineSlot(config, engine)

    @asynccontextmanager
    async def lifespan(app):
        anyio.to_thread.current_default_thread_limiter().total_tokens = config.worker_threads
        if slot.engine is None and load:
            await anyio.to_thread.run_sync(slot.reload)
        yield

    app = FastAPI(title="rta", lifespan=lifespan)
    app.state.slot = slot

    def error(exc: ServeError):
        return JSONResponse(exc.body(), status_code=exc.status)

    @app.post("/v1/continue")
    def continue_route(body: dict = Body(...)):
        t0 = time.perf_counter()
        try:
            with torch.inference_mode():
                resp = handle_continuation(slot.engine, body, config.default_n_reco)
        except ServeError as exc:
            return error(exc)
        out = resp.to_dict()
        out["latency_ms"]["total"] = (time.perf_counter() - t0) * 1e3
        return out

    @app.get("/v1/health")
    def health():
        eng = slot.engine
        if eng is None:
            return error(ServeError(503, "engine_not_loaded", "no engine is loaded"))
        return {"status": "ok", "catalog_size": eng.catalog_size, "model": eng.name}

    @app.post("/v1/reload")
    def reload():
        try:
            eng = slot.reload()
        except ServeError as exc:
            return error(exc)
        except (ArtifactError, OSError) as exc:
            return error(ServeError(500, "reload_failed", str(exc)))
        return {"status": "ok", "catalog_size": eng.catalog_size, "model": eng.name, "checkpoint": eng.checkpoint_hash}

    return app


def run_server(config: ServeConfig) -> None:
    import uvicorn

    engine = load_engine(config)
    uvicorn.run(create_app(config, engine), host=config.host, port=config.port, log_level="info")
