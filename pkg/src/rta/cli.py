"""``rta`` command line: one declarative YAML config per run plus ``key=value`` overrides.

Every verb writes into a fresh run directory ``<run_root>/<verb>-<timestamp>-<hash>``
holding ``config.resolved.yaml`` and the verb's outputs. Exit status is 0 on
success, 2 on usage or configuration errors, 1 on runtime failures (with a JSON
error object on stderr).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import yaml

VERBS = ("ingest", "wrmf-init", "train", "precompute", "evaluate", "serve", "bench-latency")
SNAPSHOT = "config.resolved.yaml"

log = logging.getLogger("rta")


class UsageError(Exception):
    pass


def _defaults() -> dict:
    from .bench import BenchConfig
    from .init import WrmfConfig
    from .model import ModelConfig
    from .train import TrainConfig

    train = asdict(TrainConfig())
    train["lr0"] = None  # resolved from the model's recommended rate
    bench = asdict(BenchConfig())
    bench["workers"] = list(bench["workers"])
    bench["figure"] = True
    return {
        "run_root": "runs",
        "threads": 1,
        "data": {
            "source": "synthetic",  # synthetic | mpd | corpus
            "path": None,
            "max_len": 250,
            "alpha_pop": None,
            "synthetic": {"n_playlists": 2000, "n_songs": 500, "n_clusters": 20, "seed": 0},
        },
        "split": {"rng_seed": 0, "n_val": 200, "n_test": 200, "min_len": 20},
        "wrmf": asdict(WrmfConfig(D=32)),
        "embeddings": None,
        "model": asdict(ModelConfig()),
        "train": train,
        "checkpoint": None,
        "eval": {
            "n_reco": 500,
            "n_seed_values": list(range(1, 11)),
            "playlists_per_bucket": None,
            "rng_seed": 0,
            "ndcg_variant": "standard",
            "baselines": [],
            "init_model": True,  # without a checkpoint, score the untrained initialization
            "k_neighbors": 100,
            "figures": True,
            "with_timing": True,
        },
        "precompute": {"chunk": 4096, "workers": 1},
        "serve": {"artifact_dir": None, "bind_address": "127.0.0.1:8000", "worker_threads": 1,
                  "default_n_reco": 100, "max_seed_len": None, "shards": 1},
        "bench": bench,
    }


# -- config handling ---------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in out:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("synthetic", "budget_ms"):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def _override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node and parts[-2:-1] not in (["synthetic"], ["budget_ms"]):
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    cfg = _defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for item in overrides:
        _override(cfg, item)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:10]


def make_run_dir(cfg: dict, verb: str, explicit=None) -> Path:
    if explicit is not None:
        run = Path(explicit)
    else:
        stamp = time.strftime("%Y%m%dT%H%M%S")
        run = Path(cfg["run_root"]) / f"{verb}-{stamp}-{config_hash(cfg)}"
        n = 1
        while run.exists():
            n += 1
            run = Path(cfg["run_root"]) / f"{verb}-{stamp}-{config_hash(cfg)}-{n}"
    run.mkdir(parents=True, exist_ok=True)
    snap = {"verb": verb, **cfg}
    (run / SNAPSHOT).write_text(yaml.safe_dump(snap, sort_keys=True))
    return run


# -- shared steps ------------------------------------------------------------------------


def _corpus(cfg: dict):
    from .corpus import load_corpus, load_mpd_slices
    from .synthetic import clustered_corpus

    d = cfg["data"]
    src = d["source"]
    if src == "synthetic":
        corpus, _ = clustered_corpus(**d["synthetic"])
        return corpus
    if d["path"] is None:
        raise UsageError(f"data.path is required for data.source={src}")
    if src == "mpd":
        return load_mpd_slices(d["path"], max_len=d["max_len"], alpha_pop=d["alpha_pop"])
    if src == "corpus":
        return load_corpus(d["path"])
    raise UsageError(f"data.source must be synthetic, mpd or corpus, not {src!r}")


def _split(cfg: dict, corpus):
    """Train/val/test ids and a corpus whose popularity is counted on train only."""
    from .corpus import SplitSpec, split_dataset

    train, val, test = split_dataset(corpus, SplitSpec(**cfg["split"]))
    return corpus.with_popularity_from(train, cfg["data"]["alpha_pop"]), train, val, test


def _wrmf_config(cfg):
    from .init import WrmfConfig

    return WrmfConfig(**cfg["wrmf"])


def _store(cfg: dict, corpus, train_ids, history=None):
    from .init import EmbeddingStore, build_store

    if cfg["embeddings"]:
        return EmbeddingStore.load(cfg["embeddings"])
    return build_store(corpus, train_ids, _wrmf_config(cfg), history=history)


def _resolve_lr(cfg: dict) -> None:
    from .model import RECOMMENDED_LR

    if cfg["train"]["lr0"] is None:
        cfg["train"]["lr0"] = RECOMMENDED_LR[cfg["model"]["name"]]


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- verbs ---------------------------------------------------------------------------------


def cmd_ingest(cfg, run: Path, args) -> dict:
    from .corpus import save_corpus

    corpus = _corpus(cfg)
    _, train, val, test = _split(cfg, corpus)
    save_corpus(corpus, run / "corpus.rtac", rng_seed=cfg["split"]["rng_seed"])
    _write_json(run / "split.json", {"train": train.tolist(), "val": val.tolist(), "test": test.tolist()})
    _write_json(run / "diagnostics.json", {"n_songs": corpus.n_songs, "n_playlists": corpus.n_playlists,
                                           **dict(corpus.diagnostics)})
    return {"corpus": str(run / "corpus.rtac"), "n_songs": corpus.n_songs, "n_playlists": corpus.n_playlists}


def cmd_wrmf_init(cfg, run: Path, args) -> dict:
    from .init import build_store

    corpus, train, _, _ = _split(cfg, _corpus(cfg))
    history: list = []
    store = build_store(corpus, train, _wrmf_config(cfg), history=history)
    store.save(run / "embeddings.rtae")
    _write_json(run / "wrmf_objective.json", {"objective": [float(x) for x in history]})
    return {"embeddings": str(run / "embeddings.rtae"), "sweeps": len(history)}


def cmd_train(cfg, run: Path, args) -> dict:
    from .model import ModelConfig, build_model
    from .train import Checkpoint, TrainConfig, fit

    corpus, train, val, _ = _split(cfg, _corpus(cfg))
    store = _store(cfg, corpus, train)
    model = build_model(ModelConfig.from_dict(cfg["model"]), store, corpus.metadata())
    resume = None
    if args.resume:
        state = run / "state.rtak"
        if not state.is_file():
            raise FileNotFoundError(f"nothing to resume: {state} does not exist")
        resume = Checkpoint.load(state)
    best = fit(model, corpus, train, val, TrainConfig.from_dict(cfg["train"]), run_dir=run, resume=resume)
    best.save(run / "best.rtak")
    return {"checkpoint": str(run / "best.rtak"), "best_epoch": best.best_epoch,
            "best_val_ndcg": best.best_val_ndcg, "epochs": len(best.history) - 1}


def cmd_precompute(cfg, run: Path, args) -> dict:
    from .formats import sha256_file
    from .represent import precompute_catalog, save_catalog
    from .serve import CATALOG_FILE, CHECKPOINT_FILE, SONGS_FILE
    from .train import Checkpoint

    if not cfg["checkpoint"]:
        raise UsageError("precompute needs checkpoint=<path to a .rtak file>")
    src = Path(cfg["checkpoint"])
    model = Checkpoint.load(src).build_model()
    shutil.copyfile(src, run / CHECKPOINT_FILE)
    digest = sha256_file(run / CHECKPOINT_FILE)
    matrix = precompute_catalog(model.representer, **cfg["precompute"])
    save_catalog(matrix, run / CATALOG_FILE, digest)
    corpus = _corpus(cfg)
    if corpus.n_songs != matrix.shape[0]:
        raise ValueError(f"corpus has {corpus.n_songs} songs but the model has {matrix.shape[0]}")
    (run / SONGS_FILE).write_text("\n".join(corpus.song_uris) + "\n")
    return {"artifact_dir": str(run), "rows": int(matrix.shape[0]), "dim": int(matrix.shape[1]), "checkpoint_sha256": digest}


def _recommenders(cfg, corpus, train):
    from .evalsuite import RandomRecommender, SknnRecommender, VsknnRecommender
    from .model import ModelConfig, build_model
    from .rank import RtaRecommender
    from .represent import precompute_catalog
    from .train import Checkpoint

    out = []
    if cfg["checkpoint"]:
        model = Checkpoint.load(cfg["checkpoint"]).build_model()
        out.append(RtaRecommender(model, precompute_catalog(model.representer), name=model.config.name))
    elif cfg["eval"]["init_model"]:
        store = _store(cfg, corpus, train)
        model = build_model(ModelConfig.from_dict(cfg["model"]), store, corpus.metadata()).eval()
        out.append(RtaRecommender(model, precompute_catalog(model.representer), name=f"{model.config.name}-init"))
    seqs = corpus.sequences(train)
    k = cfg["eval"]["k_neighbors"]
    for b in cfg["eval"]["baselines"]:
        if b == "sknn":
            out.append(SknnRecommender(seqs, corpus.n_songs, k, corpus.popularity))
        elif b == "vsknn":
            out.append(VsknnRecommender(seqs, corpus.n_songs, k, corpus.popularity))
        elif b == "random":
            out.append(RandomRecommender(corpus.n_songs, cfg["eval"]["rng_seed"]))
        else:
            raise UsageError(f"unknown baseline {b!r}; choose from sknn, vsknn, random")
    return out


def cmd_evaluate(cfg, run: Path, args) -> dict:
    from .evalsuite import EvalConfig, evaluate_model, write_report

    corpus, train, _, test = _split(cfg, _corpus(cfg))
    e = cfg["eval"]
    ec = EvalConfig(tuple(e["n_seed_values"]), e["playlists_per_bucket"], e["n_reco"], e["rng_seed"], e["ndcg_variant"])
    reports = [evaluate_model(r, corpus, test, ec) for r in _recommenders(cfg, corpus, train)]
    paths = write_report(reports, run, figures=e["figures"], with_timing=e["with_timing"])
    summary = {r.model: {m: r.aggregate[m] for m in ("precision", "recall", "r_precision", "ndcg", "clicks")} for r in reports}
    return {"reports": {k: str(v) for k, v in paths.items()}, "aggregate": summary}


def cmd_serve(cfg, run: Path, args) -> dict:
    from .serve import ServeConfig, run_server

    if not cfg["serve"]["artifact_dir"]:
        raise UsageError("serve needs serve.artifact_dir=<precompute run directory>")
    run_server(ServeConfig(**cfg["serve"]))
    return {}


def cmd_bench_latency(cfg, run: Path, args) -> dict:
    from .bench import BenchConfig, run_benchmark, write_bench

    b = dict(cfg["bench"])
    figure = b.pop("figure")
    b["workers"] = tuple(b["workers"])
    b["budget_ms"] = {str(k): float(v) for k, v in b["budget_ms"].items()}
    result, samples = run_benchmark(BenchConfig(**b))
    paths = write_bench(result, samples, run, figure=figure)
    return {"files": {k: str(v) for k, v in paths.items()}, "modes": result.modes,
            "alloc_peak_bytes": result.alloc_peak_bytes, "catalog_bytes": result.catalog_bytes,
            "passed": {w: result.passed(w) for w in result.modes}}


COMMANDS = {
    "ingest": cmd_ingest,
    "wrmf-init": cmd_wrmf_init,
    "train": cmd_train,
    "precompute": cmd_precompute,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
    "bench-latency": cmd_bench_latency,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rta", description="Represent-then-aggregate playlist continuation.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("-c", "--config", help="YAML config file")
    ap.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. model.name=mf-gru")
    ap.add_argument("--run-dir", help="write outputs here instead of a fresh timestamped directory")
    ap.add_argument("--resume", metavar="RUN_DIR", help="train: continue the run in RUN_DIR from its last state")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.resume and args.verb != "train":
            raise UsageError("--resume only applies to train")
        if args.config is None and not args.resume:
            raise UsageError("a config file is required (-c/--config)")
        if args.resume:
            snap = Path(args.resume) / SNAPSHOT
            if not snap.is_file():
                raise UsageError(f"cannot resume: {snap} not found")
            base = yaml.safe_load(snap.read_text())
            base.pop("verb", None)
            cfg = _merge(_defaults(), base)
            for item in args.overrides:
                _override(cfg, item)
        else:
            cfg = load_config(args.config, args.overrides)
        if args.verb in ("train", "evaluate"):
            _resolve_lr(cfg)
    except UsageError as exc:
        print(f"rta: error: {exc}", file=sys.stderr)
        return 2

    try:
        import torch

        torch.set_num_threads(int(cfg["threads"]))
        run = make_run_dir(cfg, args.verb, args.resume or args.run_dir)
        out = COMMANDS[args.verb](cfg, run, args)
    except UsageError as exc:
        print(f"rta: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as structured JSON
        log.debug("failure", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "verb": args.verb}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"verb": args.verb, "run_dir": str(run), **out}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
