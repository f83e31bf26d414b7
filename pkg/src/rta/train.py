"""Joint training of phi and g with prefix expansion and sampled negatives.

For a playlist of length l, every prefix p[:i] (i = 1..l-1) should score its
next song high and the sampled negatives low:

    L(p) = -sum_i log sigma(f(p[:i], s_{i+1})) - sum_i sum_{s-} log(1 - sigma(f(p[:i], s-)))

All prefixes come out of a single causal pass of the aggregator.
"""
from __future__ import annotations

import copy
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import numerics as nx
from .corpus import ConfigError, Corpus
from .formats import atomic_write
from .model import ModelConfig, RtaModel, build_model, skeleton_store
from .rank import RtaRecommender

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message, playlist_id=None, step=None):
        super().__init__(message)
        self.playlist_id = playlist_id
        self.step = step


@dataclass
class TrainConfig:
    batch_playlists: int = 128
    n_negatives: int = 100
    lr0: float = 0.05
    weight_decay: float = 1e-6
    max_epochs: int = 20
    patience: int = 2
    rng_seed: int = 0
    val_n_reco: int = 500
    val_rng_seed: int = 0
    val_max_seed: int = 10
    ndcg_variant: str = "standard"
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.batch_playlists < 1:
            raise ConfigError("batch_playlists must be >= 1")
        if self.n_negatives < 1:
            raise ConfigError("n_negatives must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- loss --------------------------------------------------------------------------


def _pad(sequences, fill=0):
    t = max(len(s) for s in sequences)
    out = np.full((len(sequences), t), fill, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out


def batch_losses(model: RtaModel, sequences, negatives) -> torch.Tensor:
    """Per-playlist loss L(p) for a batch; each playlist needs length >= 2."""
    lengths = np.array([len(s) for s in sequences])
    if lengths.min() < 2:
        raise ValueError("every playlist in a batch needs at least two songs")
    songs = _pad(sequences)
    negs = np.stack([np.asarray(n, dtype=np.int64) for n in negatives])
    uniq, inv = np.unique(np.concatenate([songs.ravel(), negs.ravel()]), return_inverse=True)
    h = model.representer(torch.from_numpy(uniq))
    x = h[torch.from_numpy(inv[: songs.size].reshape(songs.shape))]
    hn = h[torch.from_numpy(inv[songs.size :].reshape(negs.shape))]
    prefix = model.aggregator.prefix_states(x)[:, :-1]  # prefix i predicts song i + 1
    valid = torch.from_numpy(np.arange(songs.shape[1] - 1)[None, :] < (lengths[:, None] - 1)).to(h.dtype)
    pos = (prefix * x[:, 1:]).sum(-1)
    neg = torch.bmm(prefix, hn.transpose(1, 2))
    l_pos = -(F.logsigmoid(pos) * valid).sum(1)
    l_neg = -(F.logsigmoid(-neg) * valid[..., None]).sum((1, 2))
    return l_pos + l_neg


def playlist_loss(playlist, model: RtaModel, negatives) -> torch.Tensor:
    return batch_losses(model, [np.asarray(playlist)], [np.asarray(negatives)])[0]


# -- epochs ------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    seconds: float
    n_playlists: int
    steps: int


def train_epoch(model: RtaModel, playlists, config: TrainConfig, rng: nx.Rng, lr: float, epoch: int = 1) -> EpochStats:
    """One pass over ``playlists`` (pairs of ``(playlist_id, songs)``) in shuffled batches."""
    t0 = time.perf_counter()
    usable = [(pid, np.asarray(s, dtype=np.int64)) for pid, s in playlists if len(s) >= 2]
    if not usable:
        raise ConfigError("no training playlist has two or more songs")
    order = rng.permutation(len(usable))
    params = nx.parameters_of(model)
    n_songs = model.n_songs
    model.train()
    nx.attach_dropout_rng(model, rng)
    total, steps = 0.0, 0
    try:
        for start in range(0, len(order), config.batch_playlists):
            batch = [usable[i] for i in order[start : start + config.batch_playlists]]
            seqs = [s for _, s in batch]
            negs = [nx.sample_negatives(n_songs, s, config.n_negatives, rng) for s in seqs]
            for s, n in zip(seqs, negs):
                assert not np.intersect1d(s, n).size, "negative sample drawn from its own playlist"
            losses = batch_losses(model, seqs, negs)
            if not torch.isfinite(losses).all():
                bad = int(torch.nonzero(~torch.isfinite(losses))[0, 0])
                raise TrainingError(f"non-finite loss for playlist {batch[bad][0]} at step {steps}",
                                    playlist_id=batch[bad][0], step=steps)
            loss = losses.mean()
            grads = torch.autograd.grad(loss, [p.tensor for p in params], allow_unused=True)
            grads = {p.name: (torch.zeros_like(p.tensor) if g is None else g) for p, g in zip(params, grads)}
            if config.clip_norm is not None:
                nx.clip_global_norm(grads, config.clip_norm)
            nx.sgd_step(params, grads, lr, config.weight_decay)
            total += float(losses.detach().sum())
            steps += 1
    finally:
        nx.attach_dropout_rng(model, None)
        model.eval()
    return EpochStats(epoch, total / len(usable), lr, time.perf_counter() - t0, len(usable), steps)


# -- checkpoints ---------------------------------------------------------------------

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {"float32": 0, "int64": 1, "bool": 2}


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        code = _CODES[str(a.dtype)]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes, pos: int, path) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        if pos + size * dt.itemsize > len(buf):
            raise ValueError(f"{path}: truncated tensor {name}")
        a = np.frombuffer(buf, dt, size, pos).reshape(shape).copy()
        out[name] = a.astype(bool) if code == 2 else a
        pos += size * dt.itemsize
    return out, pos


def _state_arrays(model: RtaModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict
    epoch: int = 0
    lr: float = 0.0
    best_val_ndcg: float = float("-inf")
    best_epoch: int = 0
    bad_epochs: int = 0
    rng_state: dict | None = None
    best_tensors: dict | None = None
    history: list = field(default_factory=list)
    train_config: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kinds": list(ModelConfig.from_dict(self.model_config).kinds),
            "model_config": self.model_config,
            "epoch": self.epoch,
            "optimizer": {"name": "sgd", "lr": self.lr, "weight_decay": self.train_config.get("weight_decay", 0.0),
                          "lr0": self.train_config.get("lr0")},
            "best_val_ndcg": self.best_val_ndcg if np.isfinite(self.best_val_ndcg) else None,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "rng_state": self.rng_state,
            "history": self.history,
            "train_config": self.train_config,
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta(), sort_keys=True).encode()
        tensors = dict(self.tensors)
        if self.best_tensors is not None:
            tensors.update({f"best/{k}": v for k, v in self.best_tensors.items()})
        return b"RTAK" + struct.pack("<II", CHECKPOINT_VERSION, len(meta)) + meta + _pack_tensors(tensors)

    def save(self, path) -> Path:
        path = Path(path)
        atomic_write(path, self.to_bytes())
        sidecar = {"model_config": self.model_config, "train_config": self.train_config, "history": self.history,
                   "best_val_ndcg": self.meta()["best_val_ndcg"], "best_epoch": self.best_epoch}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:4] != b"RTAK":
            raise ValueError(f"{path}: not a checkpoint")
        version, n = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(buf[12 : 12 + n])
        tensors, _ = _unpack_tensors(buf, 12 + n, path)
        best = {k[5:]: v for k, v in tensors.items() if k.startswith("best/")} or None
        cur = {k: v for k, v in tensors.items() if not k.startswith("best/")}
        best_ndcg = meta["best_val_ndcg"]
        return cls(
            model_config=meta["model_config"],
            tensors=cur,
            epoch=meta["epoch"],
            lr=meta["optimizer"]["lr"],
            best_val_ndcg=float("-inf") if best_ndcg is None else best_ndcg,
            best_epoch=meta["best_epoch"],
            bad_epochs=meta["bad_epochs"],
            rng_state=meta["rng_state"],
            best_tensors=best,
            history=meta["history"],
            train_config=meta["train_config"],
        )

    def build_model(self) -> RtaModel:
        """Rebuild the model from the checkpoint alone."""
        cfg = ModelConfig.from_dict(self.model_config)
        t = self.tensors
        rep_kind = cfg.kinds[0]
        if rep_kind == "direct":
            n, dim = t["representer.song"].shape
            rows = {"artist": 1, "album": 1, "dur": 1, "pop": 1}
        else:
            n = t["representer.meta_ids"].shape[0]
            dim = t["representer.tables.artist"].shape[1]
            rows = {f: t[f"representer.tables.{f}"].shape[0] for f in ("artist", "album", "dur", "pop")}
        store = skeleton_store(n, dim, rows)
        meta = {f: np.zeros(n, dtype=np.int64) for f in ("artist", "album", "dur", "pop")}
        model = build_model(cfg, store, meta)
        model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in t.items()})
        model.eval()
        return model


# -- fit -----------------------------------------------------------------------------


def fit(
    model: RtaModel,
    corpus: Corpus,
    train_ids,
    val_ids,
    config: TrainConfig,
    run_dir=None,
    resume: Checkpoint | None = None,
    on_epoch_end: Callable[[EpochStats, float], None] | None = None,
) -> Checkpoint:
    """Train with per-epoch learning-rate halving and early stopping on validation NDCG.

    When ``run_dir`` is set, ``state.rtak`` (resumable), ``best.rtak`` and
    ``train_log.jsonl`` are written there after every epoch.
    """
    from .evalsuite import mean_ndcg, validation_protocol
    from .represent import precompute_catalog

    if len(val_ids) == 0:
        raise ConfigError("validation set is empty")
    if config.val_n_reco > corpus.n_songs - config.val_max_seed:
        raise ConfigError(f"val_n_reco={config.val_n_reco} is infeasible for a catalog of {corpus.n_songs} songs")
    pairs = validation_protocol(corpus, val_ids, config.val_rng_seed, config.val_max_seed)
    playlists = [(int(p), corpus.songs_of(int(p))) for p in train_ids]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    def validate() -> float:
        model.eval()
        rec = RtaRecommender(model, precompute_catalog(model.representer))
        return mean_ndcg(rec, pairs, config.val_n_reco, config.ndcg_variant)

    model_cfg = model.config.to_dict() if model.config is not None else {}
    train_cfg = asdict(config)
    if resume is not None:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in resume.tensors.items()})
        rng = nx.Rng.from_state(resume.rng_state)
        state = resume
        state.train_config = train_cfg
        best_arrays = resume.best_tensors
    else:
        rng = nx.Rng(config.rng_seed)
        state = Checkpoint(model_cfg, {}, lr=config.lr0, train_config=train_cfg)
        state.history.append({"epoch": 0, "mean_loss": None, "val_ndcg": validate(), "lr": None})
        best_arrays = None

    while state.epoch < config.max_epochs and state.bad_epochs < config.patience:
        epoch = state.epoch + 1
        lr = config.lr0 / 2 ** (epoch - 1)
        stats = train_epoch(model, playlists, config, rng, lr, epoch)
        ndcg = validate()
        if ndcg > state.best_val_ndcg:
            state.best_val_ndcg, state.best_epoch, state.bad_epochs = ndcg, epoch, 0
            best_arrays = _state_arrays(model)
        else:
            state.bad_epochs += 1
        state.epoch = epoch
        state.lr = lr / 2
        state.history.append({"epoch": epoch, "mean_loss": stats.mean_loss, "val_ndcg": ndcg, "lr": lr})
        state.tensors = _state_arrays(model)
        state.best_tensors = best_arrays
        state.rng_state = rng.state()
        _logger.info("epoch %d loss %.4f val_ndcg %.4f lr %.4g", epoch, stats.mean_loss, ndcg, lr)
        if run_dir is not None:
            with open(run_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "mean_loss": stats.mean_loss, "val_ndcg": ndcg, "lr": lr,
                                     "wall_seconds": stats.seconds}) + "\n")
            state.save(run_dir / "state.rtak")
            _best_checkpoint(state).save(run_dir / "best.rtak")
        if on_epoch_end is not None:
            on_epoch_end(stats, ndcg)

    best = _best_checkpoint(state)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in best.tensors.items()})
    model.eval()
    return best


def _best_checkpoint(state: Checkpoint) -> Checkpoint:
    best = copy.copy(state)
    best.tensors = state.best_tensors if state.best_tensors is not None else state.tensors
    best.best_tensors = None
    best.rng_state = None
    best.epoch = state.best_epoch
    best.history = list(state.history)
    return best
