"""Initial embeddings: WRMF by alternating least squares, metadata vectors by averaging."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import ConfigError, Corpus
from .formats import atomic_write, dump_tables, load_tables

_logger = logging.getLogger(__name__)

METADATA_FAMILIES = ("artist", "album", "dur", "pop")


@dataclass(frozen=True)
class WrmfConfig:
    D: int = 128
    confidence_alpha: float = 10.0
    reg: float = 0.1
    iterations: int = 15
    rng_seed: int = 0
    init_std: float = 0.01
    balance: bool = True

    def __post_init__(self):
        if self.D < 1:
            raise ConfigError("WRMF dimension must be >= 1")
        if self.reg <= 0:
            raise ConfigError("WRMF regularization must be > 0")
        if self.iterations < 1:
            raise ConfigError("WRMF needs at least one ALS sweep")


@dataclass
class EmbeddingStore:
    """Song vectors plus one ``(table, known_mask)`` pair per metadata family."""

    song_vectors: np.ndarray
    metadata: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def D(self) -> int:
        return self.song_vectors.shape[1]

    def save(self, path) -> None:
        tables = {"song": (self.song_vectors, np.ones(len(self.song_vectors), dtype=bool))}
        tables.update(self.metadata)
        atomic_write(path, dump_tables(tables, self.D))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        tables, _ = load_tables(path)
        song, _ = tables.pop("song")
        return cls(song, tables)


def interaction_matrix(sequences, n_songs: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary occurrence matrix in CSR form ``(indptr, indices)``, duplicates dropped."""
    indptr = [0]
    cols = []
    for seq in sequences:
        u = np.unique(np.asarray(seq, dtype=np.int64))
        cols.append(u)
        indptr.append(indptr[-1] + len(u))
    indices = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    if len(indices) and indices.max() >= n_songs:
        raise ValueError("song id outside catalog")
    return np.asarray(indptr, dtype=np.int64), indices


def _transpose(indptr, indices, n_cols):
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    order = np.argsort(indices, kind="stable")
    t_indices = rows[order]
    t_indptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(np.bincount(indices, minlength=n_cols), out=t_indptr[1:])
    return t_indptr, t_indices


def _als_half(indptr, indices, other, alpha, reg, chunk=256):
    """Solve every row of one side given the fixed factors of the other side."""
    n, d = len(indptr) - 1, other.shape[1]
    gram = other.T @ other + reg * np.eye(d)
    out = np.empty((n, d))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        A = np.broadcast_to(gram, (stop - start, d, d)).copy()
        b = np.zeros((stop - start, d))
        for r in range(start, stop):
            Y = other[indices[indptr[r] : indptr[r + 1]]]
            if len(Y):
                A[r - start] += alpha * (Y.T @ Y)
                b[r - start] = (1.0 + alpha) * Y.sum(axis=0)
        out[start:stop] = np.linalg.solve(A, b[..., None])[..., 0]
    return out


def wrmf_objective(indptr, indices, X, Y, alpha, reg) -> float:
    """Confidence-weighted squared loss over the full matrix plus L2 penalty."""
    total = float(np.sum((X.T @ X) * (Y.T @ Y)))
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    pred = np.einsum("ij,ij->i", X[rows], Y[indices])
    total += float(np.sum((1.0 + alpha) * (1.0 - pred) ** 2 - pred**2))
    return total + reg * float(np.sum(X * X) + np.sum(Y * Y))


def wrmf_factorize(sequences, n_songs: int, config: WrmfConfig, history: list | None = None):
    """ALS on the binary playlist-song matrix; returns ``(song_vectors, playlist_vectors)``.

    ``history``, when given, receives the objective after each sweep.
    """
    if isinstance(sequences, Corpus):
        n_songs = sequences.n_songs
        sequences = [sequences.songs_at(r) for r in range(sequences.n_playlists)]
    if not len(sequences):
        raise ConfigError("WRMF needs a nonempty corpus")
    indptr, indices = interaction_matrix(sequences, n_songs)
    t_indptr, t_indices = _transpose(indptr, indices, n_songs)
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    Y = rng.standard_normal((n_songs, config.D)) * config.init_std
    X = np.zeros((len(indptr) - 1, config.D))
    for sweep in range(config.iterations):
        X = _als_half(indptr, indices, Y, config.confidence_alpha, config.reg)
        Y = _als_half(t_indptr, t_indices, X, config.confidence_alpha, config.reg)
        if history is not None:
            history.append(wrmf_objective(indptr, indices, X, Y, config.confidence_alpha, config.reg))
        _logger.debug("WRMF sweep %d done", sweep + 1)
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise FloatingPointError("WRMF produced non-finite factors")
    return Y.astype(np.float32), X.astype(np.float32)


def average_by_value(song_vectors: np.ndarray, values: np.ndarray, n_values: int | None = None):
    """Mean song vector per metadata value, with the mask of values that occur."""
    values = np.asarray(values, dtype=np.int64)
    if n_values is None:
        n_values = int(values.max()) + 1 if len(values) else 0
    sums = np.zeros((n_values, song_vectors.shape[1]), dtype=np.float64)
    np.add.at(sums, values, song_vectors.astype(np.float64))
    counts = np.bincount(values, minlength=n_values)
    known = counts > 0
    sums[known] /= counts[known, None]
    return sums.astype(np.float32), known


def init_metadata_embeddings(song_vectors: np.ndarray, corpus: Corpus) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if len(song_vectors) != corpus.n_songs:
        raise ValueError(f"{len(song_vectors)} song vectors for a catalog of {corpus.n_songs}")
    meta = corpus.metadata()
    sizes = {"artist": corpus.n_artists, "album": corpus.n_albums, "dur": 41, "pop": 101}
    return {f: average_by_value(song_vectors, meta[f], sizes[f]) for f in METADATA_FAMILIES}


def balance_factors(songs: np.ndarray, playlists: np.ndarray) -> np.ndarray:
    """Rescale song vectors by ``c`` so both factors have equal mean row norm.

    ``X Y^T`` is unchanged under ``Y * c, X / c``; ALS leaves the song side
    much shorter than the playlist side, which would start training with
    every score near zero.
    """
    ns = float(np.linalg.norm(songs, axis=1).mean())
    npl = float(np.linalg.norm(playlists, axis=1).mean())
    if ns == 0.0 or npl == 0.0:
        return songs
    return (songs * np.float32(np.sqrt(npl / ns))).astype(np.float32)


def build_store(corpus: Corpus, train_ids, config: WrmfConfig, history=None) -> EmbeddingStore:
    """WRMF on the training playlists followed by metadata averaging."""
    seqs = corpus.sequences(train_ids)
    songs, playlists = wrmf_factorize(seqs, corpus.n_songs, config, history=history)
    if config.balance:
        songs = balance_factors(songs, playlists)
    return EmbeddingStore(songs, init_metadata_embeddings(songs, corpus))
