"""Playlist corpus: MPD ingestion, metadata bucketing, splits and seed masking.

The catalog is stored column-wise (one numpy array per song field) and the
playlists as a CSR-style pair of offsets and song ids, which keeps a
million-playlist corpus in a few hundred megabytes.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

MAGIC = b"RTAC"
FORMAT_VERSION = 1
DEFAULT_MAX_LEN = 250
N_DUR_BUCKETS = 40
N_POP_BUCKETS = 100


class IngestError(Exception):
    """Raised when a slice file is missing or malformed."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Song:
    song_id: int
    artist_id: int
    album_id: int
    duration_s: float
    popularity: int
    dur_bucket: int
    pop_bucket: int


@dataclass(frozen=True)
class Playlist:
    playlist_id: int
    songs: tuple[int, ...]

    def __len__(self):
        return len(self.songs)


@dataclass(frozen=True)
class SplitSpec:
    rng_seed: int = 0
    n_val: int = 10_000
    n_test: int = 10_000
    min_len: int = 20


@dataclass(frozen=True)
class GroundTruth:
    """Masked tail of a playlist, as a song set plus the artist multiset."""

    songs: frozenset
    artists: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.songs)


def bucket_duration(duration_s: float) -> int:
    if duration_s < 0 or math.isnan(duration_s):
        raise ValueError(f"duration must be nonnegative, got {duration_s}")
    return max(1, min(N_DUR_BUCKETS, math.ceil(duration_s / 30)))


def bucket_popularity(popularity: int, alpha: float) -> int:
    if alpha <= 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if popularity < 0:
        raise ValueError(f"popularity must be nonnegative, got {popularity}")
    if popularity == 0:
        return 1
    return min(N_POP_BUCKETS, 1 + 100 * math.floor(math.log(popularity) / math.log(alpha)))


def _bucket_durations(durations: np.ndarray) -> np.ndarray:
    return np.clip(np.ceil(durations / 30.0), 1, N_DUR_BUCKETS).astype(np.uint8)


def _bucket_popularities(pop: np.ndarray, alpha: float) -> np.ndarray:
    if len(pop) == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.array([bucket_popularity(int(p), alpha) for p in pop], dtype=np.uint8)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class Corpus:
    """Immutable catalog plus playlists.

    ``popularity`` and ``pop_bucket`` are recomputed by :meth:`with_popularity_from`
    once the training subset is known; ``load_mpd_slices`` counts over every
    ingested playlist.
    """

    def __init__(
        self,
        artist_ids,
        album_ids,
        durations,
        playlist_ids,
        offsets,
        tracks,
        max_len=DEFAULT_MAX_LEN,
        alpha_pop=None,
        popularity=None,
        song_uris=None,
        artist_uris=None,
        album_uris=None,
        diagnostics=None,
    ):
        self.artist_ids = _readonly(np.asarray(artist_ids, dtype=np.int32))
        self.album_ids = _readonly(np.asarray(album_ids, dtype=np.int32))
        self.durations = _readonly(np.asarray(durations, dtype=np.float64))
        self.playlist_ids = _readonly(np.asarray(playlist_ids, dtype=np.int64))
        self.offsets = _readonly(np.asarray(offsets, dtype=np.int64))
        self.tracks = _readonly(np.asarray(tracks, dtype=np.int32))
        self.max_len = int(max_len)
        n = len(self.artist_ids)
        if len(self.offsets) != len(self.playlist_ids) + 1:
            raise ValueError("offsets must have one more entry than playlists")
        if len(self.tracks) and (self.tracks.min() < 0 or self.tracks.max() >= n):
            raise ValueError("playlist references a song outside the catalog")
        lengths = np.diff(self.offsets)
        if len(lengths) and (lengths.min() < 1 or lengths.max() > self.max_len):
            raise ValueError(f"playlist lengths must lie in [1, {self.max_len}]")
        if popularity is None:
            popularity = np.bincount(self.tracks, minlength=n)
        self.popularity = _readonly(np.asarray(popularity, dtype=np.int64))
        if alpha_pop is None:
            alpha_pop = max(2.0, float(self.popularity.max()) if n else 2.0)
        self.alpha_pop = float(alpha_pop)
        self.dur_bucket = _readonly(_bucket_durations(self.durations))
        self.pop_bucket = _readonly(_bucket_popularities(self.popularity, self.alpha_pop))
        self.song_uris = tuple(song_uris) if song_uris is not None else tuple(f"song:{i}" for i in range(n))
        n_art = int(self.artist_ids.max()) + 1 if n else 0
        n_alb = int(self.album_ids.max()) + 1 if n else 0
        self.artist_uris = tuple(artist_uris) if artist_uris is not None else tuple(f"artist:{i}" for i in range(n_art))
        self.album_uris = tuple(album_uris) if album_uris is not None else tuple(f"album:{i}" for i in range(n_alb))
        self.diagnostics = dict(diagnostics or {})
        self._row_of_pid = {int(p): i for i, p in enumerate(self.playlist_ids)}
        if len(self._row_of_pid) != len(self.playlist_ids):
            raise ValueError("playlist ids must be unique")

    # -- sizes -------------------------------------------------------------
    @property
    def n_songs(self) -> int:
        return len(self.artist_ids)

    @property
    def n_playlists(self) -> int:
        return len(self.playlist_ids)

    @property
    def n_artists(self) -> int:
        return len(self.artist_uris)

    @property
    def n_albums(self) -> int:
        return len(self.album_uris)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    # -- access ------------------------------------------------------------
    def song(self, song_id: int) -> Song:
        i = int(song_id)
        if not 0 <= i < self.n_songs:
            raise KeyError(f"unknown song id {song_id}")
        return Song(
            i,
            int(self.artist_ids[i]),
            int(self.album_ids[i]),
            float(self.durations[i]),
            int(self.popularity[i]),
            int(self.dur_bucket[i]),
            int(self.pop_bucket[i]),
        )

    def row_of(self, playlist_id: int) -> int:
        return self._row_of_pid[int(playlist_id)]

    def songs_at(self, row: int) -> np.ndarray:
        return self.tracks[self.offsets[row] : self.offsets[row + 1]]

    def songs_of(self, playlist_id: int) -> np.ndarray:
        return self.songs_at(self.row_of(playlist_id))

    def playlist(self, playlist_id: int) -> Playlist:
        return Playlist(int(playlist_id), tuple(int(s) for s in self.songs_of(playlist_id)))

    def sequences(self, playlist_ids: Iterable[int]) -> list[np.ndarray]:
        return [self.songs_of(p) for p in playlist_ids]

    def metadata(self) -> dict[str, np.ndarray]:
        """Per-song metadata value ids, keyed by family."""
        return {
            "artist": self.artist_ids,
            "album": self.album_ids,
            "dur": self.dur_bucket.astype(np.int64),
            "pop": self.pop_bucket.astype(np.int64),
        }

    def with_popularity_from(self, playlist_ids, alpha_pop=None) -> "Corpus":
        """Copy with popularity counted over ``playlist_ids`` only."""
        keep = np.zeros(self.n_playlists, dtype=bool)
        keep[[self.row_of(p) for p in playlist_ids]] = True
        counts = np.bincount(self.tracks[np.repeat(keep, self.lengths)], minlength=self.n_songs)
        return Corpus(
            self.artist_ids,
            self.album_ids,
            self.durations,
            self.playlist_ids,
            self.offsets,
            self.tracks,
            max_len=self.max_len,
            alpha_pop=alpha_pop,
            popularity=counts,
            song_uris=self.song_uris,
            artist_uris=self.artist_uris,
            album_uris=self.album_uris,
            diagnostics=self.diagnostics,
        )

    def __repr__(self):
        return f"Corpus(N={self.n_songs}, K={self.n_playlists}, L={self.max_len})"


def from_sequences(
    sequences: Sequence[Sequence[int]],
    n_songs: int,
    artist_ids=None,
    album_ids=None,
    durations=None,
    playlist_ids=None,
    max_len=DEFAULT_MAX_LEN,
    alpha_pop=None,
) -> Corpus:
    """Build a corpus from in-memory song-id sequences (fixtures, synthetic data)."""
    lengths = [len(s) for s in sequences]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tracks = np.concatenate([np.asarray(s, dtype=np.int32) for s in sequences]) if sequences else np.zeros(0, np.int32)
    if artist_ids is None:
        artist_ids = np.arange(n_songs)
    if album_ids is None:
        album_ids = np.arange(n_songs)
    if durations is None:
        durations = np.full(n_songs, 200.0)
    if playlist_ids is None:
        playlist_ids = np.arange(len(sequences))
    return Corpus(artist_ids, album_ids, durations, playlist_ids, offsets, tracks, max_len=max_len, alpha_pop=alpha_pop)


# -- MPD ingestion -----------------------------------------------------------


def _slice_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("mpd.slice.*.json"))
    if not files:
        files = sorted(directory.glob("*.json"))
    return files


def _read_slice(path: Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(path, str(exc)) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("playlists"), list):
        raise IngestError(path, 'missing top-level "playlists" array')
    return doc["playlists"]


def load_mpd_slices(directory_path, max_len: int = DEFAULT_MAX_LEN, alpha_pop=None) -> Corpus:
    directory = Path(directory_path)
    if not directory.is_dir():
        raise IngestError(directory, "not a directory")
    files = _slice_files(directory)
    if not files:
        raise IngestError(directory, "no slice files found")

    tally = Counter()
    track_meta: dict[str, tuple[str, str, float]] = {}
    raw: list[tuple[int, list[str]]] = []
    for path in files:
        for pl in _read_slice(path):
            try:
                pid = int(pl["pid"])
                tracks = pl["tracks"]
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(path, f"malformed playlist record: {exc}") from exc
            uris = []
            for t in tracks:
                uri = t.get("track_uri")
                art = t.get("artist_uri")
                alb = t.get("album_uri")
                if not uri or not art or not alb:
                    tally["rejected_tracks"] += 1
                    continue
                if uri not in track_meta:
                    dur = max(0.0, float(t.get("duration_ms", 0) or 0) / 1000.0)
                    track_meta[uri] = (art, alb, dur)
                uris.append(uri)
            if not uris:
                tally["empty_playlists"] += 1
                continue
            if len(uris) > max_len:
                tally["truncated_playlists"] += 1
                uris = uris[:max_len]
            raw.append((pid, uris))

    song_uris = sorted(track_meta)
    artist_uris = sorted({m[0] for m in track_meta.values()})
    album_uris = sorted({m[1] for m in track_meta.values()})
    song_ix = {u: i for i, u in enumerate(song_uris)}
    art_ix = {u: i for i, u in enumerate(artist_uris)}
    alb_ix = {u: i for i, u in enumerate(album_uris)}
    artist_ids = np.array([art_ix[track_meta[u][0]] for u in song_uris], dtype=np.int32)
    album_ids = np.array([alb_ix[track_meta[u][1]] for u in song_uris], dtype=np.int32)
    durations = np.array([track_meta[u][2] for u in song_uris], dtype=np.float64)

    raw.sort(key=lambda r: r[0])
    seqs = [[song_ix[u] for u in uris] for _, uris in raw]
    lengths = [len(s) for s in seqs]
    offsets = np.concatenate([[0], np.cumsum(lengths, dtype=np.int64)]).astype(np.int64)
    tracks = np.array([s for seq in seqs for s in seq], dtype=np.int32)
    if tally:
        _logger.info("ingestion diagnostics: %s", dict(tally))
    return Corpus(
        artist_ids,
        album_ids,
        durations,
        [pid for pid, _ in raw],
        offsets,
        tracks,
        max_len=max_len,
        alpha_pop=alpha_pop,
        song_uris=song_uris,
        artist_uris=artist_uris,
        album_uris=album_uris,
        diagnostics=dict(tally),
    )


# -- splits and masking ------------------------------------------------------


def split_dataset(corpus: Corpus, spec: SplitSpec):
    """Uniformly sample validation and test playlists among those of length >= min_len.

    Returns ``(train_ids, val_ids, test_ids)`` as sorted arrays of playlist ids.
    """
    eligible = corpus.playlist_ids[corpus.lengths >= spec.min_len]
    need = spec.n_val + spec.n_test
    if len(eligible) < need:
        raise ConfigError(
            f"split needs {need} playlists of length >= {spec.min_len}, corpus has {len(eligible)}"
        )
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
    picked = rng.choice(eligible, size=need, replace=False)
    val = np.sort(picked[: spec.n_val])
    test = np.sort(picked[spec.n_val :])
    held = np.concatenate([val, test])
    train = np.sort(np.setdiff1d(corpus.playlist_ids, held))
    return train, val, test


def mask_playlist(songs, n_seed: int, artist_of=None):
    """Split a playlist into its visible seed prefix and masked ground truth."""
    songs = [int(s) for s in (songs.songs if isinstance(songs, Playlist) else songs)]
    if not 1 <= n_seed < len(songs):
        raise ValueError(f"n_seed must lie in [1, {len(songs) - 1}], got {n_seed}")
    seed = songs[:n_seed]
    truth = frozenset(songs[n_seed:])
    artists = Counter(int(artist_of[s]) for s in truth) if artist_of is not None else Counter()
    return seed, GroundTruth(truth, artists)


# -- binary serialization ----------------------------------------------------

_HEADER = struct.Struct("<4sIQQId")


def _write_strings(fh, strings):
    blob = "\n".join(strings).encode("utf-8")
    fh.write(struct.pack("<QQ", len(strings), len(blob)))
    fh.write(blob)


def _read_strings(buf, pos):
    count, size = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    blob = bytes(buf[pos : pos + size]).decode("utf-8")
    pos += size
    strings = blob.split("\n") if count else []
    if len(strings) != count:
        raise IngestError("<corpus>", "string table size mismatch")
    return strings, pos


def save_corpus(corpus: Corpus, path, rng_seed=None) -> None:
    """Write the binary corpus plus a ``.manifest.json`` sidecar."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, corpus.n_songs, corpus.n_playlists, corpus.max_len, corpus.alpha_pop))
        for arr, dt in (
            (corpus.artist_ids, "<i4"),
            (corpus.album_ids, "<i4"),
            (corpus.durations, "<f8"),
            (corpus.popularity, "<i8"),
            (corpus.playlist_ids, "<i8"),
            (corpus.offsets, "<i8"),
            (corpus.tracks, "<i4"),
        ):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        for strings in (corpus.song_uris, corpus.artist_uris, corpus.album_uris):
            _write_strings(fh, strings)
    tmp.replace(path)
    manifest = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "n_songs": corpus.n_songs,
        "n_playlists": corpus.n_playlists,
        "n_interactions": int(len(corpus.tracks)),
        "max_len": corpus.max_len,
        "alpha_pop": corpus.alpha_pop,
        "rng_seed": rng_seed,
        "diagnostics": corpus.diagnostics,
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestError(path, str(exc)) from exc
    if len(buf) < _HEADER.size:
        raise IngestError(path, "truncated header")
    magic, version, n, k, max_len, alpha = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise IngestError(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IngestError(path, f"unsupported format version {version}")
    pos = _HEADER.size

    def take(dtype, count):
        nonlocal pos
        dt = np.dtype(dtype)
        end = pos + dt.itemsize * count
        if end > len(buf):
            raise IngestError(path, "truncated body")
        out = np.frombuffer(buf, dtype=dt, count=count, offset=pos).copy()
        pos = end
        return out

    artist_ids = take("<i4", n)
    album_ids = take("<i4", n)
    durations = take("<f8", n)
    popularity = take("<i8", n)
    playlist_ids = take("<i8", k)
    offsets = take("<i8", k + 1)
    tracks = take("<i4", int(offsets[-1]))
    try:
        song_uris, pos = _read_strings(buf, pos)
        artist_uris, pos = _read_strings(buf, pos)
        album_uris, pos = _read_strings(buf, pos)
    except struct.error as exc:
        raise IngestError(path, "truncated string tables") from exc
    manifest_path = Path(str(path) + ".manifest.json")
    diagnostics = {}
    if manifest_path.exists():
        diagnostics = json.loads(manifest_path.read_text()).get("diagnostics", {})
    return Corpus(
        artist_ids,
        album_ids,
        durations,
        playlist_ids,
        offsets,
        tracks,
        max_len=max_len,
        alpha_pop=alpha,
        popularity=popularity,
        song_uris=song_uris,
        artist_uris=artist_uris,
        album_uris=album_uris,
        diagnostics=diagnostics,
    )
