"""Synthetic clustered playlist corpora for tests, benchmarks and smoke runs.

Songs are partitioned into latent clusters, each with a fixed internal
order. A playlist starts somewhere in one cluster, mostly walks forward
along that order, occasionally drifts into the next cluster and
occasionally picks a random catalog song. Drift makes recent songs more
informative than old ones; the forward walk makes order informative.
"""
from __future__ import annotations

import numpy as np

from .corpus import Corpus, from_sequences


def clustered_corpus(
    n_playlists: int = 2000,
    n_songs: int = 500,
    n_clusters: int = 20,
    min_len: int = 10,
    max_len: int = 50,
    drift: float = 0.06,
    noise: float = 0.05,
    artists_per_cluster: int = 5,
    seed: int = 0,
    playlist_cap: int = 250,
) -> tuple[Corpus, np.ndarray]:
    """Return ``(corpus, song_cluster)``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n_songs)
    song_cluster = np.empty(n_songs, dtype=np.int64)
    members = np.array_split(perm, n_clusters)
    for c, m in enumerate(members):
        song_cluster[m] = c

    artist_ids = np.empty(n_songs, dtype=np.int64)
    album_ids = np.empty(n_songs, dtype=np.int64)
    for c, m in enumerate(members):
        local = np.arange(len(m)) * artists_per_cluster // max(1, len(m))
        artist_ids[m] = c * artists_per_cluster + local
        album_ids[m] = 2 * artist_ids[m] + (np.arange(len(m)) % 2)
    # re-densify album ids
    _, album_ids = np.unique(album_ids, return_inverse=True)
    durations = rng.uniform(90, 420, size=n_songs).round(3)

    sequences = []
    for _ in range(n_playlists):
        length = int(rng.integers(min_len, max_len + 1))
        c = int(rng.integers(n_clusters))
        pos = int(rng.integers(len(members[c])))
        seen: set[int] = set()
        seq: list[int] = []
        while len(seq) < length:
            u = rng.random()
            if u < noise:
                s = int(rng.integers(n_songs))
            else:
                if u < noise + drift:
                    c = (c + 1) % n_clusters
                    pos = int(rng.integers(3))
                else:
                    pos += 1 if rng.random() < 0.8 else 2
                ring = members[c]
                s = int(ring[pos % len(ring)])
                tries = 0
                while s in seen and tries < len(ring):
                    pos += 1
                    s = int(ring[pos % len(ring)])
                    tries += 1
            if s in seen:
                s = int(rng.choice(np.setdiff1d(np.arange(n_songs), list(seen))))
            seen.add(s)
            seq.append(s)
        sequences.append(seq)

    corpus = from_sequences(
        sequences,
        n_songs,
        artist_ids=artist_ids,
        album_ids=album_ids,
        durations=durations,
        max_len=playlist_cap,
    )
    return corpus, song_cluster
