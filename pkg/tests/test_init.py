import numpy as np
import pytest

from rta.corpus import ConfigError, from_sequences
from rta.init import (
    EmbeddingStore,
    WrmfConfig,
    average_by_value,
    balance_factors,
    build_store,
    init_metadata_embeddings,
    interaction_matrix,
    wrmf_factorize,
    wrmf_objective,
)


def dense_objective(R, X, Y, alpha, reg):
    """Direct evaluation over every cell of the occurrence matrix."""
    C = 1.0 + alpha * R
    return float(np.sum(C * (R - X @ Y.T) ** 2) + reg * (np.sum(X**2) + np.sum(Y**2)))


def random_sequences(rng, n_rows=50, n_cols=80, density=0.1):
    R = (rng.random((n_rows, n_cols)) < density).astype(float)
    R[np.arange(n_rows), rng.integers(0, n_cols, n_rows)] = 1.0
    return R, [np.flatnonzero(r) for r in R]


def test_sparse_objective_matches_dense_oracle():
    rng = np.random.default_rng(0)
    R, seqs = random_sequences(rng)
    X, Y = rng.normal(size=(50, 6)), rng.normal(size=(80, 6))
    indptr, indices = interaction_matrix(seqs, 80)
    assert wrmf_objective(indptr, indices, X, Y, 10.0, 0.1) == pytest.approx(dense_objective(R, X, Y, 10.0, 0.1), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_objective_nonincreasing_over_sweeps(seed):
    rng = np.random.default_rng(seed)
    R, seqs = random_sequences(rng)
    history = []
    wrmf_factorize(seqs, 80, WrmfConfig(D=8, iterations=6, rng_seed=seed), history=history)
    assert len(history) == 6
    assert all(b <= a * (1 + 1e-9) for a, b in zip(history, history[1:]))
    assert history[2] <= history[0]


def test_block_diagonal_fixture():
    # two disjoint playlist/song pairs
    Y, X = wrmf_factorize([[0], [1]], 2, WrmfConfig(D=2, iterations=10))
    S = X @ Y.T
    assert S[0, 0] > S[0, 1] and S[1, 1] > S[1, 0]


def test_block_diagonal_retrieval_larger():
    blocks = [list(range(0, 5)), list(range(5, 10)), list(range(10, 15))]
    seqs = [b for b in blocks for _ in range(4)]
    Y, X = wrmf_factorize(seqs, 15, WrmfConfig(D=4, iterations=10))
    for p, block in enumerate(seqs):
        top = np.argsort(-(Y @ X[p]))[:5]
        assert set(top.tolist()) == set(block)


def test_wrmf_deterministic():
    seqs = [[0, 1, 2], [2, 3], [1, 4]]
    a = wrmf_factorize(seqs, 5, WrmfConfig(D=3, iterations=3, rng_seed=4))
    b = wrmf_factorize(seqs, 5, WrmfConfig(D=3, iterations=3, rng_seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("kw", [{"iterations": 0}, {"reg": 0.0}, {"D": 0}])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        WrmfConfig(**kw)


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        wrmf_factorize([], 3, WrmfConfig(D=2))


def test_metadata_mean_and_singleton():
    songs = np.array([[1, 1], [3, 3], [5, 7]], dtype=np.float32)
    table, known = average_by_value(songs, np.array([0, 0, 1]))
    np.testing.assert_allclose(table[0], [2, 2])
    np.testing.assert_allclose(table[1], [5, 7])
    assert known.all()


def test_metadata_permutation_invariant():
    rng = np.random.default_rng(1)
    songs = rng.normal(size=(30, 4)).astype(np.float32)
    vals = rng.integers(0, 6, 30)
    perm = rng.permutation(30)
    a, _ = average_by_value(songs, vals, 6)
    b, _ = average_by_value(songs[perm], vals[perm], 6)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_unobserved_value_is_marked_unknown():
    table, known = average_by_value(np.ones((2, 2), np.float32), np.array([0, 2]), 4)
    assert known.tolist() == [True, False, True, False]
    assert not table[1].any()


def test_init_metadata_tables_cover_all_families():
    c = from_sequences([[0, 1], [1, 2]], 3, artist_ids=[0, 0, 1], album_ids=[0, 1, 2], durations=[10, 70, 400])
    songs = np.arange(6, dtype=np.float32).reshape(3, 2)
    meta = init_metadata_embeddings(songs, c)
    assert set(meta) == {"artist", "album", "dur", "pop"}
    np.testing.assert_allclose(meta["artist"][0][0], songs[:2].mean(0))
    np.testing.assert_allclose(meta["dur"][0][3], songs[1])  # 70 s -> bucket 3
    assert meta["dur"][0].shape[0] == 41 and meta["pop"][0].shape[0] == 101


def test_balance_preserves_product_direction():
    rng = np.random.default_rng(2)
    Y, X = rng.normal(size=(10, 3)) * 0.1, rng.normal(size=(6, 3)) * 5
    Yb = balance_factors(Y.astype(np.float32), X)
    c = Yb[0, 0] / Y[0, 0]
    np.testing.assert_allclose(Yb, Y * c, rtol=1e-5)
    assert np.linalg.norm(Yb, axis=1).mean() == pytest.approx(np.linalg.norm(X / c, axis=1).mean(), rel=1e-4)


def test_store_round_trip(tmp_path, small_corpus):
    corpus, _ = small_corpus
    store = build_store(corpus, corpus.playlist_ids[:100], WrmfConfig(D=4, iterations=2))
    store.save(tmp_path / "e.rtae")
    assert (tmp_path / "e.rtae").read_bytes()[:4] == b"RTAE"
    back = EmbeddingStore.load(tmp_path / "e.rtae")
    np.testing.assert_array_equal(back.song_vectors, store.song_vectors)
    for f, (t, k) in store.metadata.items():
        np.testing.assert_array_equal(back.metadata[f][0], t)
        np.testing.assert_array_equal(back.metadata[f][1], k)
    assert np.isfinite(store.song_vectors).all()
