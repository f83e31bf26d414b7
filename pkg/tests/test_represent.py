import numpy as np
import pytest
import torch

from rta import numerics as nx
from rta.corpus import ConfigError
from rta.formats import ArtifactError, load_catalog
from rta.init import METADATA_FAMILIES, EmbeddingStore
from rta.represent import (
    AttentionRepresenter,
    DirectRepresenter,
    FMRepresenter,
    SelfAttention,
    phi_attention,
    phi_direct,
    phi_fm,
    precompute_catalog,
    save_catalog,
)


def make_store(n=6, d=4, rows=3, seed=0, unknown=()):
    rng = np.random.default_rng(seed)
    meta = {}
    for f in METADATA_FAMILIES:
        known = np.ones(rows, bool)
        for fam, v in unknown:
            if fam == f:
                known[v] = False
        meta[f] = (rng.normal(size=(rows, d)).astype(np.float32), known)
    return EmbeddingStore(rng.normal(size=(n, d)).astype(np.float32), meta)


def make_meta(n=6, rows=3, seed=1):
    rng = np.random.default_rng(seed)
    return {f: rng.integers(0, rows, n) for f in METADATA_FAMILIES}


def test_phi_direct():
    store = make_store()
    np.testing.assert_array_equal(phi_direct(0, store), store.song_vectors[0])
    np.testing.assert_array_equal(phi_direct(2, store), phi_direct(2, store))
    with pytest.raises(KeyError):
        phi_direct(len(store.song_vectors), store)


def test_direct_representer_bounds():
    rep = DirectRepresenter(make_store())
    with pytest.raises(KeyError):
        rep(torch.tensor([6]))


def test_phi_fm_identical_vectors():
    v = np.array([1.0, -2.0], np.float32)
    store = EmbeddingStore(np.zeros((1, 2), np.float32), {f: (v[None], np.ones(1, bool)) for f in METADATA_FAMILIES})
    meta = {f: np.array([0]) for f in METADATA_FAMILIES}
    np.testing.assert_allclose(phi_fm(0, meta, store), v)


def test_phi_fm_mean_example():
    vecs = {"artist": [1, 0], "album": [0, 1], "dur": [1, 0], "pop": [0, 1]}
    store = EmbeddingStore(np.zeros((1, 2), np.float32),
                           {f: (np.array([vecs[f]], np.float32), np.ones(1, bool)) for f in METADATA_FAMILIES})
    meta = {f: np.array([0]) for f in METADATA_FAMILIES}
    np.testing.assert_allclose(phi_fm(0, meta, store), [0.5, 0.5])
    rep = FMRepresenter(store, meta)
    np.testing.assert_allclose(rep(torch.tensor([0]))[0].detach().numpy(), [0.5, 0.5])


def test_phi_fm_cold_artist_falls_back_to_other_fields():
    # song 1 has an artist value the tables never saw
    store = make_store(n=2, d=3, rows=2, unknown=[("artist", 1)])
    meta = {f: np.array([0, 1]) for f in METADATA_FAMILIES}
    by_hand = np.mean([store.metadata[f][0][1] for f in ("album", "dur", "pop")], axis=0)
    np.testing.assert_allclose(phi_fm(1, meta, store), by_hand, rtol=1e-6)
    rep = FMRepresenter(store, meta)
    np.testing.assert_allclose(rep(torch.tensor([1]))[0].detach().numpy(), by_hand, rtol=1e-6)


def test_phi_fm_no_known_field_is_zero():
    store = make_store(n=1, d=3, rows=1, unknown=[(f, 0) for f in METADATA_FAMILIES])
    meta = {f: np.array([0]) for f in METADATA_FAMILIES}
    assert not phi_fm(0, meta, store).any()
    assert not FMRepresenter(store, meta)(torch.tensor([0])).detach().numpy().any()


def test_fm_representer_matches_functional_form():
    store, meta = make_store(n=20, rows=5), make_meta(n=20, rows=5)
    rep = FMRepresenter(store, meta)
    got = precompute_catalog(rep)
    want = np.stack([phi_fm(i, meta, store) for i in range(20)])
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_phi_fm_field_order_invariant():
    store, meta = make_store(), make_meta()
    a = phi_fm(3, meta, store)
    b = np.mean([store.metadata[f][0][meta[f][3]] for f in reversed(METADATA_FAMILIES)], axis=0)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def _identity_attention(dim):
    attn = SelfAttention(dim, 1, nx.Rng(0))
    with torch.no_grad():
        for lin in (attn.q, attn.k):
            lin.weight.zero_()
        for lin in (attn.v, attn.o):
            lin.weight.copy_(torch.eye(dim))
        for lin in (attn.q, attn.k, attn.v, attn.o):
            lin.bias.zero_()
    return attn


def test_uniform_identity_attention_outputs_token_mean():
    attn = _identity_attention(4)
    x = torch.tensor([[[1.0, 2, 3, 4], [0, 0, 1, 0], [5, -1, 0, 2]]])
    out = attn(x)
    for t in range(3):
        torch.testing.assert_close(out[0, t], x[0].mean(0))


def test_attention_representer_hand_computed_with_identity_attention():
    d = 4
    store, meta = make_store(n=3, d=d), make_meta(n=3)
    rep = AttentionRepresenter(store, meta, nx.Rng(0), n_layers=1, n_heads=1)
    rep.layers[0] = _identity_attention(d)
    rep.eval()
    got = rep(torch.tensor([1]))[0].detach().numpy()
    toks = np.stack([store.song_vectors[1]] + [store.metadata[f][0][meta[f][1]] for f in METADATA_FAMILIES])
    z = toks + toks.mean(0)
    z = (z - z.mean(1, keepdims=True)) / np.sqrt(z.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(got, z.mean(0), rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(phi_attention(1, rep), got)


def test_single_token_attention_is_projection_of_that_token():
    attn = SelfAttention(4, 2, nx.Rng(1), out_std=0.5)
    x = torch.randn(1, 3, 4)
    mask = torch.tensor([[True, False, False]])
    out = attn(x, key_mask=mask)
    torch.testing.assert_close(out[0, 0], attn.o(attn.v(x[0, 0])))


def test_fully_masked_metadata_song_uses_own_token_only():
    d = 4
    store = make_store(n=1, d=d, rows=1, unknown=[(f, 0) for f in METADATA_FAMILIES])
    meta = {f: np.array([0]) for f in METADATA_FAMILIES}
    rep = AttentionRepresenter(store, meta, nx.Rng(0), n_heads=2).eval()
    e = torch.tensor(store.song_vectors[0])
    attn, norm = rep.layers[0], rep.norms[0]
    want = norm(e + attn.o(attn.v(e)))
    torch.testing.assert_close(rep(torch.tensor([0]))[0], want)


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError):
        SelfAttention(6, 4, nx.Rng(0))


def test_attention_representer_grad_check():
    store, meta = make_store(n=4, d=8, rows=3), make_meta(n=4, rows=3)
    rep = AttentionRepresenter(store, meta, nx.Rng(2), n_layers=1, n_heads=2)
    probe = nx.Rng(3).normal((4, 8))
    ids = torch.arange(4)
    skip = [n for n, _ in rep.named_parameters() if n.endswith("k.bias")]
    assert nx.grad_check_module(rep, lambda m, dt: (m(ids) * probe.to(dt)).sum(), skip=skip) < 1e-2


def test_precompute_direct_equals_vectors_and_is_pure():
    store = make_store(n=50, d=4)
    rep = DirectRepresenter(store)
    a, b = precompute_catalog(rep, chunk=7), precompute_catalog(rep, chunk=7)
    np.testing.assert_array_equal(a, store.song_vectors)
    np.testing.assert_array_equal(a, b)


def test_precompute_parallel_equals_sequential():
    store, meta = make_store(n=1000, d=8, rows=20), make_meta(n=1000, rows=20)
    rep = AttentionRepresenter(store, meta, nx.Rng(4), n_heads=2)
    seq = precompute_catalog(rep, chunk=64, workers=1)
    par = precompute_catalog(rep, chunk=64, workers=4)
    np.testing.assert_array_equal(seq, par)
    rows = rep(torch.tensor([0, 999])).detach().numpy()
    np.testing.assert_allclose(seq[[0, 999]], rows, rtol=1e-6)


def test_catalog_file_round_trip_and_truncation(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(4, 3)
    save_catalog(m, tmp_path / "c.rtap", "ab" * 32)
    back, h = load_catalog(tmp_path / "c.rtap")
    np.testing.assert_array_equal(back, m)
    assert h == "ab" * 32
    blob = (tmp_path / "c.rtap").read_bytes()
    (tmp_path / "c.rtap").write_bytes(blob[:-5])
    with pytest.raises(ArtifactError, match="c.rtap"):
        load_catalog(tmp_path / "c.rtap")
