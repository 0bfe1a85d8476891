"""Cache store tests: hashing, round-trips, modes, eviction, snapshots."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crosskv.errors import CacheMissError, CapacityError, SchemaError
from crosskv.model import ECache, RecomputeConfig, full_prefill, make_synthetic_dataset
from crosskv.store import (
    KIND_E,
    KIND_KV,
    CacheKey,
    CacheStore,
    KVSlice,
    context_hash,
    fetch_context_caches,
    store_prefill,
)
from conftest import TOY


def kv_payload(rng, positions=10, kv_heads=2, head_dim=16):
    return KVSlice(
        rng.standard_normal((kv_heads, positions, head_dim)).astype(np.float32),
        rng.standard_normal((kv_heads, positions, head_dim)).astype(np.float32),
    )


def key(ctx="aa", model="m", layer=0, kind=KIND_KV):
    return CacheKey(context_hash([1, 2, 3]) if ctx == "aa" else ctx, model, layer, kind)


# ---------------------------------------------------------------------------
# Context hashing
# ---------------------------------------------------------------------------


def test_hash_equal_sequences_equal_ids():
    assert context_hash([5, 6, 7]) == context_hash(np.array([5, 6, 7]))


def test_hash_single_token_mutations_differ():
    rng = np.random.default_rng(9)
    base = rng.integers(0, 256, size=64)
    seen = {context_hash(base).digest}
    for _ in range(1000):
        mutated = base.copy()
        pos = rng.integers(0, 64)
        mutated[pos] = (mutated[pos] + 1 + rng.integers(0, 254)) % 256
        seen.add(context_hash(mutated).digest)
    # every distinct mutation hashes apart from the base
    assert len(seen) > 1
    assert context_hash(base) != context_hash(base[:-1])


def test_hash_empty_differs_from_nonempty():
    assert context_hash([]) != context_hash([0])


# ---------------------------------------------------------------------------
# Store/fetch
# ---------------------------------------------------------------------------


def test_round_trip_bitwise():
    store = CacheStore()
    rng = np.random.default_rng(1)
    p = kv_payload(rng)
    k = key()
    store.store(k, p)
    got = store.fetch(k)
    assert np.array_equal(got.k, p.k) and np.array_equal(got.v, p.v)

    e = ECache(3, rng.standard_normal((10, 64)).astype(np.float32))
    ke = key(layer=3, kind=KIND_E)
    store.store(ke, e)
    got = store.fetch(ke)
    assert np.array_equal(got.hidden, e.hidden)


def test_fetch_of_missing_key_is_none():
    assert CacheStore().fetch(key()) is None


def test_idempotent_restore():
    store = CacheStore()
    rng = np.random.default_rng(1)
    p = kv_payload(rng)
    size1 = store.store(key(), p)
    total1 = store.total_bytes
    size2 = store.store(key(), KVSlice(p.k.copy(), p.v.copy()))
    assert size1 == size2
    assert store.total_bytes == total1
    assert len(store) == 1


def test_overwrite_returns_latest():
    store = CacheStore()
    rng = np.random.default_rng(1)
    p1, p2 = kv_payload(rng), kv_payload(rng)
    store.store(key(), p1)
    store.store(key(), p2)
    assert np.array_equal(store.fetch(key()).k, p2.k)


def test_size_formula():
    rng = np.random.default_rng(2)
    store = CacheStore()
    size = store.store(key(), kv_payload(rng, positions=100, kv_heads=1, head_dim=16))
    assert size == 2 * 1 * 16 * 4 * 100 == 12800
    e_size = store.store(key(layer=1, kind=KIND_E), ECache(1, rng.standard_normal((100, 64)).astype(np.float32)))
    assert e_size == 64 * 4 * 100 == 25600
    assert store.total_bytes == 12800 + 25600


def test_kind_payload_mismatch_rejected():
    store = CacheStore()
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        store.store(key(kind=KIND_E), kv_payload(rng))
    with pytest.raises(ValueError):
        store.store(key(kind=KIND_KV), ECache(0, rng.standard_normal((4, 64)).astype(np.float32)))


def test_shape_validation_against_config():
    store = CacheStore(config=TOY)
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        store.store(key(), kv_payload(rng, kv_heads=3))
    with pytest.raises(ValueError):
        store.store(key(layer=99), kv_payload(rng))


def test_stored_payloads_are_immutable():
    store = CacheStore()
    rng = np.random.default_rng(5)
    p = kv_payload(rng)
    store.store(key(), p)
    got = store.fetch(key())
    with pytest.raises(ValueError):
        got.k[0, 0, 0] = 1.0


@settings(max_examples=25, deadline=None)
@given(
    positions=st.integers(1, 12),
    kv_heads=st.sampled_from([1, 2, 4]),
    head_dim=st.sampled_from([4, 8]),
    seed=st.integers(0, 999),
)
def test_round_trip_property(positions, kv_heads, head_dim, seed):
    rng = np.random.default_rng(seed)
    p = kv_payload(rng, positions, kv_heads, head_dim)
    store = CacheStore()
    size = store.store(key(), p)
    assert size == 2 * kv_heads * head_dim * 4 * positions
    got = store.fetch(key())
    assert np.array_equal(got.k, p.k) and np.array_equal(got.v, p.v)


# ---------------------------------------------------------------------------
# Capacity and eviction
# ---------------------------------------------------------------------------


def test_eviction_is_least_recently_fetched():
    rng = np.random.default_rng(6)
    one = 2 * 2 * 16 * 4 * 10  # bytes of one payload
    store = CacheStore(capacity_bytes=2 * one)
    k1, k2, k3 = key(layer=0), key(layer=1), key(layer=2)
    store.store(k1, kv_payload(rng))
    store.store(k2, kv_payload(rng))
    store.fetch(k1)  # k2 becomes least recently used
    store.store(k3, kv_payload(rng))
    assert store.fetch(k2) is None
    assert store.fetch(k1) is not None and store.fetch(k3) is not None


def test_oversized_payload_refused():
    rng = np.random.default_rng(7)
    store = CacheStore(capacity_bytes=16)
    with pytest.raises(CapacityError):
        store.store(key(), kv_payload(rng))


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def test_serving_mode_keeps_only_transition_e(base_model, sample_tokens):
    config = RecomputeConfig([(0, 1), (4, 5)])  # transition layers: {4}
    store = CacheStore(mode="serving", transition_layers=config.transition_layers)
    result = full_prefill(base_model, sample_tokens)
    store_prefill(store, base_model.ident, sample_tokens, result)
    stored_e = {k.layer for k in store.keys() if k.kind == KIND_E}
    assert stored_e == {4}
    stored_kv = {k.layer for k in store.keys() if k.kind == KIND_KV}
    assert stored_kv == set(range(8))
    ctx = context_hash(sample_tokens)
    assert store.fetch(CacheKey(ctx, base_model.ident, 2, KIND_E)) is None


def test_profiling_mode_keeps_all_e(base_model, sample_tokens):
    store = CacheStore(mode="profiling")
    store_prefill(store, base_model.ident, sample_tokens, full_prefill(base_model, sample_tokens))
    assert {k.layer for k in store.keys() if k.kind == KIND_E} == set(range(8))


def test_fetch_context_caches_roundtrip(base_model, sample_tokens):
    config = RecomputeConfig([(4, 5)])
    store = CacheStore(mode="serving", transition_layers=config.transition_layers)
    result = full_prefill(base_model, sample_tokens)
    store_prefill(store, base_model.ident, sample_tokens, result)
    kv, e_map = fetch_context_caches(store, base_model.ident, sample_tokens, config, 8)
    assert set(e_map) == {4}
    for l in config.reused_layers(8):
        assert np.array_equal(kv.k[l], result.kv.k[l])
    other = make_synthetic_dataset(77, 1, 10, TOY.vocab_size)[0]
    with pytest.raises(CacheMissError):
        fetch_context_caches(store, base_model.ident, other, config, 8)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def test_snapshot_round_trip(tmp_path, base_model, sample_tokens):
    store = CacheStore(mode="profiling", config=TOY)
    store_prefill(store, base_model.ident, sample_tokens, full_prefill(base_model, sample_tokens))
    store.save_snapshot(tmp_path)
    loaded = CacheStore.load_snapshot(tmp_path, config=TOY)
    assert len(loaded) == len(store)
    assert loaded.total_bytes == store.total_bytes
    for k in store.keys():
        a, b = store.fetch(k), loaded.fetch(k)
        if k.kind == KIND_KV:
            assert np.array_equal(a.k, b.k) and np.array_equal(a.v, b.v)
        else:
            assert np.array_equal(a.hidden, b.hidden)


def test_snapshot_rejects_unknown_version(tmp_path):
    store = CacheStore()
    store.save_snapshot(tmp_path)
    index = tmp_path / "index.json"
    index.write_text(index.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(SchemaError):
        CacheStore.load_snapshot(tmp_path)
