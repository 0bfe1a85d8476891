"""Content-addressed store for per-layer KV and E caches.

Entries are keyed by (context digest, model id, layer, kind).  Profiling mode
keeps E caches at every layer so arbitrary recompute groups can be evaluated;
serving mode keeps E only at the active configuration's transition layers,
since a full set of E caches costs more bytes than the KV it would replace.

All stored arrays are copied and marked read-only, so a fetch concurrent with
a store of the same key sees either a miss or the full previous payload,
never a torn value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CapacityError, SchemaError
from .model import ECache, LayerKV, ModelConfig, PrefillResult, RecomputeConfig

__all__ = [
    "ContextId",
    "CacheKey",
    "KVSlice",
    "CacheStore",
    "context_hash",
    "store_prefill",
    "fetch_context_caches",
    "HASH_FN",
    "KIND_KV",
    "KIND_E",
]

KIND_KV = "kv"
KIND_E = "e"

# Token ids serialized as little-endian uint32, hashed with 128-bit blake2b.
HASH_FN = "blake2b-128/u32le"

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ContextId:
    digest: str

    def __str__(self) -> str:
        return self.digest


def context_hash(tokens) -> ContextId:
    """Stable 128-bit digest of a token-id sequence."""
    import hashlib

    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= 2**32):
        raise ValueError("token ids must fit in uint32 for hashing")
    raw = ids.astype("<u4").tobytes()
    return ContextId(hashlib.blake2b(raw, digest_size=16).hexdigest())


@dataclass(frozen=True)
class CacheKey:
    context: ContextId
    model: str
    layer: int
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in (KIND_KV, KIND_E):
            raise ValueError(f"unknown cache kind {self.kind!r}")
        if self.layer < 0:
            raise ValueError("layer index must be non-negative")


@dataclass(frozen=True, eq=False)
class KVSlice:
    """One layer's K/V over some positions, shape [n_kv_heads, positions, head_dim]."""

    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.k.shape != self.v.shape or self.k.ndim != 3:
            raise ValueError(f"inconsistent KV slice shapes {self.k.shape} / {self.v.shape}")

    @property
    def positions(self) -> int:
        return self.k.shape[1]

    @property
    def nbytes(self) -> int:
        return int(self.k.nbytes + self.v.nbytes)


def _payload_bytes(payload) -> int:
    if isinstance(payload, KVSlice):
        return payload.nbytes
    if isinstance(payload, ECache):
        return payload.nbytes
    raise TypeError(f"unsupported payload type {type(payload).__name__}")


def _frozen_copy(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float32, copy=True)
    out.setflags(write=False)
    return out


def _payload_equal(a, b) -> bool:
    if isinstance(a, KVSlice) and isinstance(b, KVSlice):
        return a.k.shape == b.k.shape and np.array_equal(a.k, b.k) and np.array_equal(a.v, b.v)
    if isinstance(a, ECache) and isinstance(b, ECache):
        return a.layer == b.layer and a.hidden.shape == b.hidden.shape and np.array_equal(a.hidden, b.hidden)
    return False


class CacheStore:
    """In-memory layer-granular cache store with optional byte bound.

    ``mode`` is "profiling" (E accepted at every layer) or "serving" (E kept
    only at ``transition_layers``; other E stores are dropped and report zero
    bytes).  With ``capacity_bytes`` set, least-recently-fetched entries are
    evicted to make room; a payload larger than the whole bound raises
    :class:`CapacityError`.
    """

    def __init__(
        self,
        mode: str = "profiling",
        transition_layers: Iterable[int] = (),
        capacity_bytes: int | None = None,
        config: ModelConfig | None = None,
    ):
        if mode not in ("profiling", "serving"):
            raise ValueError(f"unknown store mode {mode!r}")
        self.mode = mode
        self.transition_layers = frozenset(int(l) for l in transition_layers)
        self.capacity_bytes = capacity_bytes
        self.config = config
        self._entries: dict[CacheKey, object] = {}
        self._sizes: dict[CacheKey, int] = {}
        self._stamp: dict[CacheKey, int] = {}
        self._clock = 0

    # -- internals ---------------------------------------------------------

    def _touch(self, key: CacheKey) -> None:
        self._clock += 1
        self._stamp[key] = self._clock

    def _validate(self, key: CacheKey, payload) -> None:
        if key.kind == KIND_KV and not isinstance(payload, KVSlice):
            raise ValueError(f"kind {KIND_KV!r} requires a KVSlice payload")
        if key.kind == KIND_E:
            if not isinstance(payload, ECache):
                raise ValueError(f"kind {KIND_E!r} requires an ECache payload")
            if payload.layer != key.layer:
                raise ValueError(
                    f"E payload for layer {payload.layer} stored under layer {key.layer}"
                )
        cfg = self.config
        if cfg is None:
            return
        if key.layer >= cfg.n_layers:
            raise ValueError(f"layer {key.layer} out of range for {cfg.n_layers} layers")
        if isinstance(payload, KVSlice):
            if payload.k.shape[0] != cfg.n_kv_heads or payload.k.shape[2] != cfg.head_dim:
                raise ValueError(
                    f"KV slice shape {payload.k.shape} inconsistent with "
                    f"(n_kv_heads={cfg.n_kv_heads}, head_dim={cfg.head_dim})"
                )
        else:
            if payload.hidden.shape[1] != cfg.d_model:
                raise ValueError(
                    f"E cache width {payload.hidden.shape[1]} != d_model {cfg.d_model}"
                )

    def _make_room(self, incoming: int) -> None:
        cap = self.capacity_bytes
        if cap is None:
            return
        if incoming > cap:
            raise CapacityError(
                f"payload of {incoming} bytes exceeds store capacity {cap}; eviction refused"
            )
        while self.total_bytes + incoming > cap:
            victim = min(self._stamp, key=self._stamp.__getitem__)
            del self._entries[victim]
            del self._sizes[victim]
            del self._stamp[victim]

    # -- public API --------------------------------------------------------

    def store(self, key: CacheKey, payload) -> int:
        """Store a payload; returns bytes held for the key (0 if filtered)."""
        self._validate(key, payload)
        if key.kind == KIND_E and self.mode == "serving" and key.layer not in self.transition_layers:
            return 0
        size = _payload_bytes(payload)
        existing = self._entries.get(key)
        if existing is not None and _payload_equal(existing, payload):
            self._touch(key)
            return size
        if existing is not None:
            del self._entries[key]
            del self._sizes[key]
            del self._stamp[key]
        self._make_room(size)
        if isinstance(payload, KVSlice):
            frozen = KVSlice(_frozen_copy(payload.k), _frozen_copy(payload.v))
        else:
            frozen = ECache(payload.layer, _frozen_copy(payload.hidden))
        self._entries[key] = frozen
        self._sizes[key] = size
        self._touch(key)
        return size

    def fetch(self, key: CacheKey):
        """Return the stored payload or None (a miss is a value, not an error)."""
        payload = self._entries.get(key)
        if payload is not None:
            self._touch(key)
        return payload

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def keys(self) -> list[CacheKey]:
        return list(self._entries)

    @property
    def total_bytes(self) -> int:
        return sum(self._sizes.values())

    # -- snapshots ---------------------------------------------------------

    def save_snapshot(self, directory: str | Path) -> None:
        """Write binary blobs plus an index file mapping keys to blob paths.

        Blobs are row-major little-endian float32; KV blobs hold K then V.
        """
        root = Path(directory)
        blobs = root / "blobs"
        blobs.mkdir(parents=True, exist_ok=True)
        entries = []
        ordered = sorted(
            self._entries.items(),
            key=lambda kv: (kv[0].context.digest, kv[0].model, kv[0].layer, kv[0].kind),
        )
        for idx, (key, payload) in enumerate(ordered):
            name = f"blob{idx:05d}.bin"
            if isinstance(payload, KVSlice):
                raw = payload.k.astype("<f4").tobytes() + payload.v.astype("<f4").tobytes()
                shape = list(payload.k.shape)
            else:
                raw = payload.hidden.astype("<f4").tobytes()
                shape = list(payload.hidden.shape)
            (blobs / name).write_bytes(raw)
            entries.append(
                {
                    "context": key.context.digest,
                    "model": key.model,
                    "layer": key.layer,
                    "kind": key.kind,
                    "path": f"blobs/{name}",
                    "bytes": self._sizes[key],
                    "shape": shape,
                }
            )
        index = {
            "version": SNAPSHOT_VERSION,
            "hash_fn": HASH_FN,
            "mode": self.mode,
            "transition_layers": sorted(self.transition_layers),
            "entries": entries,
        }
        (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_snapshot(cls, directory: str | Path, config: ModelConfig | None = None) -> "CacheStore":
        root = Path(directory)
        index_path = root / "index.json"
        try:
            index = json.loads(index_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(str(index_path), "<file>", f"unreadable index: {exc}") from exc
        if index.get("version") != SNAPSHOT_VERSION:
            raise SchemaError(str(index_path), "version",
                              f"unsupported version {index.get('version')!r}")
        store = cls(
            mode=index.get("mode", "profiling"),
            transition_layers=index.get("transition_layers", ()),
            config=config,
        )
        for entry in index.get("entries", []):
            key = CacheKey(
                ContextId(entry["context"]), entry["model"], int(entry["layer"]), entry["kind"]
            )
            raw = (root / entry["path"]).read_bytes()
            shape = tuple(entry["shape"])
            if key.kind == KIND_KV:
                flat = np.frombuffer(raw, dtype="<f4")
                half = flat.size // 2
                payload = KVSlice(
                    flat[:half].reshape(shape).astype(np.float32),
                    flat[half:].reshape(shape).astype(np.float32),
                )
            else:
                payload = ECache(key.layer, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
            got = store.store(key, payload)
            if got != entry["bytes"]:
                raise SchemaError(str(index_path), "bytes",
                                  f"blob {entry['path']} holds {got} bytes, index says {entry['bytes']}")
        return store


# ---------------------------------------------------------------------------
# Prefill integration
# ---------------------------------------------------------------------------


def store_prefill(
    store: CacheStore,
    model_id: str,
    tokens,
    prefill: PrefillResult,
) -> int:
    """Store a sender prefill: KV at every layer, E per the store's mode.

    Returns the total bytes accepted.  In serving mode only transition-layer
    E caches survive; in profiling mode every layer's E is kept.
    """
    ctx = context_hash(tokens)
    total = 0
    for layer in range(prefill.kv.n_layers):
        payload = KVSlice(prefill.kv.k[layer], prefill.kv.v[layer])
        total += store.store(CacheKey(ctx, model_id, layer, KIND_KV), payload)
    for e in prefill.e_caches:
        total += store.store(CacheKey(ctx, model_id, e.layer, KIND_E), e)
    return total


def fetch_context_caches(
    store: CacheStore,
    model_id: str,
    tokens,
    config: RecomputeConfig,
    n_layers: int,
):
    """Assemble the sender-side inputs a partial prefill needs, or raise.

    Returns (LayerKV over the reused layers' stored positions, {layer: ECache}
    for each transition layer).  Missing entries raise
    :class:`~crosskv.errors.CacheMissError`.
    """
    from .errors import CacheMissError

    ctx = context_hash(tokens)
    covered = config.layer_set()
    slices: dict[int, KVSlice] = {}
    for layer in range(n_layers):
        if layer in covered:
            continue
        payload = store.fetch(CacheKey(ctx, model_id, layer, KIND_KV))
        if payload is None:
            raise CacheMissError(layer, KIND_KV, f"model {model_id}, context {ctx}")
        slices[layer] = payload

    e_map: dict[int, ECache] = {}
    for layer in config.transition_layers:
        payload = store.fetch(CacheKey(ctx, model_id, layer, KIND_E))
        if payload is None:
            raise CacheMissError(layer, KIND_E, f"model {model_id}, context {ctx}")
        e_map[layer] = payload

    if slices:
        positions = min(s.positions for s in slices.values())
        any_slice = next(iter(slices.values()))
        k = np.zeros((n_layers, any_slice.k.shape[0], positions, any_slice.k.shape[2]), dtype=np.float32)
        v = np.zeros_like(k)
        for layer, s in slices.items():
            k[layer] = s.k[:, :positions]
            v[layer] = s.v[:, :positions]
        kv = LayerKV(k, v)
    else:
        kv = None
    return kv, e_map
