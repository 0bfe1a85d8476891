"""Deterministic toy transformer engine with cross-model cache reuse.

The engine is deliberately small: weights are generated from seeds, all math
is float32 numpy, and every operation is a pure function of its inputs.  It
keeps the structure that matters for sharing caches between two related
models:

* a decoder-only stack with grouped-query attention and rotary positions,
  producing per-layer K/V caches and per-layer input hidden states
  (the "E cache") during prefill;
* partial prefill that reuses another model's K/V for some layers and
  recomputes contiguous layer groups, seeding each group that starts above
  layer 0 from the other model's E cache at that layer;
* greedy decode over the resulting mixed cache, and a token-agreement score
  against the receiver's own full prefill.

A "variant" model is the base model plus seeded per-layer noise, standing in
for a fine-tune: layers with nonzero noise are exactly the layers whose
caches stop being interchangeable between the pair.

Prefill convention: the reuse window covers positions ``0 .. n-2``; the final
input position (the anchor) is always run through all layers by the local
model so the first generated token reflects its own weights end to end.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CacheMissError, DegenerateInputError

__all__ = [
    "ModelConfig",
    "PerturbationSpec",
    "RecomputeConfig",
    "ModelWeights",
    "LayerKV",
    "ECache",
    "PrefillResult",
    "MixedPrefill",
    "Agreement",
    "build_model",
    "full_prefill",
    "partial_prefill",
    "token_selective_prefill",
    "decode_greedy",
    "agreement_score",
    "greedy_agreement",
    "check_tokens",
    "read_token_file",
    "make_synthetic_dataset",
]

_F32 = np.float32
_ROPE_BASE = 10000.0
_NORM_EPS = _F32(1e-6)


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy decoder-only model.

    ``d_model`` must equal ``n_heads * head_dim`` and ``n_kv_heads`` must
    divide ``n_heads`` (grouped-query attention).  ``max_seq`` of at least 2
    is required so a reuse window of one position exists.
    """

    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_seq: int
    base_seed: int

    def __post_init__(self) -> None:
        counts = {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.n_heads % self.n_kv_heads:
            raise ValueError(
                f"n_kv_heads ({self.n_kv_heads}) must divide n_heads ({self.n_heads})"
            )
        if self.max_seq < 2:
            raise ValueError("max_seq must be at least 2")
        if self.base_seed < 0:
            raise ValueError("base_seed must be a non-negative 64-bit integer")

    @property
    def kv_bytes_per_position(self) -> int:
        """Stored K+V bytes for one layer and one position (float32)."""
        return 2 * self.n_kv_heads * self.head_dim * 4

    @property
    def e_bytes_per_position(self) -> int:
        """Stored hidden-state bytes for one layer and one position."""
        return self.d_model * 4


@dataclass(frozen=True)
class PerturbationSpec:
    """Per-layer noise magnitudes that turn the base model into a variant.

    ``eps`` holds one non-negative magnitude per layer; a layer with
    ``eps[l] == 0`` keeps weights bitwise identical to the base model.
    """

    eps: tuple[float, ...]
    noise_seed: int

    def __init__(self, eps: Sequence[float], noise_seed: int):
        object.__setattr__(self, "eps", tuple(float(e) for e in eps))
        object.__setattr__(self, "noise_seed", int(noise_seed))
        if any(e < 0 for e in self.eps):
            raise ValueError("perturbation magnitudes must be non-negative")
        if self.noise_seed < 0:
            raise ValueError("noise_seed must be a non-negative 64-bit integer")

    @classmethod
    def block(cls, n_layers: int, layers: Iterable[int], eps: float, noise_seed: int) -> "PerturbationSpec":
        """Perturbation concentrated on the given layers, zeros elsewhere."""
        vec = [0.0] * n_layers
        for l in layers:
            vec[l] = eps
        return cls(vec, noise_seed)


@dataclass(frozen=True)
class RecomputeConfig:
    """Disjoint, sorted, inclusive layer ranges to recompute.

    Construction normalizes the ranges: they are sorted, and touching or
    overlapping ranges are merged, so the stored form is always disjoint and
    non-adjacent.  The empty config means full reuse.
    """

    groups: tuple[tuple[int, int], ...]

    def __init__(self, groups: Iterable[Sequence[int]] = ()):
        norm: list[list[int]] = []
        for rng in sorted((int(a), int(b)) for a, b in groups):
            a, b = rng
            if a > b:
                raise ValueError(f"range [{a},{b}] is reversed")
            if a < 0:
                raise ValueError(f"range [{a},{b}] has a negative start")
            if norm and a <= norm[-1][1] + 1:
                norm[-1][1] = max(norm[-1][1], b)
            else:
                norm.append([a, b])
        object.__setattr__(self, "groups", tuple((a, b) for a, b in norm))

    @classmethod
    def full(cls, n_layers: int) -> "RecomputeConfig":
        return cls([(0, n_layers - 1)])

    @classmethod
    def none(cls) -> "RecomputeConfig":
        return cls()

    @property
    def recomputed_layer_count(self) -> int:
        return sum(b - a + 1 for a, b in self.groups)

    @property
    def transition_layers(self) -> tuple[int, ...]:
        """Group starts above layer 0; the layers whose E cache is needed."""
        return tuple(a for a, _ in self.groups if a > 0)

    def layer_set(self) -> frozenset[int]:
        return frozenset(l for a, b in self.groups for l in range(a, b + 1))

    def reused_layers(self, n_layers: int) -> tuple[int, ...]:
        covered = self.layer_set()
        return tuple(l for l in range(n_layers) if l not in covered)

    def validate_for(self, n_layers: int) -> None:
        if self.groups and self.groups[-1][1] > n_layers - 1:
            raise ValueError(
                f"config {self.groups} exceeds layer range [0,{n_layers - 1}]"
            )

    def is_full(self, n_layers: int) -> bool:
        return self.groups == ((0, n_layers - 1),)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    g_attn: np.ndarray
    g_mlp: np.ndarray

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2, self.g_attn, self.g_mlp)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Immutable weight set; safe to share across concurrent readers."""

    config: ModelConfig
    embed: np.ndarray
    layers: tuple[LayerWeights, ...]
    g_final: np.ndarray
    unembed: np.ndarray
    ident: str


# Tensor slots, in generation order.  The tags keep per-tensor RNG streams
# independent so perturbing one layer cannot shift another layer's values.
_LAYER_SLOTS = ("wq", "wk", "wv", "wo", "w1", "w2", "g_attn", "g_mlp")


def _base_tensor(cfg: ModelConfig, tags: Sequence[int], shape: tuple[int, ...], std: float) -> np.ndarray:
    rng = np.random.default_rng([cfg.base_seed, *tags])
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(_F32)


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], float]]:
    d, dff = cfg.d_model, cfg.d_ff
    q_dim = cfg.n_heads * cfg.head_dim
    kv_dim = cfg.n_kv_heads * cfg.head_dim
    s = 1.0 / math.sqrt(d)
    return {
        "wq": ((d, q_dim), s),
        "wk": ((d, kv_dim), s),
        "wv": ((d, kv_dim), s),
        "wo": ((q_dim, d), s),
        "w1": ((d, dff), s),
        "w2": ((dff, d), 1.0 / math.sqrt(dff)),
        "g_attn": ((d,), 0.0),
        "g_mlp": ((d,), 0.0),
    }


def _model_ident(cfg: ModelConfig, pert: PerturbationSpec | None) -> str:
    payload = {
        "config": [cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.n_kv_heads,
                   cfg.head_dim, cfg.d_ff, cfg.vocab_size, cfg.base_seed],
        "eps": list(pert.eps) if pert else None,
        "noise_seed": pert.noise_seed if pert else None,
    }
    digest = hashlib.blake2b(
        json.dumps(payload, sort_keys=True).encode(), digest_size=6
    ).hexdigest()
    kind = "base" if pert is None or not any(pert.eps) else "var"
    return f"m{cfg.base_seed:x}-{kind}-{digest}"


def build_model(config: ModelConfig, perturbation: PerturbationSpec | None = None) -> ModelWeights:
    """Generate deterministic weights; with a perturbation, a variant model.

    Noise is additive Gaussian scaled by ``eps[l]`` and by each tensor's RMS,
    drawn from per-(layer, tensor) streams of ``noise_seed``, so layers with
    ``eps[l] == 0`` stay bitwise equal to the base model.
    """
    if perturbation is not None and len(perturbation.eps) != config.n_layers:
        raise ValueError(
            f"perturbation has {len(perturbation.eps)} entries for "
            f"{config.n_layers} layers"
        )

    embed = _base_tensor(config, (0, 0), (config.vocab_size, config.d_model), 1.0)
    unembed = _base_tensor(config, (0, 1), (config.d_model, config.vocab_size),
                           1.0 / math.sqrt(config.d_model))
    g_final = np.ones(config.d_model, dtype=_F32)

    shapes = _layer_shapes(config)
    layers = []
    for l in range(config.n_layers):
        tensors = {}
        for slot_idx, name in enumerate(_LAYER_SLOTS):
            shape, std = shapes[name]
            if name.startswith("g_"):
                w = np.ones(shape, dtype=_F32)
            else:
                w = _base_tensor(config, (1, l, slot_idx), shape, std)
            eps = perturbation.eps[l] if perturbation is not None else 0.0
            if eps > 0.0:
                rms = float(np.sqrt(np.mean(np.square(w, dtype=np.float64))))
                noise_rng = np.random.default_rng([perturbation.noise_seed, 2, l, slot_idx])
                noise = noise_rng.standard_normal(shape, dtype=np.float64) * (eps * rms)
                w = (w + noise.astype(_F32)).astype(_F32)
            w.setflags(write=False)
            tensors[name] = w
        layers.append(LayerWeights(**tensors))

    for arr in (embed, unembed, g_final):
        arr.setflags(write=False)
    return ModelWeights(
        config=config,
        embed=embed,
        layers=tuple(layers),
        g_final=g_final,
        unembed=unembed,
        ident=_model_ident(config, perturbation),
    )


# ---------------------------------------------------------------------------
# Caches and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerKV:
    """Per-layer key/value tensors, shape [L, n_kv_heads, positions, head_dim]."""

    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise ValueError(f"inconsistent KV shapes {self.k.shape} / {self.v.shape}")
        self.k.setflags(write=False)
        self.v.setflags(write=False)

    @property
    def n_layers(self) -> int:
        return self.k.shape[0]

    @property
    def positions(self) -> int:
        return self.k.shape[2]

    def window(self, positions: int) -> "LayerKV":
        """Prefix slice; valid because causal attention never looks ahead."""
        if positions > self.positions:
            raise ValueError(f"cannot slice {positions} of {self.positions} positions")
        return LayerKV(self.k[:, :, :positions], self.v[:, :, :positions])

    def layer_bytes(self, layer: int) -> int:
        return int(self.k[layer].nbytes + self.v[layer].nbytes)


@dataclass(frozen=True, eq=False)
class ECache:
    """Input hidden states entering one layer, shape [positions, d_model]."""

    layer: int
    hidden: np.ndarray

    def __post_init__(self) -> None:
        if self.hidden.ndim != 2:
            raise ValueError(f"E cache must be 2-D, got shape {self.hidden.shape}")
        self.hidden.setflags(write=False)

    @property
    def positions(self) -> int:
        return self.hidden.shape[0]

    @property
    def nbytes(self) -> int:
        return int(self.hidden.nbytes)


@dataclass(frozen=True, eq=False)
class PrefillResult:
    kv: LayerKV
    e_caches: tuple[ECache, ...]
    logits: np.ndarray

    def e_map(self) -> dict[int, ECache]:
        return {e.layer: e for e in self.e_caches}


@dataclass(frozen=True, eq=False)
class MixedPrefill:
    kv: LayerKV
    logits: np.ndarray


@dataclass(frozen=True)
class Agreement:
    """Greedy-token agreement between a mixed-cache decode and the reference."""

    score: float
    first_divergence: int | None
    reference: tuple[int, ...]
    candidate: tuple[int, ...]


# ---------------------------------------------------------------------------
# Token sequences
# ---------------------------------------------------------------------------


def check_tokens(tokens: Sequence[int] | np.ndarray, config: ModelConfig) -> np.ndarray:
    """Validate and canonicalize a token sequence to an int64 array."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("token sequence must be one-dimensional")
    n = ids.shape[0]
    if n < 2:
        raise DegenerateInputError(f"need at least 2 tokens, got {n}")
    if n > config.max_seq:
        raise ValueError(f"sequence length {n} exceeds max_seq {config.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id out of vocabulary range")
    return ids


def read_token_file(path: str) -> np.ndarray:
    """Read a newline-delimited integer-id token file."""
    ids = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                ids.append(int(text))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: not an integer token id: {text!r}") from exc
    return np.asarray(ids, dtype=np.int64)


def make_synthetic_dataset(seed: int, size: int, length: int, vocab_size: int) -> list[np.ndarray]:
    """Seeded random token sequences, the default profiling corpus."""
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab_size, size=length, dtype=np.int64) for _ in range(size)]


# ---------------------------------------------------------------------------
# Forward math
# ---------------------------------------------------------------------------


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + _NORM_EPS) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (_F32(1.0) + np.exp(-x))


def _rope_angles(cfg: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.head_dim // 2
    inv_freq = _ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(ang).astype(_F32), np.sin(ang).astype(_F32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [P, heads, head_dim]; cos/sin: [P, head_dim//2]
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos[:, None, :]
    s = sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def _grouped_scores(q: np.ndarray, k: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    # q: [P, H, D] -> [G, R, P, T] scores against k: [G, T, D]
    P = q.shape[0]
    G = cfg.n_kv_heads
    R = cfg.n_heads // G
    qg = q.reshape(P, G, R, cfg.head_dim)
    return np.einsum("pgrd,gtd->grpt", qg, k) * _F32(1.0 / math.sqrt(cfg.head_dim))


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    w = np.exp(scores - m)
    return w / w.sum(axis=-1, keepdims=True)


def _masked_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    allowed: np.ndarray,
    cfg: ModelConfig,
) -> np.ndarray:
    """Attention for queries q over keys k/v with a [P, T] visibility mask."""
    P = q.shape[0]
    scores = _grouped_scores(q, k, cfg)
    scores = np.where(allowed[None, None, :, :], scores, _F32(-np.inf))
    w = _softmax_last(scores)
    out = np.einsum("grpt,gtd->pgrd", w, v)
    return out.reshape(P, cfg.n_heads * cfg.head_dim)


def _project_qkv(h: np.ndarray, lw: LayerWeights, cfg: ModelConfig, positions: np.ndarray):
    a = _rms_norm(h, lw.g_attn)
    P = h.shape[0]
    q = (a @ lw.wq).reshape(P, cfg.n_heads, cfg.head_dim)
    k = (a @ lw.wk).reshape(P, cfg.n_kv_heads, cfg.head_dim)
    v = (a @ lw.wv).reshape(P, cfg.n_kv_heads, cfg.head_dim)
    cos, sin = _rope_angles(cfg, positions)
    return _apply_rope(q, cos, sin), _apply_rope(k, cos, sin), v


def _mlp(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return _silu(_rms_norm(x, lw.g_mlp) @ lw.w1) @ lw.w2


def _layer_window(h: np.ndarray, lw: LayerWeights, cfg: ModelConfig, causal: np.ndarray):
    """One pre-norm block over a self-contained window starting at position 0."""
    P = h.shape[0]
    q, k, v = _project_qkv(h, lw, cfg, np.arange(P))
    kt = np.ascontiguousarray(k.transpose(1, 0, 2))
    vt = np.ascontiguousarray(v.transpose(1, 0, 2))
    attn = _masked_attention(q, kt, vt, causal, cfg)
    x = h + attn @ lw.wo
    return x + _mlp(x, lw), kt, vt


def _layer_single(
    h: np.ndarray,
    lw: LayerWeights,
    cfg: ModelConfig,
    k_ctx: np.ndarray,
    v_ctx: np.ndarray,
    position: int,
):
    """One block for a single position attending over the context plus itself."""
    q, k_own, v_own = _project_qkv(h[None, :], lw, cfg, np.array([position]))
    k_full = np.concatenate([k_ctx, k_own.transpose(1, 0, 2)], axis=1)
    v_full = np.concatenate([v_ctx, v_own.transpose(1, 0, 2)], axis=1)
    allowed = np.ones((1, k_full.shape[1]), dtype=bool)
    attn = _masked_attention(q, k_full, v_full, allowed, cfg)
    x = h + (attn @ lw.wo)[0]
    return x + _mlp(x, lw), k_own[0], v_own[0]


def _final_logits(h: np.ndarray, model: ModelWeights) -> np.ndarray:
    return _rms_norm(h, model.g_final) @ model.unembed


# ---------------------------------------------------------------------------
# Prefill
# ---------------------------------------------------------------------------


def _mixed_prefill(
    model: ModelWeights,
    ids: np.ndarray,
    config: RecomputeConfig,
    sender_kv: LayerKV | None,
    sender_e: Mapping[int, ECache],
    record_e: bool,
):
    cfg = model.config
    L = cfg.n_layers
    n = ids.shape[0]
    window = n - 1

    k_all = np.empty((L, cfg.n_kv_heads, n, cfg.head_dim), dtype=_F32)
    v_all = np.empty_like(k_all)

    covered = config.layer_set()
    for l in range(L):
        if l in covered:
            continue
        if sender_kv is None:
            raise CacheMissError(l, "kv", "no sender KV cache supplied")
        if sender_kv.n_layers <= l:
            raise CacheMissError(l, "kv", f"sender cache has {sender_kv.n_layers} layers")
        if sender_kv.positions < window:
            raise CacheMissError(
                l, "kv", f"sender cache has {sender_kv.positions} positions, need {window}"
            )
        k_all[l, :, :window] = sender_kv.k[l, :, :window]
        v_all[l, :, :window] = sender_kv.v[l, :, :window]

    causal = np.tril(np.ones((window, window), dtype=bool))
    e_out: list[np.ndarray | None] = [None] * L
    for a, b in config.groups:
        if a == 0:
            h = model.embed[ids[:window]]
        else:
            e = sender_e.get(a)
            if e is None:
                raise CacheMissError(a, "e", "transition layer E cache not supplied")
            if e.positions < window:
                raise CacheMissError(a, "e", f"E cache has {e.positions} positions, need {window}")
            if e.hidden.shape[1] != cfg.d_model:
                raise CacheMissError(a, "e", f"E cache width {e.hidden.shape[1]} != d_model")
            h = e.hidden[:window]
        for l in range(a, b + 1):
            if record_e:
                e_out[l] = h
            h, kt, vt = _layer_window(h, model.layers[l], cfg, causal)
            k_all[l, :, :window] = kt
            v_all[l, :, :window] = vt
        # hidden output beyond the group's last layer is discarded

    # Anchor pass: the final input position runs through every layer locally,
    # attending over the mixed window plus itself, and lands in the cache.
    h_a = model.embed[ids[window]]
    for l in range(L):
        h_a, k_own, v_own = _layer_single(
            h_a, model.layers[l], cfg, k_all[l, :, :window], v_all[l, :, :window], window
        )
        k_all[l, :, window] = k_own
        v_all[l, :, window] = v_own

    logits = _final_logits(h_a, model)
    return LayerKV(k_all, v_all), e_out, logits


def full_prefill(model: ModelWeights, tokens: Sequence[int] | np.ndarray) -> PrefillResult:
    """Process the whole input: per-layer K/V over all positions, per-layer E
    over the reuse window, and final-position logits."""
    ids = check_tokens(tokens, model.config)
    kv, e_out, logits = _mixed_prefill(
        model, ids, RecomputeConfig.full(model.config.n_layers), None, {}, record_e=True
    )
    e_caches = tuple(ECache(l, h) for l, h in enumerate(e_out))
    return PrefillResult(kv=kv, e_caches=e_caches, logits=logits)


def _normalize_e(sender_e: Mapping[int, ECache] | Iterable[ECache] | None) -> dict[int, ECache]:
    if sender_e is None:
        return {}
    if isinstance(sender_e, Mapping):
        return dict(sender_e)
    return {e.layer: e for e in sender_e}


def partial_prefill(
    receiver: ModelWeights,
    tokens: Sequence[int] | np.ndarray,
    config: RecomputeConfig,
    sender_kv: LayerKV | None,
    sender_e: Mapping[int, ECache] | Iterable[ECache] | None = None,
) -> MixedPrefill:
    """Prefill reusing sender K/V outside the config's groups.

    Each group recomputes its layers over the reuse window with receiver
    weights, seeded from token embeddings (group start 0) or the sender's E
    cache at the transition layer.  The anchor position then runs through all
    layers, so the returned cache covers every input position.
    """
    ids = check_tokens(tokens, receiver.config)
    config.validate_for(receiver.config.n_layers)
    kv, _, logits = _mixed_prefill(
        receiver, ids, config, sender_kv, _normalize_e(sender_e), record_e=False
    )
    return MixedPrefill(kv=kv, logits=logits)


def token_selective_prefill(
    receiver: ModelWeights,
    tokens: Sequence[int] | np.ndarray,
    sender_kv: LayerKV,
    ratio: float,
) -> MixedPrefill:
    """Baseline that recomputes the most-deviant positions at every layer.

    Deviation per position is the L2 distance between the receiver's exact
    layer-0 K/V and the sender's; the top ``ceil(ratio * window)`` positions
    (ties to the lowest index) are recomputed through the whole stack while
    the rest keep sender K/V everywhere.
    """
    cfg = receiver.config
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    ids = check_tokens(tokens, cfg)
    n = ids.shape[0]
    window = n - 1
    L = cfg.n_layers
    if sender_kv.n_layers < L:
        raise CacheMissError(sender_kv.n_layers, "kv", "sender cache missing layers")
    if sender_kv.positions < window:
        raise CacheMissError(0, "kv", f"sender cache has {sender_kv.positions} positions, need {window}")

    emb = receiver.embed[ids[:window]]
    _, k0, v0 = _project_qkv(emb, receiver.layers[0], cfg, np.arange(window))
    k0t = k0.transpose(1, 0, 2)
    v0t = v0.transpose(1, 0, 2)
    dk = np.sqrt(np.sum((k0t - sender_kv.k[0, :, :window]) ** 2, axis=(0, 2)))
    dv = np.sqrt(np.sum((v0t - sender_kv.v[0, :, :window]) ** 2, axis=(0, 2)))
    deviation = dk + dv

    n_sel = int(math.ceil(ratio * window))
    order = np.argsort(-deviation, kind="stable")  # ties resolve to lowest position
    selected = np.sort(order[:n_sel])

    k_all = np.empty((L, cfg.n_kv_heads, n, cfg.head_dim), dtype=_F32)
    v_all = np.empty_like(k_all)
    k_all[:, :, :window] = sender_kv.k[:, :, :window]
    v_all[:, :, :window] = sender_kv.v[:, :, :window]

    allowed = np.arange(window)[None, :] <= selected[:, None]  # causal over the window
    hs = emb[selected]
    for l in range(L):
        lw = receiver.layers[l]
        q, k_sel, v_sel = _project_qkv(hs, lw, cfg, selected)
        k_all[l][:, selected] = k_sel.transpose(1, 0, 2)
        v_all[l][:, selected] = v_sel.transpose(1, 0, 2)
        attn = _masked_attention(q, k_all[l, :, :window], v_all[l, :, :window], allowed, cfg)
        x = hs + attn @ lw.wo
        hs = x + _mlp(x, lw)

    h_a = receiver.embed[ids[window]]
    for l in range(L):
        h_a, k_own, v_own = _layer_single(
            h_a, receiver.layers[l], cfg, k_all[l, :, :window], v_all[l, :, :window], window
        )
        k_all[l, :, window] = k_own
        v_all[l, :, window] = v_own

    return MixedPrefill(kv=LayerKV(k_all, v_all), logits=_final_logits(h_a, receiver))


# ---------------------------------------------------------------------------
# Decode and agreement
# ---------------------------------------------------------------------------


def decode_greedy(
    model: ModelWeights,
    cache: LayerKV,
    last_logits: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Greedy decode; ties break to the lowest token id.

    The cache grows by one position per step internally; the input cache is
    never mutated.
    """
    cfg = model.config
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if cache.positions < 1:
        raise ValueError("cache must hold at least one position")
    if cache.positions + steps > cfg.max_seq:
        raise ValueError(
            f"decoding {steps} steps from {cache.positions} positions exceeds "
            f"max_seq {cfg.max_seq}"
        )

    ks = [cache.k[l] for l in range(cfg.n_layers)]
    vs = [cache.v[l] for l in range(cfg.n_layers)]
    pos = cache.positions
    logits = last_logits
    out = np.empty(steps, dtype=np.int64)
    for step in range(steps):
        token = int(np.argmax(logits))  # np.argmax returns the first (lowest) max index
        out[step] = token
        h = model.embed[token]
        for l in range(cfg.n_layers):
            h, k_own, v_own = _layer_single(h, model.layers[l], cfg, ks[l], vs[l], pos)
            ks[l] = np.concatenate([ks[l], k_own[:, None, :]], axis=1)
            vs[l] = np.concatenate([vs[l], v_own[:, None, :]], axis=1)
        pos += 1
        logits = _final_logits(h, model)
    return out


def greedy_agreement(
    reference: np.ndarray,
    candidate: np.ndarray,
) -> Agreement:
    """Positionwise agreement of two greedy token streams."""
    ref = np.asarray(reference)
    cand = np.asarray(candidate)
    if ref.shape != cand.shape:
        raise ValueError("token streams must have equal length")
    matches = ref == cand
    diverged = np.flatnonzero(~matches)
    return Agreement(
        score=float(np.mean(matches)),
        first_divergence=int(diverged[0]) if diverged.size else None,
        reference=tuple(int(t) for t in ref),
        candidate=tuple(int(t) for t in cand),
    )


def agreement_score(
    sender: ModelWeights,
    receiver: ModelWeights,
    tokens: Sequence[int] | np.ndarray,
    config: RecomputeConfig,
    horizon: int = 32,
) -> Agreement:
    """Agreement of the mixed-cache decode with the receiver's own decode.

    Decodes ``horizon`` greedy tokens from the receiver's full prefill and
    from a partial prefill over the sender's caches, and reports the match
    fraction plus the first index where the streams diverge.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    ids = check_tokens(tokens, receiver.config)
    ref = full_prefill(receiver, ids)
    ref_tokens = decode_greedy(receiver, ref.kv, ref.logits, horizon)
    sent = full_prefill(sender, ids)
    mixed = partial_prefill(receiver, ids, config, sent.kv, sent.e_map())
    cand_tokens = decode_greedy(receiver, mixed.kv, mixed.logits, horizon)
    return greedy_agreement(ref_tokens, cand_tokens)
