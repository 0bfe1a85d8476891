"""Offline search for which contiguous layer groups to recompute.

The profiler enumerates contiguous runs of g-layer blocks (G(G+1)/2 configs
for G = ceil(L/g)), scores each one by mean greedy-token agreement over a
training set, and reduces the scored points to a Pareto frontier: the best
quality attainable per recomputed-layer count, taken as a cumulative max so
quality never decreases in k.  Selection picks the cheapest entry within a
relative quality floor, or the largest entry under a layer budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SchemaError
from .model import (
    ModelWeights,
    RecomputeConfig,
    decode_greedy,
    full_prefill,
    greedy_agreement,
    partial_prefill,
)
from .store import HASH_FN

__all__ = [
    "ProfilePoint",
    "FrontierEntry",
    "ParetoFrontier",
    "PairMeta",
    "ProfileArtifact",
    "enumerate_groups",
    "evaluate_config",
    "run_profile",
    "layer_sensitivity",
    "build_frontier",
    "select_by_quality_floor",
    "select_by_layer_budget",
    "save_profile",
    "load_profile",
    "PROFILE_VERSION",
    "DEFAULT_FLOOR_DELTA",
]

PROFILE_VERSION = 1
DEFAULT_FLOOR_DELTA = 0.05
FRONTIER_RULE = "cumulative-max"


@dataclass(frozen=True)
class ProfilePoint:
    config: RecomputeConfig
    k: int
    quality: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality {self.quality} outside [0, 1]")
        if self.k != self.config.recomputed_layer_count:
            raise ValueError("k must equal the config's recomputed layer count")


@dataclass(frozen=True)
class FrontierEntry:
    k: int
    quality: float
    config: RecomputeConfig


@dataclass(frozen=True)
class ParetoFrontier:
    """Best quality per recomputed-layer count; k strictly increasing,
    quality non-decreasing, terminal entry always recompute-all."""

    entries: tuple[FrontierEntry, ...]
    baseline_quality: float
    floor_delta: float = DEFAULT_FLOOR_DELTA

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("frontier must hold at least the recompute-all entry")
        ks = [e.k for e in self.entries]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"frontier k sequence {ks} is not strictly increasing")
        qs = [e.quality for e in self.entries]
        if any(b < a for a, b in zip(qs, qs[1:])):
            raise ValueError(f"frontier quality sequence {qs} decreases")
        last = self.entries[-1]
        if last.quality != self.baseline_quality:
            raise ValueError("terminal frontier entry must carry the baseline quality")

    @property
    def n_layers(self) -> int:
        return self.entries[-1].k

    def smallest_k_with_quality(self, q_min: float) -> FrontierEntry:
        """Cheapest entry at or above an absolute quality; terminal if none."""
        for entry in self.entries:
            if entry.quality >= q_min:
                return entry
        return self.entries[-1]


def enumerate_groups(n_layers: int, granularity: int) -> list[RecomputeConfig]:
    """All contiguous runs of whole g-blocks: G(G+1)/2 single-group configs."""
    if not 1 <= granularity <= n_layers:
        raise ValueError(f"granularity {granularity} outside [1, {n_layers}]")
    blocks = [
        (start, min(start + granularity, n_layers) - 1)
        for start in range(0, n_layers, granularity)
    ]
    configs = []
    for i in range(len(blocks)):
        for j in range(i, len(blocks)):
            configs.append(RecomputeConfig([(blocks[i][0], blocks[j][1])]))
    return configs


class _PairEvaluator:
    """Caches sender prefills and receiver reference decodes per sequence, so
    a sweep over many configs pays the fixed cost once."""

    def __init__(
        self,
        sender: ModelWeights,
        receiver: ModelWeights,
        train_set: Sequence[np.ndarray],
        horizon: int,
    ):
        if not train_set:
            raise ValueError("training set is empty")
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.sender = sender
        self.receiver = receiver
        self.horizon = horizon
        self._items = []
        for seq in train_set:
            ref = full_prefill(receiver, seq)
            ref_tokens = decode_greedy(receiver, ref.kv, ref.logits, horizon)
            sent = full_prefill(sender, seq)
            self._items.append((np.asarray(seq), sent.kv, sent.e_map(), ref_tokens))

    def quality(self, config: RecomputeConfig) -> float:
        scores = []
        for seq, kv, e_map, ref_tokens in self._items:
            mixed = partial_prefill(self.receiver, seq, config, kv, e_map)
            cand = decode_greedy(self.receiver, mixed.kv, mixed.logits, self.horizon)
            scores.append(greedy_agreement(ref_tokens, cand).score)
        return float(np.mean(scores))


def evaluate_config(
    pair: tuple[ModelWeights, ModelWeights],
    config: RecomputeConfig,
    train_set: Sequence[np.ndarray],
    horizon: int = 32,
) -> ProfilePoint:
    """Mean agreement of one config over the training set."""
    sender, receiver = pair
    ev = _PairEvaluator(sender, receiver, train_set, horizon)
    return ProfilePoint(config=config, k=config.recomputed_layer_count, quality=ev.quality(config))


def run_profile(
    sender: ModelWeights,
    receiver: ModelWeights,
    train_set: Sequence[np.ndarray],
    granularity: int = 2,
    horizon: int = 32,
) -> list[ProfilePoint]:
    """Score every enumerated group config; deterministic assembly order."""
    ev = _PairEvaluator(sender, receiver, train_set, horizon)
    points = [
        ProfilePoint(config=cfg, k=cfg.recomputed_layer_count, quality=ev.quality(cfg))
        for cfg in enumerate_groups(receiver.config.n_layers, granularity)
    ]
    points.sort(key=lambda p: (p.k, p.config.groups[0][0]))
    return points


def layer_sensitivity(
    sender: ModelWeights,
    receiver: ModelWeights,
    train_set: Sequence[np.ndarray],
    horizon: int = 32,
) -> np.ndarray:
    """Per-layer quality drop when only that layer's cache is reused.

    For each layer l the complement config (recompute everything except l) is
    evaluated; the drop is 1 minus its agreement.  Layers whose caches differ
    most between the pair show the largest drops.
    """
    L = receiver.config.n_layers
    ev = _PairEvaluator(sender, receiver, train_set, horizon)
    drops = np.empty(L, dtype=np.float64)
    for l in range(L):
        groups = []
        if l > 0:
            groups.append((0, l - 1))
        if l < L - 1:
            groups.append((l + 1, L - 1))
        drops[l] = 1.0 - ev.quality(RecomputeConfig(groups))
    return drops


def build_frontier(
    points: Sequence[ProfilePoint],
    floor_delta: float = DEFAULT_FLOOR_DELTA,
) -> ParetoFrontier:
    """Cumulative-max frontier over (k, quality) points.

    An entry survives only where the best quality at exactly k beats every
    smaller k; the recompute-all point anchors the tail and defines the
    baseline quality.
    """
    if not points:
        raise ValueError("no profile points")
    n_layers = max(b for p in points for _, b in p.config.groups) + 1
    full = [p for p in points if p.config.is_full(n_layers)]
    if not full:
        raise ValueError("points must include the recompute-all config")
    baseline = max(p.quality for p in full)

    by_k: dict[int, ProfilePoint] = {}
    for p in sorted(points, key=lambda p: (p.k, p.config.groups[0][0])):
        best = by_k.get(p.k)
        if best is None or p.quality > best.quality:
            by_k[p.k] = p

    entries: list[FrontierEntry] = []
    running = -1.0
    for k in sorted(by_k):
        p = by_k[k]
        if p.quality > running:
            running = p.quality
            entries.append(FrontierEntry(k=k, quality=p.quality, config=p.config))
    if running > baseline:
        raise ValueError(
            f"a partial config scored {running}, above the recompute-all baseline {baseline}"
        )
    if not entries or not entries[-1].config.is_full(n_layers):
        entries.append(
            FrontierEntry(k=n_layers, quality=baseline, config=RecomputeConfig.full(n_layers))
        )
    return ParetoFrontier(entries=tuple(entries), baseline_quality=baseline, floor_delta=floor_delta)


def select_by_quality_floor(frontier: ParetoFrontier, delta: float | None = None) -> RecomputeConfig:
    """Cheapest frontier config within a relative drop of the baseline."""
    d = frontier.floor_delta if delta is None else delta
    threshold = (1.0 - d) * frontier.baseline_quality
    for entry in frontier.entries:
        if entry.quality >= threshold:
            return entry.config
    return frontier.entries[-1].config


def select_by_layer_budget(frontier: ParetoFrontier, budget: int) -> RecomputeConfig:
    """Largest frontier config within the layer budget; empty if none fits."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    chosen = RecomputeConfig.none()
    for entry in frontier.entries:
        if entry.k <= budget:
            chosen = entry.config
    return chosen


# ---------------------------------------------------------------------------
# Persisted artifact
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairMeta:
    sender_id: str
    receiver_id: str
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int

    @classmethod
    def from_weights(cls, sender: ModelWeights, receiver: ModelWeights) -> "PairMeta":
        cfg = receiver.config
        return cls(
            sender_id=sender.ident,
            receiver_id=receiver.ident,
            n_layers=cfg.n_layers,
            d_model=cfg.d_model,
            n_heads=cfg.n_heads,
            n_kv_heads=cfg.n_kv_heads,
        )


@dataclass(frozen=True)
class ProfileArtifact:
    """Self-describing profile: pair identity, parameters, points, frontier."""

    pair: PairMeta
    granularity: int
    horizon: int
    points: tuple[ProfilePoint, ...]
    frontier: ParetoFrontier
    hash_fn: str = HASH_FN


def _config_json(config: RecomputeConfig) -> dict:
    a, b = config.groups[0]
    return {"a": a, "b": b}


def save_profile(artifact: ProfileArtifact, path: str | Path) -> None:
    """Write the profile as deterministic JSON (stable byte-for-byte)."""
    doc = {
        "version": PROFILE_VERSION,
        "kind": "crosskv-profile",
        "frontier_rule": FRONTIER_RULE,
        "hash_fn": artifact.hash_fn,
        "pair": {
            "sender_id": artifact.pair.sender_id,
            "receiver_id": artifact.pair.receiver_id,
            "n_layers": artifact.pair.n_layers,
            "d_model": artifact.pair.d_model,
            "n_heads": artifact.pair.n_heads,
            "n_kv_heads": artifact.pair.n_kv_heads,
        },
        "granularity": artifact.granularity,
        "horizon": artifact.horizon,
        "baseline_quality": artifact.frontier.baseline_quality,
        "floor_delta": artifact.frontier.floor_delta,
        "points": [
            {**_config_json(p.config), "k": p.k, "quality": p.quality}
            for p in artifact.points
        ],
        "frontier": [
            {"k": e.k, **_config_json(e.config), "quality": e.quality}
            for e in artifact.frontier.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(doc: dict, field_name: str, path: str):
    if field_name not in doc:
        raise SchemaError(path, field_name, "missing")
    return doc[field_name]


def load_profile(path: str | Path) -> ProfileArtifact:
    """Read and re-validate a persisted profile; malformed files raise
    :class:`~crosskv.errors.SchemaError` naming the offending field."""
    spath = str(path)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(spath, "<file>", f"unreadable profile: {exc}") from exc
    if _require(doc, "version", spath) != PROFILE_VERSION:
        raise SchemaError(spath, "version", f"unsupported version {doc['version']!r}")
    pair_doc = _require(doc, "pair", spath)
    try:
        pair = PairMeta(
            sender_id=pair_doc["sender_id"],
            receiver_id=pair_doc["receiver_id"],
            n_layers=int(pair_doc["n_layers"]),
            d_model=int(pair_doc["d_model"]),
            n_heads=int(pair_doc["n_heads"]),
            n_kv_heads=int(pair_doc["n_kv_heads"]),
        )
    except KeyError as exc:
        raise SchemaError(spath, f"pair.{exc.args[0]}", "missing") from exc

    points = []
    for i, row in enumerate(_require(doc, "points", spath)):
        try:
            cfg = RecomputeConfig([(int(row["a"]), int(row["b"]))])
            points.append(ProfilePoint(config=cfg, k=int(row["k"]), quality=float(row["quality"])))
        except (KeyError, ValueError) as exc:
            raise SchemaError(spath, f"points[{i}]", str(exc)) from exc

    entries = []
    for i, row in enumerate(_require(doc, "frontier", spath)):
        try:
            cfg = RecomputeConfig([(int(row["a"]), int(row["b"]))])
            entries.append(FrontierEntry(k=int(row["k"]), quality=float(row["quality"]), config=cfg))
        except (KeyError, ValueError) as exc:
            raise SchemaError(spath, f"frontier[{i}]", str(exc)) from exc
    try:
        frontier = ParetoFrontier(
            entries=tuple(entries),
            baseline_quality=float(_require(doc, "baseline_quality", spath)),
            floor_delta=float(doc.get("floor_delta", DEFAULT_FLOOR_DELTA)),
        )
    except ValueError as exc:
        raise SchemaError(spath, "frontier", str(exc)) from exc
    if frontier.n_layers != pair.n_layers:
        raise SchemaError(
            spath, "frontier", f"terminal k {frontier.n_layers} != pair n_layers {pair.n_layers}"
        )
    return ProfileArtifact(
        pair=pair,
        granularity=int(_require(doc, "granularity", spath)),
        horizon=int(_require(doc, "horizon", spath)),
        points=tuple(points),
        frontier=frontier,
        hash_fn=str(doc.get("hash_fn", HASH_FN)),
    )
