"""Profiler tests: enumeration, evaluation, frontier, selection, persistence."""

import numpy as np
import pytest

from crosskv.errors import SchemaError
from crosskv.model import RecomputeConfig, make_synthetic_dataset
from crosskv.profiler import (
    FrontierEntry,
    PairMeta,
    ParetoFrontier,
    ProfileArtifact,
    ProfilePoint,
    build_frontier,
    enumerate_groups,
    evaluate_config,
    layer_sensitivity,
    load_profile,
    run_profile,
    save_profile,
    select_by_layer_budget,
    select_by_quality_floor,
)
from conftest import TOY


def pt(a, b, quality):
    cfg = RecomputeConfig([(a, b)])
    return ProfilePoint(config=cfg, k=cfg.recomputed_layer_count, quality=quality)


TRAIN = make_synthetic_dataset(5000, 4, 40, TOY.vocab_size)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "n_layers,g,count",
    [(8, 2, 10), (32, 2, 136), (8, 1, 36), (8, 8, 1), (7, 2, 10)],
)
def test_enumeration_counts(n_layers, g, count):
    configs = enumerate_groups(n_layers, g)
    assert len(configs) == count
    assert len({c.groups for c in configs}) == count


def test_enumeration_g1_has_every_singleton():
    configs = enumerate_groups(8, 1)
    singles = {c.groups[0] for c in configs if c.recomputed_layer_count == 1}
    assert singles == {(l, l) for l in range(8)}


def test_enumeration_ragged_final_block():
    configs = enumerate_groups(7, 2)  # blocks (0,1),(2,3),(4,5),(6,6)
    assert RecomputeConfig([(6, 6)]).groups in {c.groups for c in configs}
    assert all(b <= 6 for c in configs for _, b in c.groups)


def test_enumeration_rejects_bad_granularity():
    with pytest.raises(ValueError):
        enumerate_groups(8, 0)
    with pytest.raises(ValueError):
        enumerate_groups(8, 9)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def test_evaluate_identity_pair_is_one(base_model):
    point = evaluate_config((base_model, base_model), RecomputeConfig([(2, 3)]), TRAIN[:2])
    assert point.quality == 1.0


def test_evaluate_recompute_all_is_one(base_model, perturbed_receiver):
    point = evaluate_config((base_model, perturbed_receiver), RecomputeConfig.full(8), TRAIN[:2])
    assert point.quality == 1.0


def test_evaluate_covering_block_beats_distant_block(base_model, perturbed_receiver):
    pair = (base_model, perturbed_receiver)
    covering = evaluate_config(pair, RecomputeConfig([(4, 5)]), TRAIN)
    distant = evaluate_config(pair, RecomputeConfig([(0, 1)]), TRAIN)
    assert covering.quality > distant.quality


def test_evaluate_requires_train_set(base_model):
    with pytest.raises(ValueError):
        evaluate_config((base_model, base_model), RecomputeConfig.full(8), [])


# ---------------------------------------------------------------------------
# Frontier construction
# ---------------------------------------------------------------------------


def test_frontier_drops_dominated_points():
    frontier = build_frontier([pt(0, 1, 0.8), pt(0, 3, 0.7), pt(0, 5, 0.95)])
    assert [(e.k, e.quality) for e in frontier.entries] == [(2, 0.8), (6, 0.95)]
    assert frontier.baseline_quality == 0.95


def test_frontier_single_point():
    frontier = build_frontier([pt(0, 7, 0.9)])
    assert len(frontier.entries) == 1
    assert frontier.entries[0].config.is_full(8)


def test_frontier_requires_recompute_all():
    with pytest.raises(ValueError):
        build_frontier([pt(0, 1, 0.8), pt(2, 5, 0.9)])
    with pytest.raises(ValueError):
        build_frontier([])


def test_frontier_appends_terminal_on_quality_tie():
    frontier = build_frontier([pt(0, 3, 1.0), pt(0, 7, 1.0)])
    assert [(e.k, e.quality) for e in frontier.entries] == [(4, 1.0), (8, 1.0)]
    assert frontier.entries[-1].config.is_full(8)


def test_frontier_is_monotone_on_real_sweep(base_model, perturbed_receiver):
    points = run_profile(base_model, perturbed_receiver, TRAIN[:2], granularity=2)
    assert len(points) == 10
    frontier = build_frontier(points)
    ks = [e.k for e in frontier.entries]
    qs = [e.quality for e in frontier.entries]
    assert all(b > a for a, b in zip(ks, ks[1:]))
    assert all(b >= a for a, b in zip(qs, qs[1:]))
    assert frontier.baseline_quality == 1.0


# ---------------------------------------------------------------------------
# Selection rules
# ---------------------------------------------------------------------------


def synthetic_frontier():
    return ParetoFrontier(
        entries=(
            FrontierEntry(2, 0.90, RecomputeConfig([(4, 5)])),
            FrontierEntry(4, 0.95, RecomputeConfig([(2, 5)])),
            FrontierEntry(8, 1.0, RecomputeConfig.full(8)),
        ),
        baseline_quality=1.0,
    )


def test_floor_selection():
    f = synthetic_frontier()
    assert select_by_quality_floor(f, 0.05).recomputed_layer_count == 4
    assert select_by_quality_floor(f, 0.0).recomputed_layer_count == 8
    assert select_by_quality_floor(f, 0.5).recomputed_layer_count == 2


def test_budget_selection():
    f = synthetic_frontier()
    assert select_by_layer_budget(f, 8).recomputed_layer_count == 8
    assert select_by_layer_budget(f, 100).recomputed_layer_count == 8
    assert select_by_layer_budget(f, 5).recomputed_layer_count == 4
    assert select_by_layer_budget(f, 0) == RecomputeConfig.none()


def test_frontier_rejects_decreasing_quality():
    with pytest.raises(ValueError):
        ParetoFrontier(
            entries=(
                FrontierEntry(2, 0.95, RecomputeConfig([(0, 1)])),
                FrontierEntry(8, 0.90, RecomputeConfig.full(8)),
            ),
            baseline_quality=0.90,
        )


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def test_layer_sensitivity_flags_perturbed_layers(base_model):
    from crosskv.model import PerturbationSpec, build_model

    receiver = build_model(TOY, PerturbationSpec.block(8, [4, 5], 1.0, noise_seed=1002))
    train = make_synthetic_dataset(5002, 4, 40, TOY.vocab_size)
    drops = layer_sensitivity(base_model, receiver, train)
    # layers before the perturbed block reconstruct exactly: zero drop
    assert np.all(drops[:4] == 0.0)
    top2 = set(np.argsort(-drops, kind="stable")[:2].tolist())
    assert top2 == {4, 5}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def make_artifact(base_model, perturbed_receiver, train):
    points = run_profile(base_model, perturbed_receiver, train, granularity=2)
    frontier = build_frontier(points)
    return ProfileArtifact(
        pair=PairMeta.from_weights(base_model, perturbed_receiver),
        granularity=2,
        horizon=32,
        points=tuple(points),
        frontier=frontier,
    )


def test_profile_round_trip(tmp_path, base_model, perturbed_receiver):
    artifact = make_artifact(base_model, perturbed_receiver, TRAIN[:2])
    path = tmp_path / "profile.json"
    save_profile(artifact, path)
    loaded = load_profile(path)
    assert loaded.pair == artifact.pair
    assert loaded.granularity == artifact.granularity
    assert loaded.horizon == artifact.horizon
    assert [(p.k, p.quality, p.config.groups) for p in loaded.points] == [
        (p.k, p.quality, p.config.groups) for p in artifact.points
    ]
    assert loaded.frontier == artifact.frontier


def test_profile_byte_determinism(tmp_path, base_model, perturbed_receiver):
    a1 = make_artifact(base_model, perturbed_receiver, TRAIN[:2])
    a2 = make_artifact(base_model, perturbed_receiver, TRAIN[:2])
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_profile(a1, p1)
    save_profile(a2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_profile_rejects_decreasing_k(tmp_path, base_model, perturbed_receiver):
    artifact = make_artifact(base_model, perturbed_receiver, TRAIN[:2])
    path = tmp_path / "profile.json"
    save_profile(artifact, path)
    import json

    doc = json.loads(path.read_text())
    doc["frontier"] = list(reversed(doc["frontier"]))
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_profile(path)


def test_profile_rejects_unknown_version(tmp_path, base_model, perturbed_receiver):
    artifact = make_artifact(base_model, perturbed_receiver, TRAIN[:2])
    path = tmp_path / "profile.json"
    save_profile(artifact, path)
    import json

    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_profile(path)


def test_profile_rejects_garbage(tmp_path):
    path = tmp_path / "profile.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_profile(path)


# ---------------------------------------------------------------------------
# Cross-input stability
# ---------------------------------------------------------------------------


def test_floor_config_stable_across_disjoint_sets(base_model, perturbed_receiver):
    # Over 5 disjoint seeded training sets, the floor-satisfying config
    # overlaps the perturbed block in at least 80% of runs.
    hits = 0
    for seed in range(5):
        train = make_synthetic_dataset(20_000 + seed, 3, 40, TOY.vocab_size)
        points = run_profile(base_model, perturbed_receiver, train, granularity=2)
        chosen = select_by_quality_floor(build_frontier(points))
        covered = chosen.layer_set()
        hits += bool(covered & {4, 5})
    assert hits >= 4
