"""Command-line entry points: profile, plan, serve, report.

All commands read a versioned JSON run configuration (``--config``), write
into ``--out``, and are reproducible: identical inputs produce identical
output bytes for every data file.  Figures are rendered next to the data
files they visualize.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .model import (
    ModelConfig,
    ModelWeights,
    PerturbationSpec,
    build_model,
    make_synthetic_dataset,
    read_token_file,
)
from .profiler import (
    DEFAULT_FLOOR_DELTA,
    PairMeta,
    ProfileArtifact,
    build_frontier,
    load_profile,
    run_profile,
    save_profile,
    select_by_quality_floor,
)
from .report import (
    NoDataError,
    read_metrics_csv,
    render_frontier_figure,
    render_rate_figures,
    render_timeline_figure,
    summarize_by_rate,
    summary_text,
    write_metrics_csv,
    write_plot_data,
    write_summary_json,
)
from .sched import CostModel, load_scenario, plan
from .sim import ClusterSpec, SloPolicy, SweepResult, WorkloadSpec, sweep

RUN_CONFIG_VERSION = 1


def _load_json(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(path, "<file>", f"unreadable config: {exc}") from exc
    if doc.get("version") != RUN_CONFIG_VERSION:
        raise SchemaError(path, "version", f"unsupported version {doc.get('version')!r}")
    return doc


def _build_pair(doc: dict, path: str) -> tuple[ModelWeights, ModelWeights]:
    try:
        spec = doc["pair"]
        cfg = ModelConfig(
            n_layers=int(spec["n_layers"]),
            d_model=int(spec["d_model"]),
            n_heads=int(spec["n_heads"]),
            n_kv_heads=int(spec["n_kv_heads"]),
            head_dim=int(spec.get("head_dim", spec["d_model"] // spec["n_heads"])),
            d_ff=int(spec["d_ff"]),
            vocab_size=int(spec["vocab_size"]),
            max_seq=int(spec["max_seq"]),
            base_seed=int(spec["base_seed"]),
        )
    except KeyError as exc:
        raise SchemaError(path, f"pair.{exc.args[0]}", "missing") from exc
    noise_seed = int(spec.get("noise_seed", 0))

    def variant(eps_key: str) -> ModelWeights:
        eps = spec.get(eps_key)
        if eps is None or not any(eps):
            return build_model(cfg)
        return build_model(cfg, PerturbationSpec(eps, noise_seed))

    return variant("sender_eps"), variant("receiver_eps")


def _build_dataset(doc: dict, path: str, config: ModelConfig, seed_override: int | None):
    ds = doc.get("dataset", {})
    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        seed = int(ds.get("seed", 0)) if seed_override is None else seed_override
        return make_synthetic_dataset(
            seed, int(ds.get("size", 8)), int(ds.get("length", 40)), config.vocab_size
        )
    if kind == "files":
        return [read_token_file(p) for p in ds.get("paths", [])]
    raise SchemaError(path, "dataset.kind", f"unknown dataset kind {kind!r}")


def _cost_from_serve(doc: dict) -> CostModel:
    cost = doc.get("cost", {"unit_mode": True})
    if cost.get("unit_mode"):
        return CostModel.unit()
    return CostModel(
        link_bandwidth=float(cost.get("link_bandwidth", 1.0)),
        kv_layer_bytes=float(cost.get("kv_layer_bytes", 1.0)),
        e_layer_bytes=float(cost.get("e_layer_bytes", 1.0)),
        layer_compute_time=float(cost.get("layer_compute_time", 1.0)),
        anchor_time=float(cost.get("anchor_time", 0.0)),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_profile(args: argparse.Namespace) -> int:
    doc = _load_json(args.config)
    sender, receiver = _build_pair(doc, args.config)
    train_set = _build_dataset(doc, args.config, receiver.config, args.seed)
    prof = doc.get("profiler", {})
    granularity = int(prof.get("granularity", 2))
    horizon = int(prof.get("horizon", 32))
    delta = float(prof.get("delta", DEFAULT_FLOOR_DELTA))

    points = run_profile(sender, receiver, train_set, granularity, horizon)
    frontier = build_frontier(points, floor_delta=delta)
    artifact = ProfileArtifact(
        pair=PairMeta.from_weights(sender, receiver),
        granularity=granularity,
        horizon=horizon,
        points=tuple(points),
        frontier=frontier,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_profile(artifact, out / "profile.json")
    lines = ["# crosskv-points v1", "a,b,k,quality"]
    for p in points:
        a, b = p.config.groups[0]
        lines.append(f"{a},{b},{p.k},{p.quality!r}")
    (out / "points.csv").write_text("\n".join(lines) + "\n")
    render_frontier_figure(out, points, frontier)

    chosen = select_by_quality_floor(frontier, delta)
    print(f"profiled {len(points)} configs; floor config {list(chosen.groups)} "
          f"(k={chosen.recomputed_layer_count})")
    print(f"wrote {out / 'profile.json'}")
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    cost, requests = load_scenario(args.config)
    strategy = args.strategy.replace("-", "_")
    timeline = plan(strategy, requests, cost)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        timeline.write_csv(out / "timeline.csv")
        render_timeline_figure(out, timeline, f"{args.strategy} plan")
        print(f"wrote {out / 'timeline.csv'}")
    print(f"total_ttft {timeline.total_ttft:g}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    doc = _load_json(args.config)
    sender, receiver = _build_pair(doc, args.config)
    serve = doc.get("serve", {})
    profile_path = serve.get("profile")
    if not profile_path:
        raise SchemaError(args.config, "serve.profile", "missing profile path")
    artifact = load_profile(profile_path)

    pair_meta = PairMeta.from_weights(sender, receiver)
    for field_name in ("sender_id", "receiver_id", "n_layers", "d_model", "n_heads", "n_kv_heads"):
        got = getattr(artifact.pair, field_name)
        want = getattr(pair_meta, field_name)
        if got != want:
            raise SchemaError(
                str(profile_path), f"pair.{field_name}",
                f"profile was built for {got!r}, run config describes {want!r}",
            )

    seed = int(serve.get("seed", 0)) if args.seed is None else args.seed
    workload = WorkloadSpec(
        rate=1.0,
        duration=float(serve.get("duration", 200.0)),
        context_len=int(serve.get("context_len", 40)),
        output_len=int(serve.get("output_len", 8)),
        seed=seed,
        pair_id=artifact.pair.receiver_id,
    )
    cluster = ClusterSpec(
        replicas=int(serve.get("replicas", 2)),
        cost=_cost_from_serve(serve),
        decode_cost=float(serve.get("decode_cost", 0.05)),
    )
    policy = SloPolicy(
        slo=float(serve.get("slo", 20.0)),
        q_min=float(serve.get("q_min", 0.95)),
        adaptation_enabled=bool(serve.get("adapt", True)),
    )
    rates = [float(r) for r in serve.get("rates", [0.05])]

    result: SweepResult = sweep(rates, workload, cluster, policy, artifact.frontier)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.runs)
    rows = read_metrics_csv(out / "metrics.csv")
    summary = summarize_by_rate(rows)
    violations = {rate: metrics.violation_rate for rate, metrics in result.runs}
    write_summary_json(out / "summary.json", summary, policy.slo, result.sustained_rate, violations)
    print(f"swept {len(rates)} rates, {sum(m.completed for _, m in result.runs)} requests")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = read_metrics_csv(args.metrics)
    summary = summarize_by_rate(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_files = write_plot_data(out, summary)
    render_rate_figures(out, summary)
    text = summary_text(summary)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    print(f"wrote {', '.join(str(p) for p in data_files)}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosskv",
        description="Cross-model KV-cache reuse: profile, plan, serve, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_profile = sub.add_parser("profile", help="sweep recompute configs and build the frontier")
    p_profile.add_argument("--config", required=True, help="run configuration JSON")
    p_profile.add_argument("--out", required=True, help="output directory")
    p_profile.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    p_profile.set_defaults(func=cmd_profile)

    p_plan = sub.add_parser("plan", help="plan cache transfers for a scenario")
    p_plan.add_argument("--config", required=True, help="scenario JSON")
    p_plan.add_argument(
        "--strategy", required=True, choices=("naive", "reuse-only", "pipelined")
    )
    p_plan.add_argument("--out", default=None, help="output directory for the timeline")
    p_plan.set_defaults(func=cmd_plan)

    p_serve = sub.add_parser("serve", help="simulate serving over an arrival-rate grid")
    p_serve.add_argument("--config", required=True, help="run configuration JSON")
    p_serve.add_argument("--out", required=True, help="output directory")
    p_serve.add_argument("--seed", type=int, default=None, help="override the workload seed")
    p_serve.set_defaults(func=cmd_serve)

    p_report = sub.add_parser("report", help="summarize a metrics CSV")
    p_report.add_argument("metrics", help="metrics CSV from the serve command")
    p_report.add_argument("--out", required=True, help="output directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except NoDataError as exc:
        print(f"no data: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
