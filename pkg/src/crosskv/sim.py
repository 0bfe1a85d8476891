"""Discrete-event multi-replica serving simulator.

Requests arrive as a Poisson process and are routed round-robin across
replicas.  Each replica owns a link and a compute resource: prefill executes
as a pipelined plan for the request alone and blocks decode turns until it
completes, then the request joins a round-robin decode loop that advances one
token per turn at a fixed cost.  The first token is produced the moment
prefill finishes (TTFT); ``output_len`` further tokens follow.

Per-request recompute configurations come from the Pareto frontier.  On a
loaded replica (anything still waiting for prefill) the cheapest entry at or
above the accuracy target wins; on an idle replica the largest entry whose
estimated prefill meets the latency budget wins, maximizing quality under the
SLO.  When no qualifying entry fits the budget, the cheapest qualifying one
is used and the request is flagged as SLO-infeasible in the metrics.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import RecomputeConfig
from .profiler import ParetoFrontier
from .sched import CostModel, ScheduledRequest, estimate_ttft

__all__ = [
    "WorkloadSpec",
    "ClusterSpec",
    "SloPolicy",
    "RequestMetrics",
    "RunMetrics",
    "AdaptDecision",
    "SweepResult",
    "generate_workload",
    "route",
    "adapt_config",
    "simulate",
    "sweep",
    "aggregate",
    "nearest_rank",
]


@dataclass(frozen=True)
class WorkloadSpec:
    """Poisson arrivals at ``rate`` over ``duration``; fixed request shape."""

    rate: float
    duration: float
    context_len: int
    output_len: int
    seed: int
    pair_id: str = "pair"

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if self.output_len < 1:
            raise ValueError("output_len must be at least 1")


@dataclass(frozen=True)
class ClusterSpec:
    """Symmetric replicas, each with its own link and compute resources."""

    replicas: int
    cost: CostModel
    decode_cost: float

    def __post_init__(self) -> None:
        if self.replicas < 1:
            raise ValueError("need at least one replica")
        if self.decode_cost <= 0:
            raise ValueError("decode_cost must be positive")


@dataclass(frozen=True)
class SloPolicy:
    slo: float
    q_min: float
    adaptation_enabled: bool = True

    def __post_init__(self) -> None:
        if self.slo <= 0:
            raise ValueError("slo must be positive")
        if not 0.0 <= self.q_min <= 1.0:
            raise ValueError("q_min must lie in [0, 1]")


@dataclass(frozen=True)
class AdaptDecision:
    config: RecomputeConfig
    k: int
    quality: float
    slo_feasible: bool


@dataclass(frozen=True)
class RequestMetrics:
    request_id: str
    arrival: float
    replica: int
    config_k: int
    ttft: float
    tbt: tuple[float, ...]
    e2e: float
    slo_flagged: bool

    @property
    def mean_tbt(self) -> float:
        return float(np.mean(self.tbt)) if self.tbt else 0.0


@dataclass(frozen=True)
class RunMetrics:
    requests: tuple[RequestMetrics, ...]
    generated: int
    completed: int
    in_flight: int
    violation_rate: float
    aggregates: dict


@dataclass(frozen=True)
class SweepResult:
    runs: tuple[tuple[float, RunMetrics], ...]
    sustained_rate: float | None


def generate_workload(spec: WorkloadSpec, n_layers: int) -> list[ScheduledRequest]:
    """Seeded Poisson arrivals truncated at the duration.

    Configs start empty; the simulator assigns the real configuration at
    dispatch time.
    """
    rng = np.random.default_rng(spec.seed)
    requests = []
    t = 0.0
    i = 0
    while True:
        t += rng.exponential(1.0 / spec.rate)
        if t > spec.duration:
            break
        requests.append(
            ScheduledRequest(
                id=f"r{i:05d}",
                arrival=float(t),
                model=spec.pair_id,
                config=RecomputeConfig.none(),
                n_layers=n_layers,
            )
        )
        i += 1
    return requests


def route(sequence_number: int, replicas: int) -> int:
    """Strict round-robin by request sequence number."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    return sequence_number % replicas


def adapt_config(
    queue_depth: int,
    request: ScheduledRequest,
    frontier: ParetoFrontier,
    policy: SloPolicy,
    cost: CostModel,
) -> AdaptDecision:
    """Pick a frontier entry for one request given the replica's backlog.

    Only entries meeting the accuracy target are candidates (the terminal
    recompute-all entry stands in when none do).  Loaded, or with adaptation
    disabled: the cheapest candidate.  Idle: the largest candidate whose
    solitary pipelined TTFT fits the latency budget, falling back to the
    cheapest candidate flagged as infeasible.
    """
    qualifying = [e for e in frontier.entries if e.quality >= policy.q_min]
    if not qualifying:
        qualifying = [frontier.entries[-1]]

    if not policy.adaptation_enabled or queue_depth > 0:
        chosen = qualifying[0]
        return AdaptDecision(chosen.config, chosen.k, chosen.quality, True)

    best = None
    for entry in qualifying:
        trial = ScheduledRequest(request.id, 0.0, request.model, entry.config, request.n_layers)
        if estimate_ttft(trial, cost) <= policy.slo:
            best = entry  # entries ascend in k, so the last fit is the largest
    if best is not None:
        return AdaptDecision(best.config, best.k, best.quality, True)
    chosen = qualifying[0]
    return AdaptDecision(chosen.config, chosen.k, chosen.quality, False)


class _Replica:
    """Single-replica event loop; deterministic and self-contained."""

    def __init__(
        self,
        index: int,
        requests: Sequence[ScheduledRequest],
        cluster: ClusterSpec,
        policy: SloPolicy,
        frontier: ParetoFrontier,
        output_len: int,
        horizon: float | None,
    ):
        self.index = index
        self.requests = list(requests)
        self.cluster = cluster
        self.policy = policy
        self.frontier = frontier
        self.output_len = output_len
        self.horizon = horizon
        self.done: list[RequestMetrics] = []

    def run(self) -> None:
        queue: deque = deque()
        decoding: list[list] = []  # [request, decision, remaining, token_times]
        now = 0.0
        next_idx = 0
        in_prefill_until: float | None = None
        rr = 0

        def admit(limit: float) -> None:
            nonlocal next_idx
            while next_idx < len(self.requests) and self.requests[next_idx].arrival <= limit:
                req = self.requests[next_idx]
                next_idx += 1
                prefilling = in_prefill_until is not None and req.arrival < in_prefill_until
                depth = len(queue) + (1 if prefilling else 0)
                decision = adapt_config(depth, req, self.frontier, self.policy, self.cluster.cost)
                queue.append((req, decision))

        while True:
            if self.horizon is not None and now >= self.horizon:
                break
            admit(now)
            if queue:
                req, decision = queue.popleft()
                solo = ScheduledRequest(req.id, 0.0, req.model, decision.config, req.n_layers)
                duration = estimate_ttft(solo, self.cluster.cost)
                in_prefill_until = now + duration
                admit(in_prefill_until)  # arrivals during the prefill see a backlog
                now = in_prefill_until
                in_prefill_until = None
                decoding.append([req, decision, self.output_len, [now]])
            elif decoding:
                entry = decoding[rr % len(decoding)]
                idx = rr % len(decoding)
                end = now + self.cluster.decode_cost
                admit(end)
                now = end
                entry[3].append(now)
                entry[2] -= 1
                if entry[2] == 0:
                    req, decision, _, times = decoding.pop(idx)
                    self._finish(req, decision, times)
                    rr = idx
                else:
                    rr = idx + 1
            elif next_idx < len(self.requests):
                now = max(now, self.requests[next_idx].arrival)
            else:
                break

    def _finish(self, req: ScheduledRequest, decision: AdaptDecision, times: list[float]) -> None:
        gaps = tuple(b - a for a, b in zip(times, times[1:]))
        self.done.append(
            RequestMetrics(
                request_id=req.id,
                arrival=req.arrival,
                replica=self.index,
                config_k=decision.k,
                ttft=times[0] - req.arrival,
                tbt=gaps,
                e2e=times[-1] - req.arrival,
                slo_flagged=not decision.slo_feasible,
            )
        )


def nearest_rank(values: Sequence[float], quantile: float) -> float:
    """Nearest-rank order statistic (lower value on even-split medians)."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("empty input")
    rank = max(1, math.ceil(quantile * len(ordered)))
    return float(ordered[rank - 1])


def aggregate(values: Sequence[float]) -> dict:
    """Mean plus nearest-rank median and p90."""
    if not len(values):
        raise ValueError("empty input")
    return {
        "mean": float(np.mean(values)),
        "median": nearest_rank(values, 0.5),
        "p90": nearest_rank(values, 0.9),
    }


def simulate(
    workload: WorkloadSpec,
    cluster: ClusterSpec,
    policy: SloPolicy,
    frontier: ParetoFrontier,
    requests: Sequence[ScheduledRequest] | None = None,
    horizon: float | None = None,
) -> RunMetrics:
    """Run one workload; deterministic for fixed seeds.

    Without ``horizon`` the simulation drains every generated request.
    """
    if requests is None:
        requests = generate_workload(workload, frontier.n_layers)
    per_replica: list[list[ScheduledRequest]] = [[] for _ in range(cluster.replicas)]
    for seq, req in enumerate(requests):
        per_replica[route(seq, cluster.replicas)].append(req)

    rows: list[RequestMetrics] = []
    for idx, assigned in enumerate(per_replica):
        replica = _Replica(idx, assigned, cluster, policy, frontier, workload.output_len, horizon)
        replica.run()
        rows.extend(replica.done)
    rows.sort(key=lambda r: r.request_id)

    generated = len(requests)
    completed = len(rows)
    if completed:
        aggregates = {
            "ttft": aggregate([r.ttft for r in rows]),
            "tbt": aggregate([g for r in rows for g in r.tbt]),
            "e2e": aggregate([r.e2e for r in rows]),
        }
        violation = float(np.mean([r.ttft > policy.slo for r in rows]))
    else:
        aggregates = {}
        violation = 0.0
    return RunMetrics(
        requests=tuple(rows),
        generated=generated,
        completed=completed,
        in_flight=generated - completed,
        violation_rate=violation,
        aggregates=aggregates,
    )


def sweep(
    rates: Sequence[float],
    workload: WorkloadSpec,
    cluster: ClusterSpec,
    policy: SloPolicy,
    frontier: ParetoFrontier,
) -> SweepResult:
    """Run the rate grid; sustained throughput is the highest rate whose p90
    TTFT still meets the SLO."""
    from dataclasses import replace

    runs = []
    sustained = None
    for rate in rates:
        metrics = simulate(replace(workload, rate=rate), cluster, policy, frontier)
        runs.append((rate, metrics))
        if metrics.completed and metrics.aggregates["ttft"]["p90"] <= policy.slo:
            sustained = rate if sustained is None else max(sustained, rate)
    return SweepResult(runs=tuple(runs), sustained_rate=sustained)
