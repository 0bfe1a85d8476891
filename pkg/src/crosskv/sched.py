"""Planners for moving and rebuilding caches: naive, reuse-only, pipelined.

All three strategies share one cost model: a network link carries per-layer
transfer jobs, and each model owns an independent compute resource that
rebuilds one layer at a time.  They differ in what moves and what overlaps:

* ``naive``       - requests run strictly one at a time; each transfers the E
                    cache for every group start above layer 0, then every
                    layer's KV, then recomputes its groups.
* ``reuse_only``  - same strict serialization, but only the reused layers'
                    KV crosses the link.
* ``pipelined``   - the link is a FIFO queue of per-layer jobs enqueued at
                    arrival (E first, then reused KV); a group's recompute
                    starts as soon as its seeding E has landed (immediately
                    for groups starting at layer 0), and transfers overlap
                    compute freely across requests.

A request is ready when all its transfers and recomputes are done plus the
anchor pass, which costs nothing in unit mode and is recorded as a zero-width
bookkeeping event.  TTFT is ready minus arrival; the plan total is the sum of
per-request TTFTs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SchemaError
from .model import ModelConfig, RecomputeConfig

__all__ = [
    "CostModel",
    "ScheduledRequest",
    "Event",
    "Timeline",
    "STRATEGIES",
    "plan",
    "estimate_ttft",
    "bytes_of",
    "load_scenario",
    "save_scenario",
    "demo_scenario",
    "LINK",
]

STRATEGIES = ("naive", "reuse_only", "pipelined")
LINK = "link"
SCENARIO_VERSION = 1


@dataclass(frozen=True)
class CostModel:
    """Byte sizes, bandwidth, and per-layer compute time.

    Transfer time for one layer is bytes / bandwidth.  In unit mode every
    derived per-layer cost is exactly 1 and the anchor costs 0, matching the
    convention that moving or rebuilding one layer takes one time unit.
    """

    link_bandwidth: float = 1.0
    kv_layer_bytes: float = 1.0
    e_layer_bytes: float = 1.0
    layer_compute_time: float = 1.0
    anchor_time: float = 0.0
    unit_mode: bool = False

    def __post_init__(self) -> None:
        for name in ("link_bandwidth", "kv_layer_bytes", "e_layer_bytes", "layer_compute_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.anchor_time < 0:
            raise ValueError("anchor_time must be non-negative")
        if self.unit_mode:
            if (self.link_bandwidth, self.kv_layer_bytes, self.e_layer_bytes,
                    self.layer_compute_time, self.anchor_time) != (1.0, 1.0, 1.0, 1.0, 0.0):
                raise ValueError("unit mode fixes all per-layer costs at 1 and anchor at 0")

    @classmethod
    def unit(cls) -> "CostModel":
        return cls(unit_mode=True, link_bandwidth=1.0, kv_layer_bytes=1.0,
                   e_layer_bytes=1.0, layer_compute_time=1.0, anchor_time=0.0)

    @classmethod
    def from_model(
        cls,
        config: ModelConfig,
        positions: int,
        link_bandwidth: float,
        compute_time_per_layer_position: float,
    ) -> "CostModel":
        """Derive byte sizes from a model config and context length.

        The anchor pass is one position through every layer.
        """
        return cls(
            link_bandwidth=link_bandwidth,
            kv_layer_bytes=float(bytes_of("kv", positions, config)),
            e_layer_bytes=float(bytes_of("e", positions, config)),
            layer_compute_time=compute_time_per_layer_position * positions,
            anchor_time=compute_time_per_layer_position * config.n_layers,
        )

    @property
    def kv_transfer_time(self) -> float:
        return self.kv_layer_bytes / self.link_bandwidth

    @property
    def e_transfer_time(self) -> float:
        return self.e_layer_bytes / self.link_bandwidth


def bytes_of(kind: str, positions: int, config: ModelConfig) -> int:
    """Stored bytes of one layer's cache over a number of positions."""
    if positions < 1:
        raise ValueError("positions must be at least 1")
    if kind == "kv":
        return config.kv_bytes_per_position * positions
    if kind == "e":
        return config.e_bytes_per_position * positions
    raise ValueError(f"unknown cache kind {kind!r}")


@dataclass(frozen=True)
class ScheduledRequest:
    id: str
    arrival: float
    model: str
    config: RecomputeConfig
    n_layers: int

    def __post_init__(self) -> None:
        if self.arrival < 0:
            raise ValueError("arrival must be non-negative")
        self.config.validate_for(self.n_layers)

    @property
    def reused_layers(self) -> tuple[int, ...]:
        return self.config.reused_layers(self.n_layers)


@dataclass(frozen=True)
class Event:
    request: str
    resource: str
    label: str
    start: float
    end: float


@dataclass(frozen=True)
class Timeline:
    events: tuple[Event, ...]
    ready: dict[str, float]
    ttft: dict[str, float]

    @property
    def total_ttft(self) -> float:
        return sum(self.ttft.values())

    def write_csv(self, path: str | Path) -> None:
        lines = [f"# crosskv-timeline v{SCENARIO_VERSION}", "request,resource,label,start,end"]
        for ev in self.events:
            lines.append(f"{ev.request},{ev.resource},{ev.label},{ev.start:g},{ev.end:g}")
        Path(path).write_text("\n".join(lines) + "\n")


def _compute_resource(model: str) -> str:
    return f"compute:{model}"


def _check_requests(requests: Sequence[ScheduledRequest]) -> None:
    for prev, cur in zip(requests, requests[1:]):
        if cur.arrival < prev.arrival:
            raise ValueError("requests must be sorted by arrival time")
    seen = set()
    for r in requests:
        if r.id in seen:
            raise ValueError(f"duplicate request id {r.id!r}")
        seen.add(r.id)


def _plan_serial(requests: Sequence[ScheduledRequest], cost: CostModel, transfer_all: bool) -> Timeline:
    events: list[Event] = []
    ready: dict[str, float] = {}
    ttft: dict[str, float] = {}
    t_free = 0.0
    for req in requests:
        t = max(req.arrival, t_free)
        comp = _compute_resource(req.model)
        for a in req.config.transition_layers:
            events.append(Event(req.id, LINK, f"E-transfer({a})", t, t + cost.e_transfer_time))
            t += cost.e_transfer_time
        kv_layers = range(req.n_layers) if transfer_all else req.reused_layers
        for l in kv_layers:
            events.append(Event(req.id, LINK, f"KV-transfer({l})", t, t + cost.kv_transfer_time))
            t += cost.kv_transfer_time
        for a, b in req.config.groups:
            for l in range(a, b + 1):
                events.append(Event(req.id, comp, f"recompute({l})", t, t + cost.layer_compute_time))
                t += cost.layer_compute_time
        events.append(Event(req.id, comp, "anchor", t, t + cost.anchor_time))
        t += cost.anchor_time
        ready[req.id] = t
        ttft[req.id] = t - req.arrival
        t_free = t
    return Timeline(events=tuple(events), ready=ready, ttft=ttft)


def _plan_pipelined(requests: Sequence[ScheduledRequest], cost: CostModel) -> Timeline:
    events: list[Event] = []

    # Link: FIFO over per-layer jobs, ordered by (enqueue time, request
    # order, E before KV, layer).  Work-conserving by construction.
    jobs = []
    for seq, req in enumerate(requests):
        for a in req.config.transition_layers:
            jobs.append((req.arrival, seq, 0, a, req, "e"))
        for l in req.reused_layers:
            jobs.append((req.arrival, seq, 1, l, req, "kv"))
    jobs.sort(key=lambda j: (j[0], j[1], j[2], j[3]))

    e_done: dict[tuple[str, int], float] = {}
    transfers_end: dict[str, float] = {r.id: r.arrival for r in requests}
    link_free = 0.0
    for enqueue, _, _, layer, req, kind in jobs:
        start = max(link_free, enqueue)
        dur = cost.e_transfer_time if kind == "e" else cost.kv_transfer_time
        end = start + dur
        label = f"E-transfer({layer})" if kind == "e" else f"KV-transfer({layer})"
        events.append(Event(req.id, LINK, label, start, end))
        link_free = end
        transfers_end[req.id] = max(transfers_end[req.id], end)
        if kind == "e":
            e_done[(req.id, layer)] = end

    # Compute: one FIFO resource per model; a group's first layer waits for
    # its seeding E, everything else simply queues.
    comp_free: dict[str, float] = {}
    ready: dict[str, float] = {}
    ttft: dict[str, float] = {}
    for req in requests:
        comp = _compute_resource(req.model)
        t_comp = comp_free.get(comp, 0.0)
        last_compute = req.arrival
        for a, b in req.config.groups:
            gate = req.arrival if a == 0 else e_done[(req.id, a)]
            for l in range(a, b + 1):
                start = max(t_comp, gate, req.arrival)
                end = start + cost.layer_compute_time
                events.append(Event(req.id, comp, f"recompute({l})", start, end))
                t_comp = end
                last_compute = end
        anchor_start = max(t_comp, transfers_end[req.id], last_compute)
        anchor_end = anchor_start + cost.anchor_time
        events.append(Event(req.id, comp, "anchor", anchor_start, anchor_end))
        t_comp = anchor_end
        comp_free[comp] = t_comp
        ready[req.id] = anchor_end
        ttft[req.id] = anchor_end - req.arrival
    return Timeline(events=tuple(events), ready=ready, ttft=ttft)


def plan(strategy: str, requests: Sequence[ScheduledRequest], cost: CostModel) -> Timeline:
    """Exact event timeline and per-request TTFT under one loading strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    requests = list(requests)
    _check_requests(requests)
    if strategy == "naive":
        return _plan_serial(requests, cost, transfer_all=True)
    if strategy == "reuse_only":
        return _plan_serial(requests, cost, transfer_all=False)
    return _plan_pipelined(requests, cost)


def estimate_ttft(request: ScheduledRequest, cost: CostModel) -> float:
    """TTFT of the request alone under the pipelined strategy."""
    return plan("pipelined", [request], cost).ttft[request.id]


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def _cost_from_doc(doc: dict, path: str) -> CostModel:
    if doc.get("unit_mode"):
        return CostModel.unit()
    try:
        return CostModel(
            link_bandwidth=float(doc.get("link_bandwidth", 1.0)),
            kv_layer_bytes=float(doc.get("kv_layer_bytes", 1.0)),
            e_layer_bytes=float(doc.get("e_layer_bytes", 1.0)),
            layer_compute_time=float(doc.get("layer_compute_time", 1.0)),
            anchor_time=float(doc.get("anchor_time", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(path, "cost", str(exc)) from exc


def load_scenario(path: str | Path) -> tuple[CostModel, list[ScheduledRequest]]:
    """Parse a scenario file into a cost model plus arrival-sorted requests."""
    spath = str(path)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(spath, "<file>", f"unreadable scenario: {exc}") from exc
    if doc.get("version") != SCENARIO_VERSION:
        raise SchemaError(spath, "version", f"unsupported version {doc.get('version')!r}")
    cost = _cost_from_doc(doc.get("cost", {}), spath)
    requests = []
    for i, row in enumerate(doc.get("requests", [])):
        try:
            requests.append(
                ScheduledRequest(
                    id=str(row["id"]),
                    arrival=float(row["arrival"]),
                    model=str(row["model"]),
                    config=RecomputeConfig([(int(a), int(b)) for a, b in row.get("groups", [])]),
                    n_layers=int(row["n_layers"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(spath, f"requests[{i}]", str(exc)) from exc
    requests.sort(key=lambda r: r.arrival)
    return cost, requests


def save_scenario(path: str | Path, cost: CostModel, requests: Iterable[ScheduledRequest]) -> None:
    doc = {
        "version": SCENARIO_VERSION,
        "cost": {"unit_mode": True}
        if cost.unit_mode
        else {
            "link_bandwidth": cost.link_bandwidth,
            "kv_layer_bytes": cost.kv_layer_bytes,
            "e_layer_bytes": cost.e_layer_bytes,
            "layer_compute_time": cost.layer_compute_time,
            "anchor_time": cost.anchor_time,
        },
        "requests": [
            {
                "id": r.id,
                "arrival": r.arrival,
                "model": r.model,
                "n_layers": r.n_layers,
                "groups": [list(g) for g in r.config.groups],
            }
            for r in requests
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def demo_scenario() -> tuple[CostModel, list[ScheduledRequest]]:
    """Bundled two-model handoff: unit costs, 10 layers each, arrivals 0 and 2.

    Model A recomputes layers 3..9 and reuses 0..2; model B recomputes 0..2
    and reuses 3..9.  Totals: naive 47, reuse-only 30, pipelined 17.
    """
    cost = CostModel.unit()
    requests = [
        ScheduledRequest("A", 0.0, "A", RecomputeConfig([(3, 9)]), 10),
        ScheduledRequest("B", 2.0, "B", RecomputeConfig([(0, 2)]), 10),
    ]
    return cost, requests
