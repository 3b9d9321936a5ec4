"""Metric computation: success, precision, recall, nearest-rank P95, the two
message-cost views, and cross-repetition aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .workload import RunResult


@dataclass
class MetricsRecord:
    protocol: str
    nodes: int
    rep: int
    seed: int
    regime: str
    query_count: int
    success: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    p95_latency: Optional[float]
    msgs_observed_per_query: Optional[float]
    msgs_get_per_query: Optional[float]
    mean_hops: Optional[float]
    mean_routing_entries: float
    window: Optional[tuple] = None
    latencies: list = field(default_factory=list)   # pooled-P95 input
    returned_count: int = 0                         # precision weight


def query_success(rec, target_skill: str) -> bool:
    return any(d.skill == target_skill for d in rec.descriptors)


def compute_success(queries: list, target_skill: str) -> Optional[float]:
    if not queries:
        return None
    return sum(query_success(q, target_skill) for q in queries) / len(queries)


def compute_recall(queries: list, target_skill: str, provider_count: int) -> Optional[float]:
    if not queries:
        return None
    total = 0.0
    for q in queries:
        matching = {d.agent_id for d in q.descriptors if d.skill == target_skill}
        total += len(matching) / provider_count
    return total / len(queries)


def compute_precision(queries: list, target_skill: str) -> Optional[float]:
    """Mean matching fraction over queries that returned anything."""
    fracs = []
    for q in queries:
        if q.descriptors:
            matching = sum(d.skill == target_skill for d in q.descriptors)
            fracs.append(matching / len(q.descriptors))
    if not fracs:
        return None
    return sum(fracs) / len(fracs)


def compute_p95(latencies: list) -> Optional[float]:
    """Nearest-rank 95th percentile: sorted sample, 1-based index ceil(.95 n)."""
    if not latencies:
        return None
    s = sorted(latencies)
    return s[math.ceil(0.95 * len(s)) - 1]


def compute_msgs_per_query(net, window: tuple, query_count: int,
                           get_only: bool) -> Optional[float]:
    if query_count < 1:
        return None
    if get_only:
        # attribution by query ID, not by window
        return sum(net.query_msgs.values()) / query_count
    return net.sends_in_window(window[0], window[1]) / query_count


def compute_record(run: RunResult, target_skill: Optional[str] = None) -> MetricsRecord:
    target = target_skill or run.target_skill
    queries = run.queries
    n_q = len(queries)
    window = None
    p95 = observed = get_cost = mean_hops = None
    latencies: list = []
    if n_q:
        window = (min(q.issue_time for q in queries),
                  max(q.done_time for q in queries))
        latencies = [q.latency for q in queries]
        p95 = compute_p95(latencies)
        observed = compute_msgs_per_query(run.net, window, n_q, get_only=False)
        get_cost = compute_msgs_per_query(run.net, window, n_q, get_only=True)
        hops = [q.hops for q in queries if q.hops >= 0]
        mean_hops = sum(hops) / len(hops) if hops else None
    return MetricsRecord(
        protocol=run.protocol,
        nodes=run.nodes,
        rep=run.rep,
        seed=run.seed,
        regime=run.regime,
        query_count=n_q,
        success=compute_success(queries, target),
        precision=compute_precision(queries, target),
        recall=compute_recall(queries, target, run.provider_count),
        p95_latency=p95,
        msgs_observed_per_query=observed,
        msgs_get_per_query=get_cost,
        mean_hops=mean_hops,
        mean_routing_entries=run.mean_routing_entries,
        window=window,
        latencies=latencies,
        returned_count=sum(1 for q in queries if q.descriptors),
    )


def _weighted(pairs) -> Optional[float]:
    """Weighted mean over (value, weight) pairs, skipping absent values."""
    num = den = 0.0
    for v, w in pairs:
        if v is None or w <= 0:
            continue
        num += v * w
        den += w
    return num / den if den > 0 else None


def aggregate_runs(records: list) -> dict:
    """Aggregate one (protocol, regime) cell: query-count-weighted means,
    P95 over the pooled latency sample."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    cell = (records[0].protocol, records[0].regime, records[0].nodes)
    for r in records:
        if (r.protocol, r.regime, r.nodes) != cell:
            raise ValueError(f"mixed aggregation cells: {cell} vs "
                             f"{(r.protocol, r.regime, r.nodes)}")
    pooled = [lat for r in records for lat in r.latencies]
    total_q = sum(r.query_count for r in records)
    return {
        "protocol": cell[0],
        "regime": cell[1],
        "nodes": cell[2],
        "reps": len(records),
        "query_count": total_q,
        "success": _weighted((r.success, r.query_count) for r in records),
        "precision": _weighted((r.precision, r.returned_count) for r in records),
        "recall": _weighted((r.recall, r.query_count) for r in records),
        "p95_latency": compute_p95(pooled),
        "msgs_observed_per_query": _weighted(
            (r.msgs_observed_per_query, r.query_count) for r in records),
        "msgs_get_per_query": _weighted(
            (r.msgs_get_per_query, r.query_count) for r in records),
        "mean_hops": _weighted((r.mean_hops, r.query_count) for r in records),
        "mean_routing_entries": _weighted(
            (r.mean_routing_entries, 1.0) for r in records),
    }
