"""Deterministic discrete-event engine: virtual clock, event queue, message
delivery with latency/loss, and named seeded RNG streams."""

from __future__ import annotations

import heapq
from typing import Callable, Optional

import numpy as np

from .ids import fnv1a64

# Event kinds (informational tags; dispatch is by callback).
MESSAGE_DELIVERY = "MessageDelivery"
TIMER_FIRE = "TimerFire"
NODE_JOIN = "NodeJoin"
NODE_LEAVE = "NodeLeave"
NODE_REJOIN = "NodeRejoin"
QUERY_ISSUE = "QueryIssue"
PUBLISH_ISSUE = "PublishIssue"
REPUBLISH_TICK = "RepublishTick"
MAINTENANCE_TICK = "MaintenanceTick"
EXPIRY_SWEEP = "ExpirySweep"

# Message classes for control-plane cost accounting.
GET = "GET"
PUT = "PUT"
MAINTENANCE = "MAINTENANCE"
JOIN = "JOIN"
MESSAGE_CLASSES = (GET, PUT, MAINTENANCE, JOIN)


class EventHandle:
    """Cancellation token for a scheduled event."""

    __slots__ = ("fire_time", "seq", "kind", "fn", "cancelled")

    def __init__(self, fire_time: float, seq: int, kind: str, fn: Callable[[], None]):
        self.fire_time = fire_time
        self.seq = seq
        self.kind = kind
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Named RNG stream: identical (seed, label) gives an identical sequence
    on every platform.  Adding a consumer never perturbs other streams."""
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, fnv1a64(label.encode())]))


def sample_exponential(rng: np.random.Generator, mean: float) -> float:
    """Strictly positive draw from Exp(mean)."""
    if mean <= 0:
        raise ValueError(f"exponential mean must be positive, got {mean}")
    x = rng.exponential(mean)
    while x <= 0.0:  # measure-zero corner of the generator
        x = rng.exponential(mean)
    return x


class Simulator:
    """Single-threaded event loop with a monotone real-valued clock.

    Events execute in strict (fire_time, seq) order; seq is the insertion
    counter, so same-instant events run in scheduling order.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.clock = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, EventHandle]] = []
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, label: str) -> np.random.Generator:
        if label not in self._streams:
            self._streams[label] = rng_stream(self.seed, label)
        return self._streams[label]

    def schedule(self, fire_time: float, fn: Callable[[], None], kind: str = TIMER_FIRE) -> EventHandle:
        if fire_time < self.clock:
            raise ValueError(f"cannot schedule into the past: t={fire_time} < clock={self.clock}")
        h = EventHandle(fire_time, self._seq, kind, fn)
        self._seq += 1
        heapq.heappush(self._heap, (fire_time, h.seq, h))
        return h

    def schedule_after(self, delay: float, fn: Callable[[], None], kind: str = TIMER_FIRE) -> EventHandle:
        return self.schedule(self.clock + delay, fn, kind)

    def run_until(self, end: float) -> None:
        """Execute all events with fire_time <= end; clock ends at `end`."""
        heap = self._heap
        while heap and heap[0][0] <= end:
            fire_time, _, h = heapq.heappop(heap)
            if h.cancelled:
                continue
            self.clock = fire_time
            h.fn()
        if end > self.clock:
            self.clock = end

    def pending(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)


def build_er_underlay(n: int, avg_degree: float, rng: np.random.Generator) -> list[list[int]]:
    """Undirected Erdos-Renyi-style underlay with a fixed edge count giving the
    target average degree.  Returns adjacency lists (sorted, deterministic)."""
    adj: list[list[int]] = [[] for _ in range(n)]
    if n < 2:
        return adj
    target_edges = int(round(n * avg_degree / 2.0))
    max_edges = n * (n - 1) // 2
    target_edges = min(target_edges, max_edges)
    seen: set[tuple[int, int]] = set()
    while len(seen) < target_edges:
        a = int(rng.integers(0, n))
        b = int(rng.integers(0, n))
        if a == b:
            continue
        e = (a, b) if a < b else (b, a)
        if e in seen:
            continue
        seen.add(e)
        adj[e[0]].append(e[1])
        adj[e[1]].append(e[0])
    for neighbors in adj:
        neighbors.sort()
    return adj


class Network:
    """Message layer: per-message latency, Bernoulli loss, class-tagged send
    accounting, and tombstone delivery for dead destinations."""

    def __init__(self, sim: Simulator, latency: float = 1.0, loss: float = 0.0,
                 underlay: Optional[list[list[int]]] = None):
        if latency <= 0:
            raise ValueError("per-message latency must be positive")
        if not 0.0 <= loss <= 1.0:
            raise ValueError("loss probability must be in [0, 1]")
        self.sim = sim
        self.latency = latency
        self.loss = loss
        self.underlay = underlay or []
        self.nodes: list = []          # protocol node objects, index == node index
        self._loss_rng = sim.stream("loss") if loss > 0.0 else None
        # Accounting: send timestamps per class (nondecreasing), per-query GET
        # counts, and total sends/deliveries.
        self.send_times: dict[str, list[float]] = {c: [] for c in MESSAGE_CLASSES}
        self.query_msgs: dict[int, int] = {}
        self.sends = 0
        self.deliveries = 0

    def send(self, src: int, dst: int, kind: str, payload: dict,
             msg_class: str, query_id: Optional[int] = None) -> None:
        """Count the send, then deliver after `latency` unless lost or the
        destination is dead (tombstone drop)."""
        self.sends += 1
        self.send_times[msg_class].append(self.sim.clock)
        if query_id is not None:
            self.query_msgs[query_id] = self.query_msgs.get(query_id, 0) + 1
        if self._loss_rng is not None and self._loss_rng.random() < self.loss:
            return
        self.sim.schedule_after(self.latency, lambda: self._deliver(src, dst, kind, payload, query_id),
                                MESSAGE_DELIVERY)

    def _deliver(self, src: int, dst: int, kind: str, payload: dict, query_id: Optional[int]) -> None:
        node = self.nodes[dst] if dst < len(self.nodes) else None
        if node is None or not node.alive:
            # tombstone: silently dropped; if this was a request, the sender's
            # timeout fires at send_time + timeout
            if "_tmo" in payload:
                requester = self.nodes[payload["_src"]]
                if requester is not None and requester.alive:
                    rid = payload["_rid"]
                    self.sim.schedule_after(payload["_tmo"] - self.latency,
                                            lambda: requester._expire(rid))
            return
        self.deliveries += 1
        node.on_message(src, kind, payload, query_id)

    def sends_in_window(self, start: float, end: float, msg_class: Optional[str] = None) -> int:
        """Messages sent with start <= t <= end, optionally one class only."""
        import bisect
        classes = [msg_class] if msg_class else list(MESSAGE_CLASSES)
        total = 0
        for c in classes:
            times = self.send_times[c]
            total += bisect.bisect_right(times, end) - bisect.bisect_left(times, start)
        return total
