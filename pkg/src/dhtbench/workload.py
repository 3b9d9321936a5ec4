"""Workload and scenario driver: skill catalog, staggered bootstrap,
publication with republish, query issuing under the three startup regimes,
and the exponential session churn process."""

from __future__ import annotations

import bisect
import math

from dataclasses import dataclass, field
from typing import Callable, Optional

from .chord import ChordNode
from .config import NUM_SKILLS, BenchmarkConfig
from .ids import AgentDescriptor, hash_skill, node_id_for_label
from .kademlia import KademliaNode
from .pastry import PastryNode
from .sim import (EXPIRY_SWEEP, NODE_JOIN, NODE_LEAVE, NODE_REJOIN,
                  PUBLISH_ISSUE, QUERY_ISSUE, Network, Simulator,
                  build_er_underlay, sample_exponential)

PROTOCOL_CLASSES = {"chord": ChordNode, "pastry": PastryNode, "kademlia": KademliaNode}

# Kademlia maintenance tick: every tick sweeps a slice of bucket contacts
# with liveness pings; bucket refreshes rotate over the populated bands on a
# slower multiple of this period.
KAD_REFRESH_PERIOD = 2.0

# Queries that outlive every protocol-level failsafe are closed by the driver.
DRAIN_GRACE = 600.0


class Catalog:
    """Fixed 50-skill catalog; agent i advertises skill (i mod 50)."""

    def __init__(self, n: int, num_skills: int = NUM_SKILLS):
        self.n = n
        self.num_skills = num_skills
        self.skills = [f"skill_{i:02d}" for i in range(num_skills)]

    def skill_of(self, agent: int) -> str:
        return self.skills[agent % self.num_skills]

    def providers(self, skill: str) -> list[int]:
        idx = self.skills.index(skill)
        return list(range(idx, self.n, self.num_skills))


class ChurnProcess:
    """Alternating-renewal up/down process per node: sessions ~ Exp(session
    mean), downtimes ~ Exp(downtime mean).  Also usable standalone (without
    protocol nodes) to calibrate the alive fraction."""

    def __init__(self, sim: Simulator, n: int, session_mean: float, downtime_mean: float,
                 on_down: Optional[Callable[[int], None]] = None,
                 on_up: Optional[Callable[[int], None]] = None):
        self.sim = sim
        self.n = n
        self.session_mean = session_mean
        self.downtime_mean = downtime_mean
        self.rng = sim.stream("churn")
        self.on_down = on_down
        self.on_up = on_up
        self.up = [True] * n
        self.start_time = 0.0
        self._last_change = [0.0] * n
        self._acc_up = [0.0] * n

    def start(self, at: Optional[float] = None) -> None:
        at = self.sim.clock if at is None else at
        self.start_time = at
        for i in range(self.n):
            self._last_change[i] = at
            self.sim.schedule(at + sample_exponential(self.rng, self.session_mean),
                              lambda i=i: self._leave(i), NODE_LEAVE)

    def _leave(self, i: int) -> None:
        now = self.sim.clock
        self._acc_up[i] += now - self._last_change[i]
        self._last_change[i] = now
        self.up[i] = False
        if self.on_down:
            self.on_down(i)
        self.sim.schedule(now + sample_exponential(self.rng, self.downtime_mean),
                          lambda: self._return(i), NODE_REJOIN)

    def _return(self, i: int) -> None:
        now = self.sim.clock
        self._last_change[i] = now
        self.up[i] = True
        if self.on_up:
            self.on_up(i)
        self.sim.schedule(now + sample_exponential(self.rng, self.session_mean),
                          lambda: self._leave(i), NODE_LEAVE)

    def mean_alive_fraction(self, now: Optional[float] = None) -> float:
        now = self.sim.clock if now is None else now
        span = now - self.start_time
        if span <= 0:
            return 1.0
        total = sum(self._acc_up)
        total += sum(now - self._last_change[i] for i in range(self.n) if self.up[i])
        return total / (self.n * span)


@dataclass
class QueryRecord:
    qid: int
    issue_time: float
    origin: int
    done_time: Optional[float] = None
    descriptors: list = field(default_factory=list)
    hops: int = -1

    @property
    def latency(self) -> float:
        return (self.done_time - self.issue_time) if self.done_time is not None else float("inf")


@dataclass
class RunResult:
    protocol: str
    regime: str
    rep: int
    seed: int
    nodes: int
    target_skill: str
    provider_count: int
    queries: list
    mean_routing_entries: float
    bootstrap_done: Optional[float]
    net: Network


class RunEnv:
    """Per-run context handed to protocol nodes; also the omniscient liveness
    oracle used for tombstone-equivalent checks."""

    def __init__(self, driver: "BenchmarkRun", cfg: BenchmarkConfig):
        self.sim = driver.sim
        self.net = driver.net
        self.node_ids = driver.node_ids
        self.m = cfg.id_bits
        self.pastry_b = cfg.pastry_b
        self.pastry_leafset = cfg.pastry_leafset
        self.succ_list_len = cfg.successor_list
        self.stabilize_period = cfg.stabilize_period
        self.replication = cfg.replication
        self.kad_k = cfg.kad_k
        self.kad_alpha = cfg.kad_alpha
        self.kad_refresh_period = KAD_REFRESH_PERIOD
        self.proto_rng = driver.sim.stream("protocol")
        self._driver = driver

    def pick_contact(self, idx: int) -> Optional[int]:
        return self._driver.pick_contact(idx)

    def is_alive(self, idx: int) -> bool:
        node = self.net.nodes[idx]
        return node is not None and node.alive

    def is_joined(self, idx: int) -> bool:
        node = self.net.nodes[idx]
        return node is not None and node.alive and node.joined

    # Placement registry: a node counts as a ring member from the moment an
    # admission is granted, not when the grant message arrives.  During the
    # bootstrap flood every admission happens before any joiner has flipped
    # to joined, so placement must be visible immediately or all joiners get
    # the same successor.
    def mark_placed(self, idx: int) -> None:
        self._driver.mark_placed(idx)

    def is_placed(self, idx: int) -> bool:
        return idx in self._driver.placed and self.is_alive(idx)

    def placed_nodes(self):
        return self._driver.placed

    def placed_near(self, key: int, count: int) -> list[int]:
        return self._driver.placed_near(key, count)


class BenchmarkRun:
    """One simulation: one protocol, one regime, one repetition."""

    def __init__(self, cfg: BenchmarkConfig, protocol: str, regime: str, rep: int):
        self.cfg = cfg
        self.protocol = protocol
        self.regime = regime
        self.rep = rep
        self.seed = cfg.seed + rep
        self.sim = Simulator(self.seed)
        self.catalog = Catalog(cfg.nodes)
        self.underlay = build_er_underlay(cfg.nodes, cfg.underlay_avg_degree,
                                          self.sim.stream("underlay"))
        self.net = Network(self.sim, cfg.latency, cfg.loss, self.underlay)
        taken: set[int] = set()
        self.node_ids: list[int] = []
        for i in range(cfg.nodes):
            nid = node_id_for_label(f"agent_{i:04d}", cfg.id_bits, taken)
            taken.add(nid)
            self.node_ids.append(nid)
        self.env = RunEnv(self, cfg)
        self.node_cls = PROTOCOL_CLASSES[protocol]
        self.net.nodes = [self.node_cls(i, self.node_ids[i], self.env)
                          for i in range(cfg.nodes)]
        self.started: list[bool] = [False] * cfg.nodes
        self.joined_set: set[int] = set()
        self.placed: set[int] = set()
        self._placed_ids: list[tuple[int, int]] = []
        self._placed_version = 0
        self._near_cache: dict[tuple[int, int], tuple[int, list[int]]] = {}
        self._bootstrap_remaining = cfg.nodes
        self.bootstrap_done: Optional[float] = None
        self.target_key = hash_skill(cfg.target_skill, cfg.id_bits)
        self.queries: list[QueryRecord] = []
        self._contact_rng = self.sim.stream("contacts")
        self._publish_rng = self.sim.stream("publish")
        self._query_rng = self.sim.stream("workload")
        self.churn: Optional[ChurnProcess] = None
        if cfg.churn_enabled:
            self.churn = ChurnProcess(self.sim, cfg.nodes, cfg.session_mean,
                                      cfg.downtime_mean,
                                      on_down=self._node_down, on_up=self._node_up)

    # -- membership --------------------------------------------------------

    def mark_placed(self, idx: int) -> None:
        if idx not in self.placed:
            self.placed.add(idx)
            bisect.insort(self._placed_ids, (self.node_ids[idx], idx))
            self._placed_version += 1

    def placed_near(self, key: int, count: int) -> list[int]:
        """Up to `count` placed members XOR-closest to key.  The candidates
        live in a numerically aligned block around the key, so a bounded
        window of ring neighbors suffices."""
        cached = self._near_cache.get((key, count))
        if cached is not None and cached[0] == self._placed_version:
            return cached[1]
        ids = self._placed_ids
        if not ids:
            return []
        span = min(3 * count, len(ids))
        j = bisect.bisect_left(ids, (key, -1))
        cands = {ids[(j + k) % len(ids)] for k in range(-span, span)}
        ranked = sorted((nid ^ key, idx) for nid, idx in cands
                        if self.env.is_alive(idx))
        out = [idx for _, idx in ranked[:count]]
        self._near_cache[(key, count)] = (self._placed_version, out)
        return out

    def pick_contact(self, idx: int) -> Optional[int]:
        neighbors = [j for j in self.underlay[idx] if j in self.joined_set]
        if neighbors:
            return neighbors[int(self._contact_rng.integers(0, len(neighbors)))]
        pool = sorted(self.joined_set - {idx})
        if pool:
            return pool[int(self._contact_rng.integers(0, len(pool)))]
        return None

    def _start_join(self, i: int) -> None:
        self.started[i] = True
        contact = self.pick_contact(i) if i != 0 else None
        self.net.nodes[i].join(contact, lambda: self._join_finished(i, initial=True))

    def _join_finished(self, i: int, initial: bool) -> None:
        self.joined_set.add(i)
        self._schedule_publish(i)
        if initial:
            self._bootstrap_remaining -= 1
            if self._bootstrap_remaining == 0:
                self._bootstrap_complete()

    def _bootstrap_complete(self) -> None:
        self.bootstrap_done = self.sim.clock
        if self.churn is not None:
            # start at the next whole time unit so every protocol faces the
            # identical churn trace (bootstrap length varies per protocol)
            self.churn.start(math.ceil(self.bootstrap_done))
        if self.regime == "warmed":
            self._schedule_queries(self.bootstrap_done + self.cfg.warmup)

    def _node_down(self, i: int) -> None:
        self.joined_set.discard(i)
        if i in self.placed:
            self.placed.discard(i)
            self._placed_ids.remove((self.node_ids[i], i))
            self._placed_version += 1
        self.net.nodes[i].die()

    def _node_up(self, i: int) -> None:
        # same identifier, empty descriptor store, empty routing state
        node = self.node_cls(i, self.node_ids[i], self.env)
        self.net.nodes[i] = node
        contact = self.pick_contact(i)
        node.join(contact, lambda: self._join_finished(i, initial=False))

    # -- publication -------------------------------------------------------

    def _schedule_publish(self, i: int) -> None:
        node = self.net.nodes[i]
        spread = self.cfg.publish_spread
        offset = float(self._publish_rng.uniform(0.0, spread)) if spread > 0 else 0.0
        node.add_timer(self.sim.schedule_after(offset, lambda: self._publish(i),
                                               PUBLISH_ISSUE))

    def _publish(self, i: int) -> None:
        node = self.net.nodes[i]
        if not node.alive:
            return
        skill = self.catalog.skill_of(i)
        d = AgentDescriptor(i, skill, self.sim.clock, self.cfg.ttl)
        node.put(hash_skill(skill, self.cfg.id_bits), d)
        node.add_timer(self.sim.schedule_after(self.cfg.republish_period,
                                               lambda: self._publish(i), PUBLISH_ISSUE))

    def _sweep(self) -> None:
        now = self.sim.clock
        for node in self.net.nodes:
            if node is not None and node.alive:
                node.store.sweep(now)

    # -- queries -----------------------------------------------------------

    def _query_times(self, admission: float) -> list[float]:
        step = 1.0 / self.cfg.query_rate
        times = []
        k = 1
        while True:
            t = k * step
            if t > self.cfg.horizon + 1e-9:
                break
            if t > admission + 1e-9:
                times.append(t)
            k += 1
        return times

    def _schedule_queries(self, admission: float) -> None:
        for t in self._query_times(admission):
            self.sim.schedule(t, self._issue_query, QUERY_ISSUE)

    def _issue_query(self) -> None:
        eligible = [i for i in range(self.cfg.nodes) if self.env.is_alive(i)]
        if not eligible:
            return
        origin = eligible[int(self._query_rng.integers(0, len(eligible)))]
        qid = len(self.queries)
        rec = QueryRecord(qid, self.sim.clock, origin)
        self.queries.append(rec)

        def done(descs, hops):
            if rec.done_time is None:
                rec.done_time = self.sim.clock
                rec.descriptors = list(descs)
                rec.hops = hops

        self.net.nodes[origin].get(self.target_key, qid, self.cfg.top_k, done)

    # -- execution ---------------------------------------------------------

    def execute(self) -> RunResult:
        cfg = self.cfg
        warmup = cfg.warmup
        stagger = min(0.01, warmup / cfg.nodes) if cfg.nodes > 1 else 0.0
        for i in range(cfg.nodes):
            self.sim.schedule(i * stagger, lambda i=i: self._start_join(i), NODE_JOIN)
        t = cfg.republish_period
        while t <= cfg.horizon:
            self.sim.schedule(t, self._sweep, EXPIRY_SWEEP)
            t += cfg.republish_period
        if self.regime == "immediate":
            self._schedule_queries(0.0)
        elif self.regime == "warmup_only":
            self._schedule_queries(warmup)
        # warmed queries are scheduled when bootstrap completes

        self.sim.run_until(cfg.horizon)
        deadline = cfg.horizon + DRAIN_GRACE
        while (any(q.done_time is None for q in self.queries)
               and self.sim.clock < deadline):
            self.sim.run_until(min(self.sim.clock + 5.0, deadline))
        for q in self.queries:
            if q.done_time is None:  # closed by the driver, counted as failed
                q.done_time = self.sim.clock
                q.descriptors = []
                q.hops = -1

        alive_entries = [n.routing_entry_count() for n in self.net.nodes
                         if n is not None and n.alive]
        mean_entries = sum(alive_entries) / len(alive_entries) if alive_entries else 0.0
        return RunResult(
            protocol=self.protocol,
            regime=self.regime,
            rep=self.rep,
            seed=self.seed,
            nodes=cfg.nodes,
            target_skill=cfg.target_skill,
            provider_count=len(self.catalog.providers(cfg.target_skill)),
            queries=self.queries,
            mean_routing_entries=mean_entries,
            bootstrap_done=self.bootstrap_done,
            net=self.net,
        )
