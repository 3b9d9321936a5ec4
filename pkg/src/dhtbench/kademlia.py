"""Kademlia overlay node: k-buckets with least-recently-seen eviction,
iterative alpha-parallel lookups with a FIND_VALUE short-circuit, and
replicated store/find-value."""

from __future__ import annotations

from typing import Callable, Optional

from .ids import AgentDescriptor
from .protocol import BaseNode
from .sim import GET, JOIN, MAINTENANCE, PUT


def _desc_to_wire(d: AgentDescriptor) -> tuple:
    return (d.agent_id, d.skill, d.publish_time, d.ttl, d.replica_index)


def _desc_from_wire(t: tuple, replica_index: Optional[int] = None) -> AgentDescriptor:
    return AgentDescriptor(t[0], t[1], t[2], t[3], t[4] if replica_index is None else replica_index)


# liveness-sweep fan-out per maintenance tick
_PINGS_PER_TICK = 10
# band refreshes run this many ticks apart; the sweep runs every tick
_REFRESH_EVERY = 5


class _Lookup:
    """One iterative lookup: a shortlist of closest known nodes, queried in
    synchronized rounds of alpha parallel probes."""

    def __init__(self, node: "KademliaNode", key: int, find_value: bool,
                 msg_class: str, query_id: Optional[int],
                 on_done: Callable[[list, int], None],
                 width: Optional[int] = None, light: bool = False,
                 alpha: Optional[int] = None):
        self.node = node
        self.key = key
        self.find_value = find_value
        self.msg_class = msg_class
        self.query_id = query_id
        self.on_done = on_done
        self.width = node.k if width is None else width
        self.light = light  # stop at the first non-improving round
        self.alpha = node.alpha if alpha is None else alpha
        self.dist: dict[int, int] = {}      # idx -> xor distance to key
        self.queried: set[int] = set()
        self.responded: set[int] = set()
        self.dead: set[int] = set()
        self.rounds = 0
        self.outstanding = 0
        self.terminal = False
        self.done = False
        self.prev_best: Optional[int] = None

    def start(self) -> None:
        node = self.node
        self._merge([node.idx])
        self.queried.add(node.idx)
        self.responded.add(node.idx)
        seeds = node.k_closest(self.key, node.k)
        if not seeds and node.contact is not None and node.env.is_alive(node.contact):
            seeds = [node.contact]
        self._merge(seeds)
        if len(self.dist) <= 1 and not node.joined and node.contact is None:
            self._complete([])  # empty shortlist: nothing to ask
            return
        self._next_round()

    def _merge(self, peers: list[int]) -> None:
        ids = self.node.env.node_ids
        for p in peers:
            if p not in self.dist:
                self.dist[p] = ids[p] ^ self.key

    def _top_k(self) -> list[int]:
        live = [p for p in self.dist if p not in self.dead]
        live.sort(key=lambda p: self.dist[p])
        return live[: self.width]

    def _next_round(self) -> None:
        if self.done:
            return
        top = self._top_k()
        unqueried = [p for p in top if p not in self.queried]
        if not unqueried:
            self._finish(top)
            return
        best = self.dist[top[0]] if top else None
        improved = self.prev_best is None or (best is not None and best < self.prev_best)
        self.prev_best = best
        if not improved:
            if self.light:
                self._finish(top)
                return
            self.terminal = True
        probes = unqueried if self.terminal else unqueried[: self.alpha]
        self.rounds += 1
        self.outstanding = len(probes)
        kind = "find_value" if self.find_value else "find_node"
        for p in probes:
            self.queried.add(p)
            self.node.request(p, kind,
                              {"key": self.key, "cls": self.msg_class},
                              self.msg_class,
                              on_reply=lambda src, pay, p=p: self._reply(p, pay),
                              on_timeout=lambda p=p: self._probe_dead(p),
                              query_id=self.query_id)

    def _reply(self, peer: int, payload: dict) -> None:
        if self.done:
            return
        self.responded.add(peer)
        if self.find_value and payload.get("value"):
            self._complete([_desc_from_wire(t) for t in payload["value"]])
            return
        self._merge(payload["nodes"])
        self.outstanding -= 1
        if self.outstanding == 0:
            self._next_round()

    def _probe_dead(self, peer: int) -> None:
        if self.done:
            return
        self.dead.add(peer)
        self.node.bucket_evict(peer)
        self.outstanding -= 1
        if self.outstanding == 0:
            self._next_round()

    def _finish(self, top: list[int]) -> None:
        if self.find_value:
            self._complete([])  # exhausted without a value hit
        else:
            result = [p for p in top if p in self.responded]
            self._complete(result)

    def _complete(self, result: list) -> None:
        self.done = True
        self.on_done(result, self.rounds)


class KademliaNode(BaseNode):
    def __init__(self, idx: int, node_id: int, env):
        super().__init__(idx, node_id, env)
        self.m = env.m
        self.k = env.kad_k
        self.alpha = env.kad_alpha
        self.buckets: list[list[int]] = [[] for _ in range(self.m)]
        self.bucket_activity: list[float] = [0.0] * self.m
        self._evicting: set[int] = set()  # bucket indices with a ping in flight
        self._refresh_cursor = 0
        self._ping_cursor = 0
        self._tick_count = 0
        self._on_joined: Optional[Callable[[], None]] = None
        self._join_attempts = 0

    # -- buckets -----------------------------------------------------------

    def _bucket_index(self, peer_id: int) -> int:
        return (peer_id ^ self.node_id).bit_length() - 1

    def observe_peer(self, peer: int) -> None:
        if not self.alive or peer == self.idx or not self.env.is_joined(peer):
            return
        b = self._bucket_index(self.env.node_ids[peer])
        bucket = self.buckets[b]
        self.bucket_activity[b] = self.sim.clock
        if peer in bucket:
            bucket.remove(peer)
            bucket.append(peer)
        elif len(bucket) < self.k:
            bucket.append(peer)
        elif b not in self._evicting:
            # full bucket: ping the least-recently-seen entry; keep it if it
            # answers, otherwise replace it with the newcomer
            head = bucket[0]
            self._evicting.add(b)
            self.request(head, "ping", {}, MAINTENANCE,
                         on_reply=lambda src, p: self._evict_check(b, head, peer, True),
                         on_timeout=lambda: self._evict_check(b, head, peer, False))

    def _evict_check(self, b: int, head: int, newcomer: int, head_alive: bool) -> None:
        self._evicting.discard(b)
        if not self.alive:
            return
        bucket = self.buckets[b]
        if head_alive:
            if head in bucket:
                bucket.remove(head)
                bucket.append(head)  # refreshed; newcomer dropped
        else:
            if head in bucket:
                bucket.remove(head)
            if newcomer not in bucket and len(bucket) < self.k:
                bucket.append(newcomer)

    def bucket_evict(self, peer: int) -> None:
        b = self._bucket_index(self.env.node_ids[peer])
        if peer in self.buckets[b]:
            self.buckets[b].remove(peer)

    def k_closest(self, key: int, count: int) -> list[int]:
        """Exact `count` closest known contacts to key by XOR distance.

        Buckets are distance bands relative to key: the key's own bucket
        holds the closest entries, all lower buckets form the next band, and
        higher buckets follow in index order, so bands are collected in order
        and only the collected prefix needs sorting.
        """
        ids = self.env.node_ids
        my_key_dist = self.node_id ^ key
        if my_key_dist == 0:
            bands: list[list[int]] = [self.buckets[i] for i in range(self.m)]
        else:
            bk = my_key_dist.bit_length() - 1
            low = [p for i in range(bk) for p in self.buckets[i]]
            bands = [self.buckets[bk], low] + [self.buckets[i] for i in range(bk + 1, self.m)]
        out: list[int] = []
        for band in bands:
            out.extend(band)
            if len(out) >= count:
                break
        out.sort(key=lambda p: ids[p] ^ key)
        return out[:count]

    # -- join --------------------------------------------------------------

    def join(self, contact: Optional[int], on_joined: Callable[[], None]) -> None:
        self.contact = contact
        self._on_joined = on_joined
        # placed from the moment the join starts: the registry must stop
        # churning when the last join begins, or concurrent self-lookups keep
        # finding improvements and never reach their terminal round
        self.env.mark_placed(self.idx)
        if contact is None:
            self.joined = True
            self.ready = True
            self._start_maintenance()
            on_joined()
            return
        self._attempt_join(contact)

    def _attempt_join(self, contact: int) -> None:
        if not self.alive:
            return
        self._join_attempts += 1
        self.observe_peer(contact)
        self.lookup(self.node_id, find_value=False, msg_class=JOIN, query_id=None,
                    on_done=lambda res, rounds: self._join_done(res))

    def _join_done(self, result: list) -> None:
        if self.joined or not self.alive:
            return
        others = [p for p in result if p != self.idx]
        if not others:
            if self._join_attempts < 3:
                contact = self.env.pick_contact(self.idx)
                if contact is not None:
                    self._attempt_join(contact)
                    return
            self._join_attempts = 0
            self.add_timer(self.sim.schedule_after(1.0, self._retry_join_later))
            return
        self.joined = True
        self.ready = True
        self._start_maintenance()
        if self._on_joined:
            self._on_joined()

    def _retry_join_later(self) -> None:
        if self.joined or not self.alive:
            return
        contact = self.env.pick_contact(self.idx)
        if contact is None:
            self.add_timer(self.sim.schedule_after(1.0, self._retry_join_later))
            return
        self.contact = contact
        self._attempt_join(contact)

    def _start_maintenance(self) -> None:
        for b in range(self.m):
            self.bucket_activity[b] = self.sim.clock
        self.start_periodic(self.env.kad_refresh_period, self.refresh_tick)
        # warm the far bands once, staggered: the join self-lookup only fills
        # buckets near our own id, and without long-range contacts every
        # lookup crawls instead of halving its distance each round
        lo = self._lowest_populated_band()
        delay = 0.5
        for _ in range(2):  # two targets per band: one leaves buckets too thin
            for b in range(self.m - 1, lo - 1, -1):
                if len(self.buckets[b]) < self.k:
                    self.add_timer(self.sim.schedule_after(delay, lambda b=b: self._refresh_band(b)))
                    delay += 0.5

    def _lowest_populated_band(self) -> int:
        """Bands below the closest known contact are empty in expectation."""
        dmin = min((self.env.node_ids[p] ^ self.node_id
                    for bkt in self.buckets for p in bkt), default=1 << (self.m - 1))
        return max(dmin.bit_length() - 1, 0)

    def _refresh_band(self, b: int, alpha: int = 2) -> None:
        if not self.alive or not self.joined:
            return
        self.bucket_activity[b] = self.sim.clock
        # random ID at XOR distance [2^b, 2^(b+1)) from self
        span = 1 << b
        offset = span + int(self.env.proto_rng.integers(0, span))
        target = self.node_id ^ offset
        # the join-time warm keeps alpha=2: it only needs a couple of live
        # contacts per band, and its fan-out dominates bootstrap traffic
        self.lookup(target, find_value=False, msg_class=MAINTENANCE, query_id=None,
                    on_done=lambda res, rounds: None, light=True, alpha=alpha)

    # -- lookups -----------------------------------------------------------

    def lookup(self, key: int, find_value: bool, msg_class: str,
               query_id: Optional[int], on_done: Callable[[list, int], None],
               width: Optional[int] = None, light: bool = False,
               alpha: Optional[int] = None) -> None:
        _Lookup(self, key, find_value, msg_class, query_id, on_done,
                width=width, light=light, alpha=alpha).start()

    def put(self, key: int, descriptor: AgentDescriptor) -> None:
        wire = _desc_to_wire(descriptor)

        def place(result: list, rounds: int) -> None:
            if not self.alive:
                return
            targets = result[: self.env.replication] or [self.idx]
            for j, t in enumerate(targets):
                if t == self.idx:
                    self.store.put(key, _desc_from_wire(wire, replica_index=j))
                else:
                    self.send(t, "store", {"key": key, "desc": wire, "replica": j}, PUT)

        # converge on the replica set only; placing needs the top few exact,
        # not the full k-wide frontier
        self.lookup(key, find_value=False, msg_class=PUT, query_id=None,
                    on_done=place, width=self.env.replication)

    def get(self, key: int, query_id: int, top_k: int,
            on_done: Callable[[list, int], None]) -> None:
        if not self.ready:
            # a node not yet settled into the overlay has no business
            # serving discovery requests
            on_done([], -1)
            return
        local = self.store.get_live(key, self.sim.clock)
        if local:
            local.sort(key=lambda d: d.agent_id)
            on_done(local[:top_k], 0)
            return

        def finish(result: list, rounds: int) -> None:
            descs = sorted(result, key=lambda d: d.agent_id)[:top_k] if result else []
            on_done(descs, rounds)

        self.lookup(key, find_value=True, msg_class=GET, query_id=query_id, on_done=finish)

    # -- maintenance -------------------------------------------------------

    def refresh_tick(self) -> None:
        if not self.joined:
            return
        self._tick_count += 1
        if self._tick_count % _REFRESH_EVERY == 0:
            # rotating band refresh: keeps every band minimally populated
            # without flooding the table with fresh contacts
            lo = self._lowest_populated_band()
            if self._refresh_cursor < lo:
                self._refresh_cursor = self.m - 1
            b = self._refresh_cursor
            self._refresh_cursor -= 1
            self._refresh_band(b)
        # liveness sweep: ping a handful of contacts per tick so dead
        # entries are evicted promptly instead of lingering until a lookup
        # trips over them
        contacts = [p for bkt in self.buckets for p in bkt]
        if not contacts:
            return
        for _ in range(min(_PINGS_PER_TICK, len(contacts))):
            self._ping_cursor = (self._ping_cursor + 1) % len(contacts)
            peer = contacts[self._ping_cursor]
            self.request(peer, "ping", {}, MAINTENANCE,
                         on_reply=lambda src, p: None,
                         on_timeout=lambda peer=peer: self.bucket_evict(peer))

    # -- message handling --------------------------------------------------

    def _closest_reply(self, key: int, src: int, cls: str) -> list[int]:
        """Contacts returned to a probe.  Onboarding traffic (join-time
        self-lookups and the publish that fires at join completion)
        additionally draws on the placement registry: mid-bootstrap buckets
        only hold the handful of peers that finished joining, which makes
        concurrent self-lookups crawl one bucket band at a time and scatters
        first-publish replicas onto far-off nodes where they linger for a
        full TTL."""
        out = self.k_closest(key, self.k)
        if cls != GET:
            out = list(dict.fromkeys(out + self.env.placed_near(key, self.k)))
            ids = self.env.node_ids
            out.sort(key=lambda p: ids[p] ^ key)
            del out[self.k:]
        return [p for p in out if p != src]

    def handle(self, src: int, kind: str, payload: dict, query_id) -> None:
        if kind == "find_node":
            self.reply(src, payload,
                       {"nodes": self._closest_reply(payload["key"], src, payload["cls"])},
                       payload["cls"], query_id)
        elif kind == "find_value":
            value = self.store.get_live(payload["key"], self.sim.clock)
            value.sort(key=lambda d: d.agent_id)
            self.reply(src, payload,
                       {"nodes": self._closest_reply(payload["key"], src, payload["cls"]),
                        "value": [_desc_to_wire(d) for d in value]},
                       payload["cls"], query_id)
        elif kind == "store":
            self.store.put(payload["key"],
                           _desc_from_wire(payload["desc"], replica_index=payload["replica"]))
        elif kind == "ping":
            self.reply(src, payload, {}, MAINTENANCE)

    # -- metrics -----------------------------------------------------------

    def routing_entry_count(self) -> int:
        return sum(len(b) for b in self.buckets)
