"""Pastry overlay node: prefix routing table, leaf set, join with
announcement, recursive prefix routing with per-hop acknowledgements, and
replicated put/get."""

from __future__ import annotations

from typing import Callable, Optional

from .ids import AgentDescriptor, ring_distance, shared_prefix_len, digit_at
from .protocol import BaseNode
from .sim import GET, JOIN, MAINTENANCE, PUT

_MODE_CLASS = {"get": GET, "put": PUT, "join": JOIN}
_MAX_ROUTE_RETRIES = 8


def _desc_to_wire(d: AgentDescriptor) -> tuple:
    return (d.agent_id, d.skill, d.publish_time, d.ttl, d.replica_index)


def _desc_from_wire(t: tuple, replica_index: Optional[int] = None) -> AgentDescriptor:
    return AgentDescriptor(t[0], t[1], t[2], t[3], t[4] if replica_index is None else replica_index)


class PastryNode(BaseNode):
    def __init__(self, idx: int, node_id: int, env):
        super().__init__(idx, node_id, env)
        self.m = env.m
        self.b = env.pastry_b
        self.rows = self.m // self.b
        self.cols = 1 << self.b
        self.half_leaf = env.pastry_leafset // 2
        self.table: list[list[Optional[int]]] = [[None] * self.cols for _ in range(self.rows)]
        self.leaf_cw: list[int] = []   # clockwise (numerically larger, wrapping)
        self.leaf_ccw: list[int] = []  # counterclockwise side
        self._leaf_cursor = 0
        self._gets: dict[int, tuple] = {}
        self._join_attempts = 0
        self._on_joined: Optional[Callable[[], None]] = None

    # -- helpers -----------------------------------------------------------

    def _id(self, idx: int) -> int:
        return self.env.node_ids[idx]

    def _cdist(self, a: int, b: int) -> int:
        d = ring_distance(a, b, self.m)
        return min(d, (1 << self.m) - d)

    def _rank(self, nid: int, key: int) -> tuple[int, int]:
        """Numeric-closeness rank to key; ties break toward the smaller id."""
        return (self._cdist(nid, key), nid)

    def _spl(self, a: int, b: int) -> int:
        return shared_prefix_len(a, b, self.b, self.m)

    def known_nodes(self) -> list[int]:
        seen = dict.fromkeys(self.leaf_ccw + self.leaf_cw)
        for row in self.table:
            for e in row:
                if e is not None and e != self.idx:
                    seen.setdefault(e)
        return list(seen)

    def _add_to_table(self, c: int) -> None:
        if c == self.idx:
            return
        r = self._spl(self.node_id, self._id(c))
        if r >= self.rows:
            return
        d = digit_at(self._id(c), r, self.b, self.m)
        if self.table[r][d] is None:
            self.table[r][d] = c

    def _add_leaf(self, c: int) -> None:
        if c == self.idx or c in self.leaf_cw or c in self.leaf_ccw:
            return
        cid = self._id(c)
        dcw = ring_distance(self.node_id, cid, self.m)
        dccw = ring_distance(cid, self.node_id, self.m)
        if dcw <= dccw:
            side, dist = self.leaf_cw, lambda x: ring_distance(self.node_id, self._id(x), self.m)
        else:
            side, dist = self.leaf_ccw, lambda x: ring_distance(self._id(x), self.node_id, self.m)
        side.append(c)
        side.sort(key=dist)
        while len(side) > self.half_leaf:
            side.pop()

    def _learn(self, c: int) -> None:
        self._add_leaf(c)
        self._add_to_table(c)

    def _drop_peer(self, peer: int) -> None:
        if peer in self.leaf_cw:
            self.leaf_cw.remove(peer)
        if peer in self.leaf_ccw:
            self.leaf_ccw.remove(peer)
        for row in self.table:
            for d, e in enumerate(row):
                if e == peer:
                    row[d] = None

    # -- join --------------------------------------------------------------

    def join(self, contact: Optional[int], on_joined: Callable[[], None]) -> None:
        self.contact = contact
        self._on_joined = on_joined
        if contact is None:
            self.env.mark_placed(self.idx)
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
        payload = {"key": self.node_id, "mode": "join", "origin": self.idx,
                   "hops": 0}
        timer = self.sim.schedule_after(16.0 * self.net.latency, self._join_timed_out)
        self._join_timer = timer
        self.add_timer(timer)
        self.request(contact, "route", payload, JOIN,
                     on_reply=lambda src, p: None,
                     on_timeout=self._join_timed_out)

    def _join_timed_out(self) -> None:
        if self.joined or not self.alive:
            return
        self._join_timer.cancel()
        if self._join_attempts < 3:
            contact = self.env.pick_contact(self.idx)
            if contact is not None:
                self._attempt_join(contact)
                return
        self._join_attempts = 0
        self.add_timer(self.sim.schedule_after(1.0, self._retry_join_later))

    def _retry_join_later(self) -> None:
        if self.joined or not self.alive:
            return
        contact = self.env.pick_contact(self.idx)
        if contact is None:
            self.add_timer(self.sim.schedule_after(1.0, self._retry_join_later))
            return
        self.contact = contact
        self._attempt_join(contact)

    def _handle_join_result(self, payload: dict) -> None:
        if self.joined or not self.alive:
            return
        self._join_timer.cancel()
        known = [payload["root"]] + payload["neighbors"] + payload["rows"]
        for c in dict.fromkeys(known):
            if c != self.idx and self.env.is_alive(c):
                self._learn(c)
        self.joined = True
        self._start_maintenance()
        root = payload["root"]
        for c in self.known_nodes():
            if c != root:
                self.send(c, "announce", {}, JOIN)
        # lookups are served only after the numerically closest neighbor
        # has acknowledged inserting us into its leaf set
        self.request(root, "announce", {}, JOIN,
                     on_reply=lambda src, p: self._finish_join(),
                     on_timeout=self._finish_join)

    def _finish_join(self) -> None:
        if self.ready or not self.alive:
            return
        self.ready = True
        if self._on_joined:
            self._on_joined()

    def _start_maintenance(self) -> None:
        self.start_periodic(self.env.stabilize_period, self.repair_tick)

    # -- routing -----------------------------------------------------------

    def _leaf_range_covers(self, key: int) -> bool:
        """Key lies between the extreme leaves (whole ring while a side is
        not yet full)."""
        if len(self.leaf_cw) < self.half_leaf or len(self.leaf_ccw) < self.half_leaf:
            return True
        lo = self._id(self.leaf_ccw[-1])
        hi = self._id(self.leaf_cw[-1])
        return ring_distance(lo, key, self.m) <= ring_distance(lo, hi, self.m)

    def _route_step(self, payload: dict, query_id: Optional[int]) -> None:
        key = payload["key"]
        my = self.node_id
        if payload["mode"] == "join" and (self.joined or self.env.is_placed(self.idx)):
            # any settled member can admit: placement is decided on first touch
            self._admit_joiner(payload)
            return
        if payload.get("final"):
            # the sender believed we are numerically closest, but its leaf
            # view can be truncated; hand on while we know a strictly closer
            # node (ranks decrease, so this cannot loop)
            best = self.idx
            best_rank = self._rank(my, key)
            for c in self.leaf_ccw + self.leaf_cw:
                rank = self._rank(self._id(c), key)
                if rank < best_rank:
                    best, best_rank = c, rank
            if best == self.idx:
                self._owner_action(payload, query_id)
            else:
                self._forward(best, dict(payload), query_id)
            return
        leafs = self.leaf_ccw + self.leaf_cw
        if not leafs:
            self._owner_action(payload, query_id)
            return
        best = self.idx
        best_rank = self._rank(my, key)
        for c in leafs:
            rank = self._rank(self._id(c), key)
            if rank < best_rank:
                best, best_rank = c, rank
        if best == self.idx:
            self._owner_action(payload, query_id)
            return
        if self._leaf_range_covers(key):
            p = dict(payload)
            p["final"] = True
            self._forward(best, p, query_id)
            return
        r = self._spl(my, key)
        e = self.table[r][digit_at(key, r, self.b, self.m)] if r < self.rows else None
        if e is not None and e != self.idx:
            self._forward(e, dict(payload), query_id)
            return
        # canonical fallback: any known node with prefix >= r strictly closer
        my_rank = self._rank(my, key)
        cand, cand_rank = None, my_rank
        for c in self.known_nodes():
            cid = self._id(c)
            if self._spl(cid, key) < r:
                continue
            rank = self._rank(cid, key)
            if rank < cand_rank:
                cand, cand_rank = c, rank
        if cand is None:
            self._owner_action(payload, query_id)
            return
        self._forward(cand, dict(payload), query_id)

    def _forward(self, nxt: int, payload: dict, query_id: Optional[int]) -> None:
        # routing-progress invariant: prefix length grows, or numeric rank
        # shrinks at equal prefix length
        key = payload["key"]
        nid = self._id(nxt)
        prev = payload.get("progress")
        cur = (self._spl(nid, key), self._rank(nid, key))
        if prev is not None:
            assert cur[0] > prev[0] or cur[1] < tuple(prev[1]), \
                f"pastry routing progress violated: {prev} -> {cur}"
        payload["progress"] = cur
        cls = _MODE_CLASS[payload["mode"]]
        self.request(nxt, "route", payload, cls,
                     on_reply=lambda src, p: None,  # per-hop ACK
                     on_timeout=lambda: self._forward_failed(nxt, payload, query_id),
                     query_id=query_id)

    def _forward_failed(self, peer: int, payload: dict, query_id: Optional[int]) -> None:
        if not self.alive:
            return
        self._drop_peer(peer)
        payload = dict(payload)
        payload.pop("progress", None)
        payload.pop("final", None)  # re-decide delivery after the eviction
        payload.pop("_rid", None)
        payload["retries"] = payload.get("retries", 0) + 1
        if payload["retries"] > _MAX_ROUTE_RETRIES:
            self._route_dead_end(payload, query_id)
            return
        self._route_step(payload, query_id)

    def _route_dead_end(self, payload: dict, query_id: Optional[int]) -> None:
        if payload["mode"] == "get":
            origin = payload["origin"]
            if origin == self.idx:
                self._complete_get(payload["qid"], [], payload["hops"])
            else:
                self.send(origin, "get_result",
                          {"qid": payload["qid"], "descs": [], "hops": payload["hops"]},
                          GET, query_id)

    def _owner_action(self, payload: dict, query_id: Optional[int]) -> None:
        mode = payload["mode"]
        now = self.sim.clock
        key = payload["key"]
        if mode == "get":
            descs = self.store.get_live(key, now)
            descs.sort(key=lambda d: d.agent_id)
            descs = descs[: payload["top_k"]]
            origin = payload["origin"]
            if origin == self.idx:
                self._complete_get(payload["qid"], descs, payload["hops"])
            else:
                self.send(origin, "get_result",
                          {"qid": payload["qid"], "descs": [_desc_to_wire(d) for d in descs],
                           "hops": payload["hops"]},
                          GET, query_id)
        elif mode == "put":
            d = _desc_from_wire(payload["desc"], replica_index=0)
            self.store.put(key, d)
            neighbors = sorted(self.leaf_ccw + self.leaf_cw,
                               key=lambda c: self._rank(self._id(c), key))
            for j, c in enumerate(neighbors[: self.env.replication - 1]):
                self.send(c, "store_replica",
                          {"key": key, "desc": payload["desc"], "replica": j + 1}, PUT)
    def _admit_joiner(self, payload: dict) -> None:
        """Place the joiner among the current members: compute its true leaf
        neighborhood from the placement registry and hand off to its
        numerically closest root.  Concurrent overlay state is too stale for
        this during a bootstrap flood."""
        joiner = payload["origin"]
        if joiner == self.idx or self.env.is_joined(joiner):
            return  # stale route from an already-completed join
        jid = self._id(joiner)
        members = [c for c in self.env.placed_nodes()
                   if c != joiner and self.env.is_placed(c)]
        self.env.mark_placed(joiner)
        if not members:
            self._grant_join(joiner, [])
            return
        cw = sorted(members, key=lambda c: ring_distance(jid, self._id(c), self.m))
        ccw = sorted(members, key=lambda c: ring_distance(self._id(c), jid, self.m))
        neighbors = list(dict.fromkeys(cw[: self.half_leaf] + ccw[: self.half_leaf]))
        root = min(members, key=lambda c: self._rank(self._id(c), jid))
        if root == self.idx:
            self._grant_join(joiner, neighbors)
        else:
            self.send(root, "admit_handoff",
                      {"joiner": joiner, "neighbors": neighbors}, JOIN)

    def _grant_join(self, joiner: int, neighbors: list) -> None:
        """Final step of admission at the joiner's root: adopt it and hand it
        its neighborhood plus a table snapshot."""
        self._learn(joiner)
        rows = [e for row in self.table for e in row if e is not None]
        self.send(joiner, "join_result",
                  {"root": self.idx, "neighbors": neighbors, "rows": rows}, JOIN)

    # -- workload surface --------------------------------------------------

    def put(self, key: int, descriptor: AgentDescriptor) -> None:
        payload = {"key": key, "mode": "put", "origin": self.idx, "hops": 0,
                   "desc": _desc_to_wire(descriptor)}
        self._originate(payload, None)

    def get(self, key: int, query_id: int, top_k: int,
            on_done: Callable[[list, int], None]) -> None:
        timer = self.sim.schedule_after(
            8.0 * self.net.latency * self.m,
            lambda: self._complete_get(query_id, [], -1))
        self.add_timer(timer)
        self._gets[query_id] = (on_done, timer)
        payload = {"key": key, "mode": "get", "origin": self.idx, "hops": 0,
                   "qid": query_id, "top_k": top_k}
        self._originate(payload, query_id)

    def _originate(self, payload: dict, query_id: Optional[int]) -> None:
        if payload["mode"] == "get" and not self.ready:
            # a node not yet settled into the overlay has no business
            # serving discovery requests
            self._complete_get(payload["qid"], [], -1)
            return
        if not self.joined:
            if self.contact is not None and self.env.is_alive(self.contact):
                self._forward(self.contact, payload, query_id)
            return
        self._route_step(payload, query_id)

    def _complete_get(self, qid: int, descs: list, hops: int) -> None:
        entry = self._gets.pop(qid, None)
        if entry is None:
            return
        on_done, timer = entry
        timer.cancel()
        on_done(descs, hops)

    # -- maintenance -------------------------------------------------------

    def repair_tick(self) -> None:
        if not self.joined:
            return
        leafs = self.leaf_ccw + self.leaf_cw
        if not leafs:
            return
        self._leaf_cursor = (self._leaf_cursor + 1) % len(leafs)
        target = leafs[self._leaf_cursor]
        self.request(target, "ping", {}, MAINTENANCE,
                     on_reply=lambda src, p: None,
                     on_timeout=lambda: self._leaf_dead(target))
        known = self.known_nodes()
        if known:
            # epidemic table exchange: one random peer's entries per tick
            peer = known[int(self.env.proto_rng.integers(len(known)))]
            self.request(peer, "table", {}, MAINTENANCE,
                         on_reply=self._merge_leafset,
                         on_timeout=lambda: self._drop_peer(peer))

    def _leaf_dead(self, peer: int) -> None:
        if not self.alive:
            return
        was_ccw = peer in self.leaf_ccw
        self._drop_peer(peer)
        side = self.leaf_ccw if was_ccw else self.leaf_cw
        if side:
            # refill from the extreme live leaf on the damaged side
            extreme = side[-1]
            self.request(extreme, "leafset", {}, MAINTENANCE,
                         on_reply=self._merge_leafset,
                         on_timeout=lambda: self._drop_peer(extreme))
        elif self.leaf_ccw or self.leaf_cw:
            other = (self.leaf_ccw or self.leaf_cw)[-1]
            self.request(other, "leafset", {}, MAINTENANCE,
                         on_reply=self._merge_leafset,
                         on_timeout=lambda: self._drop_peer(other))

    def _merge_leafset(self, src: int, payload: dict) -> None:
        if not self.alive:
            return
        for c in payload["leafs"]:
            if c != self.idx and self.env.is_alive(c):
                self._learn(c)

    # -- message handling --------------------------------------------------

    def observe_peer(self, src: int) -> None:
        # passive learning keeps leaf sets and the table current during
        # membership change; only settled peers are routable
        if self.alive and src != self.idx and self.env.is_joined(src):
            self._learn(src)

    def handle(self, src: int, kind: str, payload: dict, query_id) -> None:
        if kind == "route":
            cls = _MODE_CLASS[payload["mode"]]
            self.reply(src, payload, {}, cls, query_id)  # per-hop ACK
            p = {k: v for k, v in payload.items() if k != "_rid"}
            p["hops"] = p["hops"] + 1
            self._route_step(p, query_id)
        elif kind == "get_result":
            self._complete_get(payload["qid"],
                               [_desc_from_wire(t) for t in payload["descs"]],
                               payload["hops"])
        elif kind == "join_result":
            self._handle_join_result(payload)
        elif kind == "announce":
            self._learn(src)
            if "_rid" in payload:
                self.reply(src, payload, {}, JOIN)
        elif kind == "ping":
            self.reply(src, payload, {}, MAINTENANCE)
        elif kind == "leafset":
            self.reply(src, payload,
                       {"leafs": self.leaf_ccw + self.leaf_cw}, MAINTENANCE)
        elif kind == "table":
            entries = self.leaf_ccw + self.leaf_cw
            entries.extend(e for row in self.table for e in row if e is not None)
            self.reply(src, payload, {"leafs": entries}, MAINTENANCE)
        elif kind == "admit_handoff":
            self._grant_join(payload["joiner"], payload["neighbors"])
        elif kind == "store_replica":
            d = _desc_from_wire(payload["desc"], replica_index=payload["replica"])
            self.store.put(payload["key"], d)

    # -- metrics -----------------------------------------------------------

    def routing_entry_count(self) -> int:
        entries = set(self.leaf_ccw) | set(self.leaf_cw)
        for row in self.table:
            entries.update(e for e in row if e is not None)
        entries.discard(self.idx)
        return len(entries)
