"""Chord overlay node: successor/predecessor ring, finger table, periodic
stabilization, recursive lookup with per-hop acknowledgements, and
replicated put/get."""

from __future__ import annotations

from typing import Callable, Optional

from .ids import AgentDescriptor, ring_distance
from .protocol import BaseNode
from .sim import GET, JOIN, MAINTENANCE, PUT

_MODE_CLASS = {"get": GET, "put": PUT, "join": JOIN, "repair": MAINTENANCE}

# concurrent finger-repair walks started per stabilize tick
_FIX_WALKS_PER_TICK = 2
_MAX_ROUTE_RETRIES = 8
_MAX_STAB_CHAIN = 16


def _desc_to_wire(d: AgentDescriptor) -> tuple:
    return (d.agent_id, d.skill, d.publish_time, d.ttl, d.replica_index)


def _desc_from_wire(t: tuple, replica_index: Optional[int] = None) -> AgentDescriptor:
    return AgentDescriptor(t[0], t[1], t[2], t[3], t[4] if replica_index is None else replica_index)


class ChordNode(BaseNode):
    def __init__(self, idx: int, node_id: int, env):
        super().__init__(idx, node_id, env)
        self.m = env.m
        self.succ_list: list[int] = []
        self.predecessor: Optional[int] = None
        self.fingers: list[Optional[int]] = [None] * (self.m + 1)  # 1-based
        self._fix_index = 1
        self._gets: dict[int, tuple] = {}
        self._repair_confirms = 0
        self._last_succ: Optional[int] = None
        self._join_attempts = 0
        self._on_joined: Optional[Callable[[], None]] = None

    # -- helpers -----------------------------------------------------------

    def _id(self, idx: int) -> int:
        return self.env.node_ids[idx]

    def _rd(self, a: int, b: int) -> int:
        return ring_distance(a, b, self.m)

    def _in_oc(self, x: int, a: int, b: int) -> bool:
        """x in (a, b] clockwise."""
        d = self._rd(a, x)
        return 0 < d <= self._rd(a, b)

    def _in_oo(self, x: int, a: int, b: int) -> bool:
        d = self._rd(a, x)
        return 0 < d < self._rd(a, b)

    def closest_preceding(self, key: int, exclude: Optional[set] = None) -> Optional[int]:
        """Best known node strictly inside (self, key), scanning fingers and
        the successor list."""
        best = None
        best_d = 0
        limit = self._rd(self.node_id, key)
        for c in self.succ_list:
            if exclude and c in exclude:
                continue
            d = self._rd(self.node_id, self._id(c))
            if 0 < d < limit and d > best_d:
                best, best_d = c, d
        for i in range(self.m, 0, -1):
            c = self.fingers[i]
            if c is None or c == self.idx or (exclude and c in exclude):
                continue
            d = self._rd(self.node_id, self._id(c))
            if 0 < d < limit and d > best_d:
                best, best_d = c, d
        return best

    def _drop_peer(self, peer: int) -> None:
        """Evict a peer found dead from all routing state."""
        if peer in self.succ_list:
            self.succ_list.remove(peer)
        for i in range(1, self.m + 1):
            if self.fingers[i] == peer:
                self.fingers[i] = None
        if self.predecessor == peer:
            self.predecessor = None

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
        payload = {"key": self.node_id, "mode": "join", "origin": self.idx, "hops": 0}
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
        succ = payload["succ"]
        slist = [succ] + [x for x in payload["succ_list"] if x != self.idx and x != succ]
        self.succ_list = slist[: self.env.succ_list_len]
        # Seed the finger table from the successor's (adjacent targets give a
        # mostly-correct copy); stabilization refines it.
        for i, f in enumerate(payload["fingers"]):
            if f is not None and f != self.idx:
                self.fingers[i] = f
        self._local_finger_fill()
        pred = payload.get("pred")
        if (pred is not None and pred != self.idx and self.env.is_alive(pred)
                and (self.predecessor is None
                     or not self.env.is_alive(self.predecessor)
                     or self._in_oo(self._id(pred), self._id(self.predecessor),
                                    self.node_id))):
            # only adopt if closer: we may have admitted someone into our own
            # interval while this grant was in flight
            self.predecessor = pred
        self.joined = True
        self._start_maintenance()
        if self.predecessor is not None:
            # announce to the ring predecessor too, so both neighbor links
            # are correct the moment the join completes
            self.send(self.predecessor, "notify", {}, JOIN)
        # lookups are served only after the successor has acknowledged us
        # as its predecessor: until then nobody routes through this node
        self.request(succ, "notify", {}, JOIN,
                     on_reply=lambda src, p: self._finish_join(),
                     on_timeout=self._finish_join)

    def _finish_join(self) -> None:
        if self.ready or not self.alive:
            return
        self.ready = True
        if self._on_joined:
            self._on_joined()

    def _local_finger_fill(self) -> None:
        """Point each finger at the first successor-list entry at or past
        its target."""
        if not self.succ_list:
            return
        space = 1 << self.m
        dists = sorted((self._rd(self.node_id, self._id(s)), s) for s in self.succ_list)
        for i in range(1, self.m + 1):
            toff = (1 << (i - 1)) % space
            for d, s in dists:
                if toff <= d:
                    cur = self.fingers[i]
                    if (cur is None or cur == self.idx
                            or (d - toff) % space
                            < (self._rd(self.node_id, self._id(cur)) - toff) % space):
                        self.fingers[i] = s
                    break

    def _start_maintenance(self) -> None:
        self.start_periodic(self.env.stabilize_period, self.stabilize_tick)

    # -- routing -----------------------------------------------------------

    def _forward(self, nxt: int, payload: dict, query_id: Optional[int]) -> None:
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
        payload.pop("final", None)  # re-decide ownership after the eviction
        payload.pop("_rid", None)
        payload["retries"] = payload.get("retries", 0) + 1
        if payload["retries"] > _MAX_ROUTE_RETRIES:
            self._route_dead_end(payload, query_id)
            return
        self._route_step(payload, query_id)

    def _route_dead_end(self, payload: dict, query_id: Optional[int]) -> None:
        if payload["mode"] == "get":
            origin = payload["origin"]
            result = {"qid": payload["qid"], "descs": [], "hops": payload["hops"]}
            if origin == self.idx:
                self._complete_get(payload["qid"], [], payload["hops"])
            else:
                self.send(origin, "get_result", result, GET, query_id)
        # puts and joins fail silently; republish / join retry recovers

    def _owns(self, key: int) -> bool:
        if not self.succ_list:
            # singleton ring owns everything; a mid-join node owns nothing
            return self.joined or self.contact is None
        if self._rd(self.node_id, key) == 0:
            return True
        p = self.predecessor
        return (p is not None and self.env.is_alive(p)
                and self._in_oc(key, self._id(p), self.node_id))

    def _route_step(self, payload: dict, query_id: Optional[int]) -> None:
        key = payload["key"]
        my = self.node_id
        mode = payload["mode"]
        if mode == "join" and (self.joined or self.env.is_placed(self.idx)):
            # any ring member can admit: placement is decided on first touch
            self._admit_joiner(payload, query_id)
            return
        if payload.get("final") and mode == "repair" and self.joined:
            # repair re-checks placement itself, so a stale predecessor
            # interval must not keep the probe bouncing
            self._owner_action(payload, query_id)
            return
        if self._owns(key):
            self._owner_action(payload, query_id)
            return
        if payload.get("final"):
            p = self.predecessor
            if self.joined and (p is None or not self.env.is_alive(p)):
                # predecessor gone: inherit its range until the ring heals
                self._owner_action(payload, query_id)
                return
            # a live predecessor interval disproves ownership; keep routing
            payload = dict(payload)
            payload.pop("final")
        if payload["hops"] > 2 * self.m + _MAX_ROUTE_RETRIES:
            self._route_dead_end(payload, query_id)
            return
        if not self.succ_list:
            if self.contact is not None and self.env.is_alive(self.contact):
                self._forward(self.contact, dict(payload), query_id)
            else:
                self._route_dead_end(payload, query_id)
            return
        d_key = self._rd(my, key)
        # Successor-list shortcut: the first successor at or past the key owns it.
        for s in self.succ_list:
            if d_key <= self._rd(my, self._id(s)):
                p = dict(payload)
                p["final"] = True
                self._forward(s, p, query_id)
                return
        nxt = self.closest_preceding(key)
        if nxt is None:
            nxt = self.succ_list[0]  # no finger progress: successor hop
        self._forward(nxt, dict(payload), query_id)

    def _owner_action(self, payload: dict, query_id: Optional[int]) -> None:
        mode = payload["mode"]
        now = self.sim.clock
        if mode == "get":
            descs = self.store.get_live(payload["key"], now)
            descs.sort(key=lambda d: d.agent_id)
            descs = descs[: payload["top_k"]]
            origin = payload["origin"]
            wire = [_desc_to_wire(d) for d in descs]
            if origin == self.idx:
                self._complete_get(payload["qid"], descs, payload["hops"])
            else:
                self.send(origin, "get_result",
                          {"qid": payload["qid"], "descs": wire, "hops": payload["hops"]},
                          GET, query_id)
        elif mode == "put":
            d = _desc_from_wire(payload["desc"], replica_index=0)
            self.store.put(payload["key"], d)
            for j, s in enumerate(self.succ_list[: self.env.replication - 1]):
                self.send(s, "store_replica",
                          {"key": payload["key"], "desc": payload["desc"], "replica": j + 1},
                          PUT)
        elif mode == "join":
            self._admit_joiner(payload, query_id)
        elif mode == "repair":
            origin = payload["origin"]
            if origin == self.idx:
                self._repair_confirms += 1
                return
            # another node's identifier falls in our interval: the ring has
            # split into parallel cycles, so pull the prober in as our
            # predecessor and point it at our neighborhood
            oid = self._id(origin)
            old = self.predecessor
            if (old is None or not self.env.is_alive(old)
                    or self._in_oo(oid, self._id(old), self.node_id)):
                self.predecessor = origin
                if old is not None and self.env.is_alive(old):
                    # the displaced predecessor gains a closer successor
                    self.send(old, "repair_notice", {"node": origin}, MAINTENANCE)
            self.send(origin, "repair_result",
                      {"owner": self.idx, "pred": old}, MAINTENANCE)

    def _admit_joiner(self, payload: dict, query_id: Optional[int]) -> None:
        """Serialized ring insertion: accept the joiner as the new predecessor
        only if no known node sits closer after its identifier, else redirect
        the join to the closest known successor (monotone, so it terminates)."""
        joiner = payload["origin"]
        if joiner == self.idx or self.env.is_joined(joiner):
            return  # stale route from an already-completed join
        jid = self._id(joiner)
        # place the joiner between its true neighbors among placed members;
        # concurrent overlay state is too stale for this during a bootstrap
        # flood, and misplacement splits the ring into parallel cycles that
        # stabilization cannot merge
        succ = pred = None
        ds = dp = None
        for c in self.env.placed_nodes():
            if c == joiner or not self.env.is_placed(c):
                continue
            cid = self._id(c)
            d = self._rd(jid, cid)
            if d > 0 and (ds is None or d < ds):
                succ, ds = c, d
            d = self._rd(cid, jid)
            if d > 0 and (dp is None or d < dp):
                pred, dp = c, d
        self.env.mark_placed(joiner)
        if succ is None or succ == self.idx:
            self._grant_join(joiner, pred)
        else:
            self.send(succ, "admit_handoff", {"joiner": joiner, "pred": pred},
                      JOIN, query_id)

    def _grant_join(self, joiner: int, pred: Optional[int]) -> None:
        """Final step of admission at the joiner's successor: adopt it as
        predecessor and hand it a state snapshot."""
        if pred == joiner or (pred is not None and not self.env.is_alive(pred)):
            pred = None
        jid = self._id(joiner)
        if (self.predecessor is None
                or not self.env.is_alive(self.predecessor)
                or self._in_oo(jid, self._id(self.predecessor), self.node_id)):
            self.predecessor = joiner
        self.send(joiner, "join_result",
                  {"succ": self.idx, "succ_list": list(self.succ_list),
                   "fingers": list(self.fingers), "pred": pred},
                  JOIN)

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
            # a node not yet settled into the ring has no business serving
            # discovery requests
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

    def stabilize_tick(self) -> None:
        if not self.joined:
            return
        if self.succ_list:
            self._stab_probe(self.succ_list[0], 0)
        elif self.predecessor is not None:
            # degenerate ring repair: adopt predecessor as successor
            self.succ_list = [self.predecessor]
        self._fix_fingers_launch()
        self._maybe_repair()

    def _maybe_repair(self) -> None:
        """Self-lookup through a random routing entry; lands on whoever
        claims our identifier and merges parallel ring cycles that plain
        stabilization cannot see. Quiet once the position is confirmed."""
        head = self.succ_list[0] if self.succ_list else None
        if head != self._last_succ:
            self._last_succ = head
            self._repair_confirms = 0
        if head is None or self._repair_confirms >= 2:
            return
        start = None
        if self.env.proto_rng.integers(2):
            # probe via the underlay contact pool: those links predate the
            # overlay, so they cross any parallel cycle the overlay formed
            start = self.env.pick_contact(self.idx)
        if start is None or start == self.idx:
            cands = set(self.succ_list)
            cands.update(f for f in self.fingers if f is not None)
            cands.discard(self.idx)
            cands = sorted(c for c in cands if self.env.is_alive(c))
            if not cands:
                return
            start = cands[int(self.env.proto_rng.integers(len(cands)))]
        self._forward(start, {"key": self.node_id, "mode": "repair",
                              "origin": self.idx, "hops": 0}, None)

    def _stab_probe(self, succ: int, depth: int) -> None:
        self.request(succ, "get_state", {}, MAINTENANCE,
                     on_reply=lambda src, p: self._stab_reply(succ, p, depth),
                     on_timeout=lambda: self._succ_dead(succ))

    def _stab_reply(self, succ: int, payload: dict, depth: int) -> None:
        if not self.alive or not self.joined:
            return
        p = payload["pred"]
        if (p is not None and p != self.idx and self.env.is_joined(p)
                and self._in_oo(self._id(p), self.node_id, self._id(succ))):
            # closer successor exists; adopt it and keep walking this tick
            # (bounded burst, so a misrouted join heals in a few ticks while
            # the converged steady state stays at one probe per tick)
            slist = [p, succ] + [x for x in self.succ_list if x not in (p, succ)]
            self.succ_list = slist[: self.env.succ_list_len]
            if depth < _MAX_STAB_CHAIN:
                self._stab_probe(p, depth + 1)
                return
            self.send(p, "notify", {}, MAINTENANCE)
            return
        slist = [succ]
        for x in payload["succ_list"]:
            if x != self.idx and x not in slist:
                slist.append(x)
        self.succ_list = slist[: self.env.succ_list_len]
        self.send(self.succ_list[0], "notify", {}, MAINTENANCE)

    def _succ_dead(self, succ: int) -> None:
        if not self.alive:
            return
        self._drop_peer(succ)

    def _fix_fingers_launch(self) -> None:
        """Start a couple of independent finger walks; each runs to
        completion on its own (a walk spans several round trips, so
        serializing them sweeps the table far too slowly)."""
        if not self.succ_list:
            return
        space = 1 << self.m
        launched = 0
        for _ in range(self.m):
            if launched >= _FIX_WALKS_PER_TICK:
                break
            i = self._fix_index
            self._fix_index = i % self.m + 1
            target = (self.node_id + (1 << (i - 1))) % space
            d_succ = self._rd(self.node_id, self._id(self.succ_list[0]))
            if self._rd(self.node_id, target) <= d_succ:
                self.fingers[i] = self.succ_list[0]  # free local fix
                continue
            launched += 1
            f = self.fingers[i]
            if f is not None and f != self.idx:
                # cheap check first: a correct entry confirms itself with its
                # predecessor pointer, no walk needed
                self.request(f, "get_state", {}, MAINTENANCE,
                             on_reply=lambda src, p, i=i, target=target, f=f:
                                 self._fix_verify(i, target, f, p),
                             on_timeout=lambda f=f: self._drop_peer(f))
            else:
                self._fix_start_walk(i, target)

    def _fix_verify(self, i: int, target: int, f: int, payload: dict) -> None:
        if not self.alive:
            return
        pred = payload.get("pred")
        if (pred is not None and pred != f
                and self._in_oc(target, self._id(pred), self._id(f))):
            return  # the entry is the target's true successor
        self._fix_start_walk(i, target)

    def _fix_start_walk(self, i: int, target: int) -> None:
        # walk from below the target: starting at the current entry wedges
        # the walk whenever that entry already overshot the true successor
        cand = self.closest_preceding(target) or self.fingers[i]
        if cand is None or cand == self.idx:
            return
        self._fix_walk(i, target, cand, depth=0)

    def _fix_walk(self, i: int, target: int, cand: int, depth: int) -> None:
        self.request(cand, "find_succ_step", {"target": target}, MAINTENANCE,
                     on_reply=lambda src, p: self._fix_walk_reply(i, target,
                                                                 cand, p, depth),
                     on_timeout=lambda: self._drop_peer(cand))

    def _fix_walk_reply(self, i: int, target: int, cand: int,
                        payload: dict, depth: int) -> None:
        if not self.alive:
            return
        if "owner" in payload:
            owner = payload["owner"]
            if owner != self.idx:
                self.fingers[i] = owner
            return
        nxt = payload["next"]
        if nxt is None or nxt == self.idx or nxt == cand or depth >= 32:
            return
        self._fix_walk(i, target, nxt, depth + 1)

    # -- message handling --------------------------------------------------

    def observe_peer(self, src: int) -> None:
        # passive learning: any heard-from settled peer is a successor or
        # predecessor candidate, which heals the ring quickly after joins
        if not self.alive or src == self.idx or not self.env.is_joined(src):
            return
        sid = self._id(src)
        if src not in self.succ_list and self._rd(self.node_id, sid) > 0:
            lst = self.succ_list + [src]
            lst.sort(key=lambda c: self._rd(self.node_id, self._id(c)))
            self.succ_list = lst[: self.env.succ_list_len]
        if (self.predecessor is None
                or not self.env.is_alive(self.predecessor)
                or self._in_oo(sid, self._id(self.predecessor), self.node_id)):
            self.predecessor = src
        # finger upkeep from the same traffic: adopt src for every finger
        # target it lands closer behind than the current entry
        sd = self._rd(self.node_id, sid)
        space = 1 << self.m
        for i in range(1, self.m + 1):
            toff = 1 << (i - 1)
            if toff > sd:
                break
            cur = self.fingers[i]
            if cur is None or cur == self.idx:
                self.fingers[i] = src
                continue
            cur_d = (self._rd(self.node_id, self._id(cur)) - toff) % space
            if (sd - toff) % space < cur_d:
                self.fingers[i] = src

    def handle(self, src: int, kind: str, payload: dict, query_id) -> None:
        if kind == "route":
            cls = _MODE_CLASS[payload["mode"]]
            self.reply(src, payload, {}, cls, query_id)  # per-hop ACK
            p = {k: v for k, v in payload.items() if k != "_rid"}
            p["hops"] = p["hops"] + 1
            self._route_step(p, query_id)
        elif kind == "get_result":
            self._complete_get(payload["qid"], [_desc_from_wire(t) for t in payload["descs"]],
                               payload["hops"])
        elif kind == "join_result":
            self._handle_join_result(payload)
        elif kind == "repair_result":
            self._repair_confirms = 0
            self.observe_peer(payload["owner"])
            if payload["pred"] is not None:
                self.observe_peer(payload["pred"])
        elif kind == "repair_notice":
            self.observe_peer(payload["node"])
        elif kind == "admit_handoff":
            self._grant_join(payload["joiner"], payload["pred"])
        elif kind == "notify":
            nid = self._id(src)
            if (self.predecessor is None
                    or not self.env.is_alive(self.predecessor)
                    or self._in_oo(nid, self._id(self.predecessor), self.node_id)):
                self.predecessor = src
            if not self.succ_list and src != self.idx:
                self.succ_list = [src]
            if "_rid" in payload:
                self.reply(src, payload, {}, JOIN)
        elif kind == "get_state":
            self.reply(src, payload,
                       {"pred": self.predecessor, "succ_list": list(self.succ_list)},
                       MAINTENANCE)
        elif kind == "find_succ_step":
            target = payload["target"]
            ans: dict = {}
            if self.predecessor is not None and self._in_oc(
                    target, self._id(self.predecessor), self.node_id):
                ans["owner"] = self.idx
            elif self.succ_list and self._in_oc(
                    target, self.node_id, self._id(self.succ_list[0])):
                ans["owner"] = self.succ_list[0]
            else:
                ans["next"] = self.closest_preceding(target) or (
                    self.succ_list[0] if self.succ_list else None)
            self.reply(src, payload, ans, MAINTENANCE)
        elif kind == "store_replica":
            d = _desc_from_wire(payload["desc"], replica_index=payload["replica"])
            self.store.put(payload["key"], d)

    # -- metrics -----------------------------------------------------------

    def routing_entry_count(self) -> int:
        entries = set(self.succ_list)
        entries.update(f for f in self.fingers if f is not None)
        if self.predecessor is not None:
            entries.add(self.predecessor)
        entries.discard(self.idx)
        return len(entries)
