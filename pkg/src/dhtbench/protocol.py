"""Shared protocol-node machinery: request/reply with timeouts, maintenance
timers, and node lifecycle used by all three overlay implementations."""

from __future__ import annotations

from typing import Callable, Optional

from .ids import DescriptorStore
from .sim import Network, Simulator

REPLY = "_reply"


class BaseNode:
    """One overlay participant.  A node owns its descriptor store, its pending
    request table and its maintenance timer; dying cancels all of them.  A
    rejoin after churn is a fresh instance with the same identifier."""

    def __init__(self, idx: int, node_id: int, env):
        self.idx = idx
        self.node_id = node_id
        self.env = env
        self.sim: Simulator = env.sim
        self.net: Network = env.net
        self.alive = True
        self.joined = False
        # ready gates application lookups: it flips once the final join
        # round trip is acknowledged, a little after routing state is usable
        self.ready = False
        self.contact: Optional[int] = None
        self.store = DescriptorStore()
        self._req_seq = 0
        # rid -> (timeout handle, on_reply, on_timeout)
        self._pending: dict[int, tuple] = {}
        self._timers: list = []

    # -- lifecycle ---------------------------------------------------------

    def die(self) -> None:
        self.alive = False
        self.joined = False
        self.ready = False
        for h in self._timers:
            h.cancel()
        self._timers.clear()
        for th, _, _ in self._pending.values():
            if th is not None:
                th.cancel()
        self._pending.clear()

    def add_timer(self, handle) -> None:
        self._timers.append(handle)

    def start_periodic(self, period: float, fn: Callable[[], None]) -> None:
        def fire():
            if not self.alive:
                return
            fn()
            self._timers.append(self.sim.schedule_after(period, fire))

        self._timers.append(self.sim.schedule_after(period, fire))

    # -- messaging ---------------------------------------------------------

    def send(self, dst: int, kind: str, payload: dict, msg_class: str,
             query_id: Optional[int] = None) -> None:
        self.net.send(self.idx, dst, kind, payload, msg_class, query_id)

    def request(self, dst: int, kind: str, payload: dict, msg_class: str,
                on_reply: Callable[[int, dict], None],
                on_timeout: Optional[Callable[[], None]] = None,
                timeout: Optional[float] = None,
                query_id: Optional[int] = None) -> int:
        """Send a message expecting a reply; fires on_timeout if none arrives
        (dead peers never answer: messages to them are tombstone-dropped)."""
        rid = self._req_seq
        self._req_seq += 1
        if timeout is None:
            timeout = 4.0 * self.net.latency
        p = dict(payload)
        p["_rid"] = rid
        if self.net.loss == 0.0:
            # Zero loss and synchronous reply handlers: a reply is missing iff
            # the destination is dead at delivery time, so the tombstone drop
            # drives the timeout and no per-request timer is needed.
            self._pending[rid] = (None, on_reply, on_timeout)
            p["_src"] = self.idx
            p["_tmo"] = timeout
        else:
            th = self.sim.schedule_after(timeout, lambda: self._expire(rid))
            self._pending[rid] = (th, on_reply, on_timeout)
        self.net.send(self.idx, dst, kind, p, msg_class, query_id)
        return rid

    def reply(self, dst: int, request_payload: dict, payload: dict,
              msg_class: str, query_id: Optional[int] = None) -> None:
        p = dict(payload)
        p["_rid"] = request_payload["_rid"]
        self.net.send(self.idx, dst, REPLY, p, msg_class, query_id)

    def _expire(self, rid: int) -> None:
        entry = self._pending.pop(rid, None)
        if entry is None or not self.alive:
            return
        _, _, on_timeout = entry
        if on_timeout is not None:
            on_timeout()

    def on_message(self, src: int, kind: str, payload: dict,
                   query_id: Optional[int]) -> None:
        self.observe_peer(src)
        if kind == REPLY:
            entry = self._pending.pop(payload["_rid"], None)
            if entry is None:
                return  # late reply after timeout; already handled
            th, on_reply, _ = entry
            if th is not None:
                th.cancel()
            on_reply(src, payload)
        else:
            self.handle(src, kind, payload, query_id)

    # -- hooks for subclasses ---------------------------------------------

    def observe_peer(self, src: int) -> None:
        """Called for every received message (Kademlia bucket upkeep)."""

    def handle(self, src: int, kind: str, payload: dict,
               query_id: Optional[int]) -> None:
        raise NotImplementedError

    # -- surface driven by the workload -----------------------------------

    def join(self, contact: Optional[int], on_joined: Callable[[], None]) -> None:
        raise NotImplementedError

    def put(self, key: int, descriptor) -> None:
        raise NotImplementedError

    def get(self, key: int, query_id: int, top_k: int,
            on_done: Callable[[list, int], None]) -> None:
        """Resolve a lookup; on_done(descriptors, hops) always fires exactly
        once, with an empty list on failure."""
        raise NotImplementedError

    def routing_entry_count(self) -> int:
        raise NotImplementedError
