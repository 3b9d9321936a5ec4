"""Identifier space, the three overlay distance metrics, skill-key hashing,
and the TTL-governed descriptor store shared by all protocols."""

from __future__ import annotations

from dataclasses import dataclass

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """Standard 64-bit FNV-1a digest (platform-independent)."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def mix64(x: int) -> int:
    """Avalanche finalizer (splitmix64): FNV-1a alone leaves the high bits
    of short sequential labels badly clustered."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash_skill(skill: str, m: int = 64) -> int:
    """Deterministic m-bit lookup key for a skill label: top m bits of the
    mixed FNV-1a-64 digest of the label's UTF-8 bytes.  Without the mix the
    50 catalog keys land in a 0.04% sliver of the ring and every protocol
    stores the whole catalog on the same handful of nodes."""
    return mix64(fnv1a64(skill.encode("utf-8"))) >> (64 - m)


def node_id_for_label(label: str, m: int, taken: set[int]) -> int:
    """Node identifier from an agent label: mixed FNV digest for well-spread
    placement, linear-probed to stay collision free (only matters at small m
    used in exhaustive tests)."""
    nid = mix64(fnv1a64(label.encode("utf-8"))) >> (64 - m)
    space = 1 << m
    while nid in taken:
        nid = (nid + 1) % space
    return nid


def ring_distance(a: int, b: int, m: int) -> int:
    """Clockwise distance (b - a) mod 2^m."""
    return (b - a) % (1 << m)


def xor_distance(a: int, b: int) -> int:
    return a ^ b


def to_digits(x: int, bits_per_digit: int, m: int) -> list[int]:
    """Base-2^b digit view, most significant first.  Round-trips with
    from_digits for any m divisible by b."""
    ndigits = m // bits_per_digit
    mask = (1 << bits_per_digit) - 1
    return [(x >> (bits_per_digit * (ndigits - 1 - i))) & mask for i in range(ndigits)]


def from_digits(digits: list[int], bits_per_digit: int) -> int:
    x = 0
    for d in digits:
        x = (x << bits_per_digit) | d
    return x


def shared_prefix_len(a: int, b: int, bits_per_digit: int, m: int) -> int:
    """Number of leading base-2^b digits on which a and b agree."""
    ndigits = m // bits_per_digit
    if a == b:
        return ndigits
    diff_bit = (a ^ b).bit_length()  # position of highest differing bit, 1-based
    return (m - diff_bit) // bits_per_digit


def digit_at(x: int, i: int, bits_per_digit: int, m: int) -> int:
    """i-th base-2^b digit of x, counting from the most significant."""
    ndigits = m // bits_per_digit
    shift = bits_per_digit * (ndigits - 1 - i)
    return (x >> shift) & ((1 << bits_per_digit) - 1)


@dataclass
class AgentDescriptor:
    """Published record binding an agent to one skill, with TTL bookkeeping."""

    agent_id: int
    skill: str
    publish_time: float
    ttl: float
    replica_index: int = 0

    def live(self, now: float) -> bool:
        return now < self.publish_time + self.ttl


class DescriptorStore:
    """Per-node descriptor store keyed by (lookup key, agent id).

    Reads filter by TTL at access time; the periodic sweep is garbage
    collection only, so correctness never depends on sweep cadence.
    """

    def __init__(self):
        self._entries: dict[tuple[int, int], AgentDescriptor] = {}

    def put(self, key: int, d: AgentDescriptor) -> None:
        self._entries[(key, d.agent_id)] = d

    def get_live(self, key: int, now: float) -> list[AgentDescriptor]:
        return [d for (k, _), d in self._entries.items() if k == key and d.live(now)]

    def sweep(self, now: float) -> int:
        dead = [kk for kk, d in self._entries.items() if not d.live(now)]
        for kk in dead:
            del self._entries[kk]
        return len(dead)

    def __len__(self) -> int:
        return len(self._entries)
