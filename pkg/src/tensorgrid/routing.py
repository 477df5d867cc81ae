"""Key-to-shard routing: CRC16 hash slots and cluster topology.

The slot space has 16384 buckets. A key's slot is ``crc16(key) % 16384``,
except that a key containing a hash tag ``{...}`` with non-empty content
hashes only the tag content, which is how callers force co-location.

The CRC is CRC-16/XMODEM: polynomial 0x1021, initial value 0x0000, no
input/output reflection, no final xor. It must stay bit-exact; clients in
other languages ship the same table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import BadCount, BadTopology, EmptyKey

NUM_SLOTS = 16384

_POLY = 0x1021


def _build_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ _POLY) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return table


CRC16_TABLE = _build_table()


def crc16(data: bytes) -> int:
    crc = 0
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ CRC16_TABLE[((crc >> 8) ^ b) & 0xFF]
    return crc


def hash_tag(key: str) -> str | None:
    """Return the content of the first ``{...}`` pair, or None.

    An empty tag (``{}``) is ignored, matching the convention this routing
    scheme inherits.
    """
    start = key.find("{")
    if start == -1:
        return None
    end = key.find("}", start + 1)
    if end == -1 or end == start + 1:
        return None
    return key[start + 1 : end]


def key_slot(key: str) -> int:
    if not key:
        raise EmptyKey("cannot route an empty key")
    tag = hash_tag(key)
    subject = tag if tag is not None else key
    return crc16(subject.encode("utf-8")) % NUM_SLOTS


@dataclass(frozen=True)
class ShardInfo:
    shard_id: int
    address: str  # "host:port"
    slot_lo: int
    slot_hi: int

    @property
    def host(self) -> str:
        return self.address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.address.rsplit(":", 1)[1])


@dataclass(frozen=True)
class ClusterTopology:
    shards: tuple[ShardInfo, ...]

    def __post_init__(self):
        if not self.shards:
            raise BadTopology("topology needs at least one shard")
        ranges = sorted((s.slot_lo, s.slot_hi) for s in self.shards)
        cursor = 0
        for lo, hi in ranges:
            if lo != cursor or hi < lo:
                raise BadTopology(f"slot ranges are not a partition at [{lo}, {hi}]")
            cursor = hi + 1
        if cursor != NUM_SLOTS:
            raise BadTopology(f"slot ranges cover [0, {cursor - 1}], expected [0, {NUM_SLOTS - 1}]")
        ids = {s.shard_id for s in self.shards}
        if len(ids) != len(self.shards):
            raise BadTopology("duplicate shard ids")

    def shard(self, shard_id: int) -> ShardInfo:
        for s in self.shards:
            if s.shard_id == shard_id:
                return s
        raise BadTopology(f"no shard {shard_id} in topology")

    def slot_owner(self, slot: int) -> int:
        if not 0 <= slot < NUM_SLOTS:
            raise BadTopology(f"slot {slot} outside [0, {NUM_SLOTS - 1}]")
        for s in self.shards:
            if s.slot_lo <= slot <= s.slot_hi:
                return s.shard_id
        raise BadTopology(f"no owner for slot {slot}")  # unreachable, ranges partition

    def key_owner(self, key: str) -> int:
        return self.slot_owner(key_slot(key))

    def to_json(self) -> str:
        return json.dumps(
            {
                "shards": [
                    {"id": s.shard_id, "address": s.address, "slots": [s.slot_lo, s.slot_hi]}
                    for s in self.shards
                ]
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterTopology":
        doc = json.loads(text)
        shards = tuple(
            ShardInfo(int(s["id"]), str(s["address"]), int(s["slots"][0]), int(s["slots"][1]))
            for s in doc["shards"]
        )
        return cls(shards)

    @classmethod
    def load(cls, path) -> "ClusterTopology":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def slot_owner(topo: ClusterTopology, slot: int) -> int:
    return topo.slot_owner(slot)


def plan_topology(n_shards: int, addresses: list[str]) -> ClusterTopology:
    """Contiguous near-equal ranges; first ``16384 % n`` shards get one extra slot."""
    if n_shards < 1 or n_shards != len(addresses):
        raise BadCount(f"need n_shards == len(addresses) >= 1, got {n_shards} and {len(addresses)}")
    base, extra = divmod(NUM_SLOTS, n_shards)
    shards = []
    lo = 0
    for i, addr in enumerate(addresses):
        size = base + (1 if i < extra else 0)
        shards.append(ShardInfo(i, addr, lo, lo + size - 1))
        lo += size
    return ClusterTopology(tuple(shards))


_TAG_CACHE: dict[int, str] = {}


def tag_for_slot(slot: int) -> str:
    """Deterministic short string whose slot is exactly ``slot``.

    Used to mint hash-tagged keys that route to a chosen shard. Linear
    search over "t0", "t1", ...; cached per process.
    """
    tag = _TAG_CACHE.get(slot)
    if tag is None:
        n = 0
        while True:
            cand = f"t{n}"
            if crc16(cand.encode("ascii")) % NUM_SLOTS == slot:
                tag = cand
                break
            n += 1
        _TAG_CACHE[slot] = tag
    return tag
