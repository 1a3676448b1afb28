"""Peer identities, XOR-metric routing table and provider records."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

from ..cas import ContentId

K_BUCKET = 20


def peer_id_for(address: str) -> bytes:
    """A peer's id is the SHA-256 of its advertised listen address."""
    return hashlib.sha256(address.encode("utf-8")).digest()


def short_id(peer_id: bytes) -> str:
    return peer_id.hex()[:12]


def xor_distance(a: bytes, b: bytes) -> int:
    return int.from_bytes(a, "big") ^ int.from_bytes(b, "big")


def key_bytes(key: ContentId | bytes) -> bytes:
    return key.raw if isinstance(key, ContentId) else key


@dataclass(frozen=True)
class PeerInfo:
    peer_id: bytes
    address: str


class RoutingTable:
    """k-buckets indexed by the length of the shared id prefix.

    Each bucket keeps insertion order by last contact; a full bucket ignores
    newcomers, which keeps long-lived peers (Kademlia's preference).  At site
    scale every bucket is far from full, so this is simply the membership.
    """

    def __init__(self, self_id: bytes, k: int = K_BUCKET):
        self.self_id = self_id
        self.k = k
        self.buckets: list[OrderedDict[bytes, str]] = [OrderedDict() for _ in range(257)]
        self._peers: list[PeerInfo] | None = None

    def _bucket(self, peer_id: bytes) -> OrderedDict[bytes, str]:
        d = xor_distance(self.self_id, peer_id)
        return self.buckets[256 - d.bit_length()]

    def update(self, peer_id: bytes, address: str) -> bool:
        """Record contact with a peer; returns True if it was new."""
        if peer_id == self.self_id:
            return False
        bucket = self._bucket(peer_id)
        if peer_id in bucket:
            if bucket[peer_id] != address:
                bucket[peer_id] = address
                self._peers = None
            bucket.move_to_end(peer_id)
            return False
        if len(bucket) >= self.k:
            return False
        bucket[peer_id] = address
        self._peers = None
        return True

    def remove(self, peer_id: bytes) -> None:
        self._bucket(peer_id).pop(peer_id, None)
        self._peers = None

    def __contains__(self, peer_id: bytes) -> bool:
        return peer_id in self._bucket(peer_id)

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def peers(self) -> list[PeerInfo]:
        """Every known peer, in no particular order."""
        if self._peers is None:
            self._peers = [PeerInfo(pid, addr) for bucket in self.buckets for pid, addr in bucket.items()]
        return list(self._peers)

    def closest(self, key: ContentId | bytes, n: int | None = None) -> list[PeerInfo]:
        target = key_bytes(key)
        ranked = sorted(self.peers(), key=lambda p: xor_distance(p.peer_id, target))
        return ranked if n is None else ranked[:n]


@dataclass
class ProviderRecord:
    cid: ContentId
    peer_id: bytes
    address: str
    expires_at: float

    def ttl_left(self, now: float) -> int:
        return max(0, int(self.expires_at - now))


class ProviderStore:
    """Provider records held for the DHT; expired records are never returned."""

    def __init__(self) -> None:
        self._records: dict[ContentId, dict[str, ProviderRecord]] = {}

    def add(self, cid: ContentId, address: str, ttl: float, now: float) -> None:
        if ttl <= 0:
            return
        by_addr = self._records.setdefault(cid, {})
        expires = now + ttl
        current = by_addr.get(address)
        if current is None or current.expires_at < expires:
            by_addr[address] = ProviderRecord(cid, peer_id_for(address), address, expires)

    def get(self, cid: ContentId, now: float) -> list[ProviderRecord]:
        by_addr = self._records.get(cid)
        if not by_addr:
            return []
        live = {a: r for a, r in by_addr.items() if r.expires_at > now}
        if live:
            self._records[cid] = live
        else:
            del self._records[cid]
        return list(live.values())

    def prune(self, now: float) -> None:
        for cid in list(self._records):
            self.get(cid, now)

    def __len__(self) -> int:
        return sum(len(v) for v in self._records.values())
