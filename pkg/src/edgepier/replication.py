"""Site-wide pinset and tag table, kept in sync by anti-entropy gossip.

State is a join-semilattice: pins are a grow-only map (merging two entries
for the same digest keeps the larger by factor, then lamport, then writer)
and tags are last-writer-wins registers ordered by (lamport, writer).
"""
from __future__ import annotations

import asyncio
import hashlib
import logging
import random
import struct
from dataclasses import dataclass
from typing import Awaitable, Callable, Iterable

from . import wire
from .cas import ContentId
from .p2p.exchange import PeerAgent, PeerConnection
from .p2p.routing import PeerInfo, peer_id_for

log = logging.getLogger(__name__)

ALL = None  # replication factor meaning "every site node"
_ALL_WIRE = 0xFFFFFFFF
GOSSIP_INTERVAL = 5.0

_ENTRY = struct.Struct(">32sIQ32s")
_TAG_TAIL = struct.Struct(">32sQ32s")


@dataclass(frozen=True, order=True)
class PinEntry:
    digest: ContentId
    factor: int | None  # None = ALL
    lamport: int
    writer: bytes

    def rank(self) -> tuple:
        factor = _ALL_WIRE if self.factor is None else self.factor
        return (factor, self.lamport, self.writer)


@dataclass(frozen=True)
class TagRecord:
    name: str
    tag: str
    digest: ContentId
    lamport: int
    writer: bytes

    def rank(self) -> tuple:
        return (self.lamport, self.writer, self.digest.hex)


class PinsetState:
    def __init__(self) -> None:
        self.pins: dict[ContentId, PinEntry] = {}
        self.tags: dict[tuple[str, str], TagRecord] = {}
        self.clock = 0

    def copy(self) -> "PinsetState":
        out = PinsetState()
        out.pins = dict(self.pins)
        out.tags = dict(self.tags)
        out.clock = self.clock
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PinsetState):
            return NotImplemented
        return self.pins == other.pins and self.tags == other.tags

    def observe(self, lamport: int) -> None:
        self.clock = max(self.clock, lamport)

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def add_pin(self, entry: PinEntry) -> bool:
        """Merge one entry; True if the state changed."""
        self.observe(entry.lamport)
        current = self.pins.get(entry.digest)
        if current is None or entry.rank() > current.rank():
            self.pins[entry.digest] = entry
            return True
        return False

    def add_tag(self, record: TagRecord) -> bool:
        self.observe(record.lamport)
        key = (record.name, record.tag)
        current = self.tags.get(key)
        if current is None or record.rank() > current.rank():
            self.tags[key] = record
            return True
        return False

    def merge(self, other: "PinsetState") -> list[PinEntry]:
        """Join ``other`` into self; returns pin entries that changed."""
        changed = [e for e in other.pins.values() if self.add_pin(e)]
        for record in other.tags.values():
            self.add_tag(record)
        return changed

    def covers(self, other: "PinsetState") -> bool:
        """True if merging ``other`` would change nothing."""
        probe = self.copy()
        probe.merge(other)
        return probe == self

    def resolve(self, name: str, tag: str) -> ContentId | None:
        record = self.tags.get((name, tag))
        return None if record is None else record.digest

    # -- wire payload ------------------------------------------------------

    def encode(self) -> bytes:
        parts = [struct.pack(">I", len(self.pins))]
        for entry in sorted(self.pins.values(), key=lambda e: e.digest):
            factor = _ALL_WIRE if entry.factor is None else entry.factor
            parts.append(_ENTRY.pack(entry.digest.raw, factor, entry.lamport, entry.writer))
        parts.append(struct.pack(">I", len(self.tags)))
        for key in sorted(self.tags):
            rec = self.tags[key]
            name = rec.name.encode()
            tag = rec.tag.encode()
            parts.append(struct.pack(">H", len(name)) + name + struct.pack(">H", len(tag)) + tag)
            parts.append(_TAG_TAIL.pack(rec.digest.raw, rec.lamport, rec.writer))
        return b"".join(parts)

    @classmethod
    def decode(cls, payload: bytes) -> "PinsetState":
        state = cls()
        view = memoryview(payload)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise wire.ProtocolError("truncated pinset payload")
            out = bytes(view[pos:pos + n])
            pos += n
            return out

        (count,) = struct.unpack(">I", take(4))
        for _ in range(count):
            raw, factor, lamport, writer = _ENTRY.unpack(take(_ENTRY.size))
            if factor == 0:
                raise wire.ProtocolError("replication factor 0")
            state.add_pin(PinEntry(ContentId.from_raw(raw), None if factor == _ALL_WIRE else factor, lamport, writer))
        (ntags,) = struct.unpack(">I", take(4))
        for _ in range(ntags):
            (n,) = struct.unpack(">H", take(2))
            name = take(n).decode()
            (n,) = struct.unpack(">H", take(2))
            tag = take(n).decode()
            raw, lamport, writer = _TAG_TAIL.unpack(take(_TAG_TAIL.size))
            state.add_tag(TagRecord(name, tag, ContentId.from_raw(raw), lamport, writer))
        if pos != len(view):
            raise wire.ProtocolError("trailing bytes in pinset payload")
        return state


def place_replicas(digest: ContentId, factor: int | None, membership: Iterable[bytes]) -> list[bytes]:
    """Rendezvous placement: the ``factor`` peers with the highest SHA-256(digest || peer id)."""
    members = sorted(set(membership))
    if factor is None:
        return members
    if factor < 1:
        raise ValueError("replication factor must be positive or ALL")
    if factor > len(members):
        log.warning("replication factor %d exceeds site size %d; clamping", factor, len(members))
    ranked = sorted(members, key=lambda pid: hashlib.sha256(digest.raw + pid).digest(), reverse=True)
    return ranked[:factor]


ImageFetcher = Callable[[ContentId], Awaitable[None]]


class Replicator:
    """Gossips the pinset and pulls images this node is placed to hold.

    ``fetch_image`` must fetch and pin the image's manifest, config and
    layers locally.
    """

    def __init__(
        self,
        agent: PeerAgent,
        fetch_image: ImageFetcher,
        *,
        members: Iterable[str] = (),
        default_factor: int | None = ALL,
        gossip_interval: float = GOSSIP_INTERVAL,
        seed: int = 0,
        state: PinsetState | None = None,
    ):
        self.agent = agent
        self.fetch_image = fetch_image
        self.state = state if state is not None else PinsetState()
        self.default_factor = default_factor
        self.gossip_interval = gossip_interval
        self.rng = random.Random(hashlib.sha256(f"{seed}:{agent.address}".encode()).digest())
        self.members: dict[str, bytes] = {a: peer_id_for(a) for a in members if a != agent.origin}
        self.members[agent.address] = agent.peer_id
        self.fetching: dict[ContentId, asyncio.Task] = {}
        self.held: set[ContentId] = set()
        self.rounds = 0
        self.messages_sent = 0
        self._tasks: list[asyncio.Task] = []
        self._pull_waiters: list[asyncio.Future] = []
        agent.on_pinset = self._on_sync
        agent.on_peer = self._on_peer

    def _on_peer(self, info: PeerInfo) -> None:
        if info.address != self.agent.origin:
            self.members.setdefault(info.address, info.peer_id)

    def peers(self) -> list[str]:
        return sorted(a for a in self.members if a != self.agent.address)

    async def start(self) -> None:
        self._tasks.append(asyncio.get_running_loop().create_task(self._gossip_loop()))
        # join sync: pull state from one peer right away
        await self.sync_once()

    async def stop(self) -> None:
        for task in self._tasks + list(self.fetching.values()):
            task.cancel()
        await asyncio.gather(*self._tasks, *self.fetching.values(), return_exceptions=True)
        self._tasks.clear()

    # -- local mutations ---------------------------------------------------

    def pin_image(self, digest: ContentId, factor: int | None | str = "default") -> PinEntry:
        if factor == "default":
            factor = self.default_factor
        current = self.state.pins.get(digest)
        entry = PinEntry(digest, factor, self.state.tick(), self.agent.peer_id)
        if current is not None and current.rank()[0] >= entry.rank()[0]:
            return current
        self.state.add_pin(entry)
        self._schedule([entry])
        self._push_all()
        return entry

    def set_tag(self, name: str, tag: str, digest: ContentId) -> TagRecord:
        record = TagRecord(name, tag, digest, self.state.tick(), self.agent.peer_id)
        self.state.add_tag(record)
        self._push_all()
        return record

    def auto_pin_on_complete(self, digest: ContentId, name: str | None = None, tag: str | None = None) -> PinEntry:
        """Called once a local pull has every blob of an image."""
        self.held.add(digest)
        if name is not None and tag is not None and self.state.resolve(name, tag) != digest:
            self.set_tag(name, tag, digest)
        return self.pin_image(digest)

    async def resolve_tag(self, name: str, tag: str) -> ContentId | None:
        digest = self.state.resolve(name, tag)
        if digest is None and self.peers():
            await self.sync_once(wait=1.0)
            digest = self.state.resolve(name, tag)
        return digest

    # -- gossip -------------------------------------------------------------

    def _payload(self) -> wire.PinsetSync:
        return wire.PinsetSync(self.state.encode())

    def _send(self, address: str) -> asyncio.Task:
        async def go() -> None:
            try:
                conn = await self.agent.connection(address)
                await conn.send(self._payload())
                self.messages_sent += 1
            except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
                log.debug("%s: sync to %s failed: %s", self.agent.address, address, exc)

        return asyncio.get_running_loop().create_task(go())

    def _push_all(self) -> None:
        for peer in self.peers():
            self._send(peer)

    async def sync_once(self, wait: float = 0.0) -> None:
        peers = self.peers()
        if not peers:
            return
        peer = self.rng.choice(peers)
        fut = asyncio.get_running_loop().create_future()
        self._pull_waiters.append(fut)
        await self._send(peer)
        if wait > 0:
            try:
                await asyncio.wait_for(fut, wait)
            except asyncio.TimeoutError:
                pass
        if fut in self._pull_waiters:
            self._pull_waiters.remove(fut)

    async def _gossip_loop(self) -> None:
        while True:
            await asyncio.sleep(self.gossip_interval)
            self.rounds += 1
            peers = self.peers()
            if peers:
                await self._send(self.rng.choice(peers))
            self._schedule(list(self.state.pins.values()))

    def _on_sync(self, conn: PeerConnection, payload: bytes) -> None:
        try:
            remote = PinsetState.decode(payload)
        except (wire.ProtocolError, UnicodeDecodeError, ValueError) as exc:
            log.warning("%s: bad pinset from %s: %s", self.agent.address, conn.address, exc)
            return
        if conn.identity is not None:
            self._on_peer(conn.identity)
        changed = self.state.merge(remote)
        if changed:
            self._schedule(changed)
        if not remote.covers(self.state):
            try:
                conn.send_nowait(self._payload())
                self.messages_sent += 1
            except ConnectionError:
                pass
        for fut in self._pull_waiters:
            if not fut.done():
                fut.set_result(None)
        self._pull_waiters.clear()

    # -- placement and fetching ----------------------------------------------

    def placed_here(self, entry: PinEntry) -> bool:
        return self.agent.peer_id in place_replicas(entry.digest, entry.factor, self.members.values())

    def _schedule(self, entries: list[PinEntry]) -> None:
        for entry in entries:
            if entry.digest in self.held or entry.digest in self.fetching:
                continue
            if not self.placed_here(entry):
                continue
            task = asyncio.get_running_loop().create_task(self._replicate(entry.digest))
            self.fetching[entry.digest] = task

    async def _replicate(self, digest: ContentId) -> None:
        delay = 1.0
        try:
            while True:
                try:
                    await self.fetch_image(digest)
                    self.held.add(digest)
                    return
                except asyncio.CancelledError:
                    raise
                except Exception as exc:
                    log.info("%s: replicating %s failed (%s); retrying", self.agent.address, digest.short, exc)
                    await asyncio.sleep(delay)
                    delay = min(delay * 2, 30.0)
        finally:
            self.fetching.pop(digest, None)
