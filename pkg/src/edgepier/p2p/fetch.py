"""Fetching a whole DAG from site peers, with the origin as fallback.

Scheduling in brief:

* the root node comes first (asked for by file digest);
* peers that announced the complete DAG are used round-robin, weighted by
  an EWMA of their observed throughput;
* while nobody in the site holds a block, exactly one of the peers fetching
  the same file pulls it from the origin: the rendezvous-hash "owner" among
  them.  The others ask the owner, which parks the want until the block
  lands.  This is what keeps uplink traffic near one copy of the image;
* every block is verified before it enters the store, a peer that fails or
  stalls for ``timeout`` seconds loses the block to the next candidate, and
  the final 5% of blocks may be requested from two peers at once.
"""
from __future__ import annotations

import asyncio
import hashlib
import logging
import math
from dataclasses import dataclass, field

from .. import wire
from ..cas import MAX_NODE_SIZE, ContentId, DagNode, IntegrityError, StoreError
from .routing import peer_id_for

log = logging.getLogger(__name__)

MAX_PEERS = 8
WINDOW_BYTES = 4 * 1024 * 1024
# requests to the origin commit uplink bytes, so keep that pipeline short
ORIGIN_WINDOW_BYTES = 1024 * 1024
ENDGAME_FRACTION = 0.05
ENDGAME_DUPLICATION = 2
REFRESH_INTERVAL = 2.0
ORIGIN_RETRIES = 3
COOLDOWN = 1.0


class _RootInsteadOfLeaf(Exception):
    """The peer holds the file's root but not its single leaf."""


class FetchError(Exception):
    """The DAG could not be completed; ``missing`` lists what is still absent.

    ``unknown`` is true when every source that answered said it does not
    hold the content (as opposed to sources being unreachable).
    """

    def __init__(self, target: ContentId, missing: list[ContentId], unknown: bool = False):
        self.target = target
        self.missing = missing
        self.unknown = unknown
        super().__init__(f"could not fetch {target}: {len(missing)} block(s) unavailable")


@dataclass
class FetchStats:
    bytes_from_origin: int = 0
    bytes_from_peers: int = 0
    blocks_by_source: dict[str, int] = field(default_factory=dict)
    integrity_rejects: int = 0
    duplicate_blocks: int = 0
    started: float = 0.0
    finished: float = 0.0


class FetchSession:
    def __init__(
        self,
        agent,
        target: ContentId,
        *,
        use_origin: bool = True,
        timeout: float | None = None,
        window_bytes: int = WINDOW_BYTES,
        max_peers: int = MAX_PEERS,
        refresh_interval: float = REFRESH_INTERVAL,
        on_block=None,
        root_only: bool = False,
    ):
        self.agent = agent
        self.store = agent.store
        self.target = target
        self.use_origin = use_origin and agent.origin is not None
        self.timeout = agent.block_timeout if timeout is None else timeout
        self.window = max(4, window_bytes // self.store.chunk_size)
        self.origin_window = max(2, min(window_bytes, ORIGIN_WINDOW_BYTES) // self.store.chunk_size)
        # grows by one per block received from the origin (slow start), so that
        # little is committed to the uplink before the set of co-fetchers is known
        self.origin_credit = 2
        self.max_peers = max_peers
        self.refresh_interval = refresh_interval
        self.on_block = on_block
        self.root_only = root_only
        self.stats = FetchStats()
        self.root: ContentId | None = None
        self.complete: list[str] = []
        self.partial: list[str] = []
        self.dead: set[str] = set()
        self.pending: dict[ContentId, None] = {}
        self.inflight: dict[ContentId, dict[str, float]] = {}
        self.excluded: dict[ContentId, set[str]] = {}
        self.origin_failures: dict[ContentId, int] = {}
        self.lane_load: dict[str, int] = {}
        self.cooldown: dict[str, float] = {}
        self._owners: dict[ContentId, str] = {}
        self._credit: dict[str, float] = {}
        self._events: asyncio.Queue = asyncio.Queue()
        self._last_refresh = -math.inf
        # refresh quickly while co-fetchers are still announcing, then back off
        self._refresh_gap = 0.25
        self._refreshing: asyncio.Task | None = None
        self._fetching_nodes = False
        self._answered_dont_have = False
        self._unreachable = False

    # -- public -------------------------------------------------------------

    async def run(self) -> ContentId:
        agent = self.agent
        agent.sessions.append(self)
        self.stats.started = agent.now()
        try:
            root = self._local_root()
            if root is None:
                await self._refresh()
                await self._fetch_batch([self.target], nodes=True)
                root = self._local_root()
                if root is None:
                    raise FetchError(self.target, [self.target])
            self.root = root
            if self.root_only:
                return root
            with self.store.lease(root):
                if self.store.missing_blocks(root):
                    # be visible to concurrent fetchers before dividing up the work
                    await self._announce(root, complete=False)
                    await self._refresh()
                while True:
                    missing = self.store.missing_blocks(root)
                    if not missing:
                        break
                    await self._fetch_batch(missing, nodes=self._interior_missing(root))
                self.stats.finished = agent.now()
            await self._announce(root, complete=True)
            return root
        finally:
            agent.sessions.remove(self)
            unfinished = [*self.pending, *self.inflight]
            for cid, addrs in self.inflight.items():
                if agent.origin in addrs:
                    agent.origin_fetch_ended(cid)
            self.inflight.clear()
            for cid in unfinished:
                agent.release_deferred(cid)
            agent.recheck_deferred()
            self.pending.clear()
            if self._refreshing is not None:
                self._refreshing.cancel()

    def expects(self, cid: ContentId) -> bool:
        """Is ``cid`` on its way here from a source that will not ask us back?

        Complete holders and the origin never do, and the owner ranks above
        us in the rendezvous order, so parking a peer's want on such a block
        cannot form a cycle.
        """
        if self.inflight.get(cid):
            return True
        if cid not in self.pending:
            return False
        ex = self.excluded.get(cid, ())
        if any(p not in ex and p not in self.dead for p in self.complete):
            return True
        if self.use_origin and self.origin_failures.get(cid, 0) < ORIGIN_RETRIES:
            return True
        owner = self._owner(cid)
        return owner != self.agent.address and owner not in ex and owner not in self.dead

    @property
    def learning(self) -> bool:
        """Still fetching the DAG's nodes, so its leaf ids are not all known."""
        return self.root is None or self._fetching_nodes

    def note_peer_wants(self, address: str, cid: ContentId) -> None:
        """A peer asking for one of our pending blocks is fetching the same file."""
        if cid not in self.pending and cid not in self.inflight:
            return
        if address in self.partial or address in self.complete or address in self.dead:
            return
        if address == self.agent.origin or len(self.partial) >= self.max_peers:
            return
        self.partial.append(address)
        self._owners.clear()

    # -- helpers ------------------------------------------------------------

    def _local_root(self) -> ContentId | None:
        root = self.store.root_for(self.target)
        if root is None and self.store.is_node(self.target):
            root = self.target
        return root

    def _interior_missing(self, root: ContentId) -> bool:
        try:
            self.store.leaves(root)
            return False
        except StoreError:
            return True

    async def _announce(self, root: ContentId, complete: bool) -> None:
        try:
            await self.agent.provide_file(root, complete)
        except Exception:  # announcing is best effort
            log.debug("announce failed", exc_info=True)

    def _owner(self, cid: ContentId) -> str:
        owner = self._owners.get(cid)
        if owner is None:
            members = [*self.partial, self.agent.address]
            owner = max(members, key=lambda a: hashlib.sha256(cid.raw + peer_id_for(a)).digest())
            self._owners[cid] = owner
        return owner

    async def _refresh(self) -> None:
        agent = self.agent
        self._last_refresh = agent.now()
        digest = self.target
        root = self._local_root()
        if root is not None:
            try:
                digest = self.store.file_digest(root)
            except StoreError:
                pass
        holders = await agent.find_providers(digest)
        full: list = []
        if root is not None and root != digest:
            full = await agent.find_providers(root)
        full_addrs = [p.address for p in full if p.address not in self.dead]
        part_addrs = [p.address for p in holders if p.address not in self.dead and p.address not in full_addrs]
        if root is None:
            # anyone announcing the file holds its root node
            full_addrs, part_addrs = part_addrs, []
        self.complete = full_addrs[: self.max_peers]
        partial = part_addrs[: self.max_peers]
        if partial != self.partial:
            self.partial = partial
            self._owners.clear()

    def _maybe_refresh(self) -> None:
        if self._refreshing is not None and not self._refreshing.done():
            return
        if self.agent.now() - self._last_refresh < self._refresh_gap:
            return
        self._refresh_gap = min(self._refresh_gap * 2, self.refresh_interval)
        self._refreshing = asyncio.get_running_loop().create_task(self._refresh())

    def _capacity(self, addr: str, now: float) -> bool:
        if self.cooldown.get(addr, -math.inf) > now:
            return False
        if addr == self.agent.origin:
            limit = min(self.origin_window, self.origin_credit)
        else:
            limit = self.window
        return self.lane_load.get(addr, 0) < limit

    def _weighted_pick(self, candidates: list[str], now: float) -> str | None:
        ready = [p for p in candidates if self._capacity(p, now)]
        if not ready:
            return None
        known = [self.agent.throughput[p] for p in ready if p in self.agent.throughput]
        default = sum(known) / len(known) if known else 1.0
        weights = {p: self.agent.throughput.get(p, default) for p in ready}
        total = sum(weights.values())
        for p in ready:
            self._credit[p] = self._credit.get(p, 0.0) + weights[p]
        best = max(ready, key=lambda p: (self._credit[p], -ready.index(p)))
        self._credit[best] -= total
        return best

    _WAIT = "wait"
    _EXHAUSTED = "exhausted"

    def _route(self, cid: ContentId, now: float) -> str:
        ex = self.excluded.get(cid, set())
        complete = [p for p in self.complete if p not in ex and p not in self.dead]
        if complete:
            return self._weighted_pick(complete, now) or self._WAIT
        me = self.agent.address
        origin = self.agent.origin
        origin_ok = self.use_origin and self.origin_failures.get(cid, 0) < ORIGIN_RETRIES
        if not self._fetching_nodes:
            owner = self._owner(cid)
            if owner != me and owner not in ex and owner not in self.dead:
                return owner if self._capacity(owner, now) else self._WAIT
        if origin_ok:
            return origin if self._capacity(origin, now) else self._WAIT
        others = [p for p in self.partial if p not in ex and p not in self.dead]
        if others:
            return self._weighted_pick(others, now) or self._WAIT
        if self.use_origin and self.cooldown.get(origin, -math.inf) > now:
            return self._WAIT
        return self._EXHAUSTED

    async def _send(self, cid: ContentId, addr: str) -> bool:
        agent = self.agent
        now = agent.now()
        try:
            fut = await agent.want(addr, cid)
        except (ConnectionError, OSError, asyncio.TimeoutError) as exc:
            log.debug("%s: want %s from %s failed: %s", agent.address, cid.short, addr, exc)
            self._unreachable = True
            self._lane_failed(cid, addr, connection=True)
            return False
        self.inflight.setdefault(cid, {})[addr] = now
        self.lane_load[addr] = self.lane_load.get(addr, 0) + 1
        if addr == agent.origin:
            agent.origin_fetch_started(cid)
        fut.add_done_callback(lambda f, c=cid, a=addr: self._events.put_nowait((c, a, f)))
        return True

    def _lane_failed(self, cid: ContentId, addr: str, connection: bool) -> None:
        if addr == self.agent.origin:
            self.origin_failures[cid] = self.origin_failures.get(cid, 0) + 1
            if connection:
                self.cooldown[addr] = self.agent.now() + COOLDOWN
        else:
            self.excluded.setdefault(cid, set()).add(addr)
            if connection:
                self.dead.add(addr)

    def _fill(self, now: float) -> tuple[list[tuple[ContentId, str]], bool]:
        """Pick a source for each pending block that has a free lane.

        Also reports whether some block has run out of sources entirely.
        """
        exhausted = False
        sends = []
        # with every lane full nothing can be routed; exhaustion is only
        # decided once lanes drain, so skipping the scan loses nothing
        if any(self.inflight.values()) and not self._any_lane_free(now):
            return sends, exhausted
        for cid in list(self.pending):
            route = self._route(cid, now)
            if route == self._WAIT:
                continue
            if route == self._EXHAUSTED:
                exhausted = True
                continue
            del self.pending[cid]
            # reserve the lane slot now so the loop sees it filling up
            self.lane_load[route] = self.lane_load.get(route, 0) + 1
            sends.append((cid, route))
            if not self._any_lane_free(now):
                break
        return sends, exhausted

    def _any_lane_free(self, now: float) -> bool:
        lanes = [a for a in (*self.complete, *self.partial) if a not in self.dead]
        if self.use_origin and self.agent.origin:
            lanes.append(self.agent.origin)
        return not lanes or any(self._capacity(a, now) for a in lanes)

    async def _dispatch(self, sends) -> None:
        for cid, addr in sends:
            self.lane_load[addr] -= 1
            if not await self._send(cid, addr):
                self.pending[cid] = None

    def _endgame(self, total: int, remaining: dict) -> list:
        if len(remaining) > max(1, math.ceil(total * ENDGAME_FRACTION)):
            return []
        now = self.agent.now()
        extra = []
        for cid in remaining:
            asked = self.inflight.get(cid)
            if not asked or len(asked) >= ENDGAME_DUPLICATION:
                continue
            if self.agent.origin in asked:
                continue
            ex = self.excluded.get(cid, set())
            spare = [p for p in self.complete if p not in asked and p not in ex and p not in self.dead]
            pick = self._weighted_pick(spare, now)
            if pick is not None:
                self.lane_load[pick] = self.lane_load.get(pick, 0) + 1
                extra.append((cid, pick))
        return extra

    def _store(self, cid: ContentId, data: bytes, nodes: bool) -> None:
        # A single-chunk file's only leaf has the file digest as its id, so a
        # WANT for that digest may be answered with either the root or the leaf.
        if nodes:
            try:
                self.store.put_node_bytes(data, expect=cid)
            except (IntegrityError, ValueError):
                if ContentId.of(data) != cid:
                    raise
                self.store.chunk_blob(data)
        else:
            try:
                self.store.put_verified(cid, data)
            except IntegrityError:
                if self._is_root_of(data, cid):
                    raise _RootInsteadOfLeaf() from None
                raise

    @staticmethod
    def _is_root_of(data: bytes, digest: ContentId) -> bool:
        try:
            return DagNode.decode(data).file_digest == digest
        except ValueError:
            return False

    def _have(self, cid: ContentId, nodes: bool) -> bool:
        if nodes:
            return self.store.is_node(cid) or self.store.root_for(cid) is not None
        return self.store.has(cid)

    async def _fetch_batch(self, cids: list[ContentId], nodes: bool) -> None:
        agent = self.agent
        self._fetching_nodes = nodes
        remaining = dict.fromkeys(c for c in cids if not self._have(c, nodes))
        total = len(remaining)
        self.pending = dict(remaining)
        if not nodes:
            # wants parked while we were still reading the DAG can be judged now
            agent.recheck_deferred()
        stall_checks = 0
        while remaining:
            now = agent.now()
            self._maybe_refresh()
            sends, exhausted = self._fill(now)
            sends += self._endgame(total, remaining)
            if sends:
                await self._dispatch(sends)
            if not any(self.inflight.values()) and not sends:
                if self._refreshing is not None and not self._refreshing.done():
                    await asyncio.wait({self._refreshing})
                    continue
                if exhausted and stall_checks >= 1:
                    missing = list(remaining)
                    raise FetchError(self.target, missing, unknown=self._answered_dont_have and not self._unreachable)
                if exhausted:
                    stall_checks += 1
                    self._last_refresh = -math.inf
                    self._maybe_refresh()
                    continue
                # only cooldowns are holding us back
                await asyncio.sleep(COOLDOWN / 2)
                continue
            try:
                event = await asyncio.wait_for(self._events.get(), timeout=1.0)
            except asyncio.TimeoutError:
                self._expire(agent.now())
                continue
            self._handle(event, remaining, nodes)
            while not self._events.empty():
                self._handle(self._events.get_nowait(), remaining, nodes)
            stall_checks = 0

    def _expire(self, now: float) -> None:
        for cid, asked in list(self.inflight.items()):
            for addr, sent in list(asked.items()):
                conn = self.agent.conns.get(addr)
                last = max(sent, conn.last_rx if conn is not None else sent)
                if now - last >= self.timeout:
                    log.info("%s: %s timed out on %s", self.agent.address, addr, cid.short)
                    # the done-callback routes this through _handle like any failure
                    fut = self.agent._requests.pop((addr, cid), None)
                    if fut is not None and not fut.done():
                        fut.set_exception(asyncio.TimeoutError())

    def _handle(self, event, remaining: dict, nodes: bool) -> None:
        cid, addr, fut = event
        agent = self.agent
        asked = self.inflight.get(cid, {})
        sent = asked.pop(addr, None)
        if not asked:
            self.inflight.pop(cid, None)
        if sent is not None:
            self.lane_load[addr] -= 1
        agent.forget_request(addr, cid)
        from_origin = addr == agent.origin
        try:
            if fut.cancelled():
                raise ConnectionError("cancelled")
            exc = fut.exception()
            if exc is not None:
                raise exc
            msg = fut.result()
            if cid not in remaining:
                if isinstance(msg, wire.BlockMsg):
                    self.stats.duplicate_blocks += 1
                return
            if isinstance(msg, wire.DontHave):
                self._answered_dont_have = True
                self._lane_failed(cid, addr, connection=False)
                if from_origin:
                    self.origin_failures[cid] = ORIGIN_RETRIES
            else:
                data = msg.data
                if len(data) > MAX_NODE_SIZE:
                    raise IntegrityError(cid, "oversized block")
                try:
                    self._store(cid, data, nodes)
                except _RootInsteadOfLeaf:
                    self._lane_failed(cid, addr, connection=False)
                except (IntegrityError, ValueError) as err:
                    self.stats.integrity_rejects += 1
                    log.warning("%s: rejected %s from %s: %s", agent.address, cid.short, addr, err)
                    self._lane_failed(cid, addr, connection=False)
                    if from_origin:
                        self.origin_failures[cid] = ORIGIN_RETRIES
                else:
                    del remaining[cid]
                    self.pending.pop(cid, None)
                    elapsed = max(agent.now() - (sent if sent is not None else agent.now()), 1e-6)
                    agent.record_throughput(addr, len(data) / elapsed)
                    self.stats.blocks_by_source[addr] = self.stats.blocks_by_source.get(addr, 0) + 1
                    if from_origin:
                        self.stats.bytes_from_origin += len(data)
                        self.origin_credit += 1
                    else:
                        self.stats.bytes_from_peers += len(data)
                    if self.on_block is not None:
                        self.on_block(len(data), from_origin)
                    agent.release_deferred(cid)
        except asyncio.TimeoutError:
            self._lane_failed(cid, addr, connection=False)
        except (ConnectionError, OSError):
            self._unreachable = True
            self._lane_failed(cid, addr, connection=True)
        finally:
            if from_origin and sent is not None:
                agent.origin_fetch_ended(cid)
        if cid in remaining and cid not in self.inflight:
            self.pending[cid] = None
