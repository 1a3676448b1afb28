"""Peer agent: connections, provider lookup and the serving side of block exchange."""
from __future__ import annotations

import asyncio
import logging
from collections import deque
from typing import Awaitable, Callable

from .. import wire
from ..cas import BlockStore, ContentId, IntegrityError, NotFoundError, StoreError
from ..transport import Transport
from .routing import K_BUCKET, PeerInfo, ProviderStore, RoutingTable, peer_id_for, short_id, xor_distance

log = logging.getLogger(__name__)

REPLICATION_R = 3
LOOKUP_ALPHA = 3
PROVIDER_TTL = 30
REANNOUNCE_INTERVAL = 10.0
FIND_TIMEOUT = 3.0


class FairLock:
    """A lock handed to waiters strictly in arrival order (no barging)."""

    def __init__(self) -> None:
        self._held = False
        self._waiters: deque[asyncio.Future] = deque()

    async def __aenter__(self) -> None:
        if not self._held and not self._waiters:
            self._held = True
            return
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        try:
            await fut
        except asyncio.CancelledError:
            if fut.done() and not fut.cancelled():
                self._release()
            else:
                self._waiters.remove(fut)
            raise

    async def __aexit__(self, *exc) -> None:
        self._release()

    def _release(self) -> None:
        while self._waiters:
            fut = self._waiters.popleft()
            if not fut.done():
                fut.set_result(None)  # ownership passes directly
                return
        self._held = False


class _PendingFind:
    __slots__ = ("future", "intros")

    def __init__(self, future: asyncio.Future):
        self.future = future
        self.intros: list[PeerInfo] = []


class PeerConnection:
    def __init__(self, agent: "PeerAgent", reader: asyncio.StreamReader, writer, dialed: str | None):
        self.agent = agent
        self.reader = reader
        self.writer = writer
        self.dialed = dialed
        self.identity: PeerInfo | None = None
        self.identified = asyncio.Event()
        self.finds: deque[_PendingFind] = deque()
        self.wants: deque[ContentId] = deque()
        self.want_ready = asyncio.Event()
        self.closed = False
        self.last_rx = agent.now()
        self.tasks: list[asyncio.Task] = []

    @property
    def address(self) -> str | None:
        if self.identity is not None:
            return self.identity.address
        return self.dialed

    def start(self) -> None:
        loop = asyncio.get_running_loop()
        self.tasks = [loop.create_task(self._read_loop()), loop.create_task(self._upload_loop())]

    def send_nowait(self, msg: wire.Message) -> None:
        if self.closed:
            raise ConnectionResetError(f"connection to {self.address} closed")
        self.writer.write(wire.encode(msg))

    async def send(self, msg: wire.Message) -> None:
        self.send_nowait(msg)
        await self.writer.drain()

    async def _read_loop(self) -> None:
        try:
            while True:
                msg = await wire.read_message(self.reader)
                if msg is None:
                    break
                self.last_rx = self.agent.now()
                self.agent._dispatch(self, msg)
        except wire.ProtocolError as exc:
            log.warning("protocol error from %s: %s", self.address, exc)
        except (ConnectionError, asyncio.IncompleteReadError, OSError):
            pass
        finally:
            self.close()

    async def _upload_loop(self) -> None:
        agent = self.agent
        try:
            while True:
                while not self.wants:
                    self.want_ready.clear()
                    await self.want_ready.wait()
                cid = self.wants.popleft()
                async with agent.upload_lock:
                    reply = agent._answer(self, cid)
                    if reply is None:
                        continue
                    self.send_nowait(reply)
                    await self.writer.drain()
        except (ConnectionError, OSError):
            self.close()

    def enqueue_want(self, cid: ContentId) -> None:
        self.wants.append(cid)
        self.want_ready.set()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.writer.close()
        except Exception:  # transport already gone
            pass
        current = asyncio.current_task()
        for task in self.tasks:
            if task is not current:
                task.cancel()
        for pf in self.finds:
            if not pf.future.done():
                pf.future.set_exception(ConnectionResetError("connection closed"))
        self.finds.clear()
        self.agent._connection_closed(self)


PinsetHandler = Callable[[PeerConnection, bytes], None]


class PeerAgent:
    """One node's presence in the site overlay.

    Serves WANTs from the local store, stores provider records for the keys
    it is close to, and performs iterative provider lookups.  Fetching whole
    DAGs lives in :mod:`edgepier.p2p.fetch`.
    """

    def __init__(
        self,
        store: BlockStore,
        transport: Transport,
        address: str,
        *,
        bootstrap: list[str] | tuple[str, ...] = (),
        origin: str | None = None,
        dht: bool = True,
        r: int = REPLICATION_R,
        alpha: int = LOOKUP_ALPHA,
        k: int = K_BUCKET,
        provider_ttl: int = PROVIDER_TTL,
        reannounce_interval: float = REANNOUNCE_INTERVAL,
        block_timeout: float = 10.0,
    ):
        self.store = store
        self.transport = transport
        self.address = address
        self.peer_id = peer_id_for(address)
        self.bootstrap = [a for a in bootstrap if a != address]
        self.origin = origin
        self.dht = dht
        self.r = r
        self.alpha = alpha
        self.k = k
        self.provider_ttl = provider_ttl
        self.reannounce_interval = reannounce_interval
        self.block_timeout = block_timeout
        self.serving = True
        self.routing = RoutingTable(self.peer_id, k)
        self.providers = ProviderStore()
        self.conns: dict[str, PeerConnection] = {}
        self._all_conns: list[PeerConnection] = []
        self._dialing: dict[str, asyncio.Future] = {}
        self._requests: dict[tuple[str, ContentId], asyncio.Future] = {}
        self.provided: dict[ContentId, None] = {}
        # blocks some local fetch will pull from the origin; wants for them wait
        self.origin_bound: dict[ContentId, int] = {}
        self.deferred: dict[ContentId, list[PeerConnection]] = {}
        self.sessions: list = []
        self.fetches: dict[ContentId, asyncio.Task] = {}
        self.upload_lock = FairLock()
        self.served: dict[str, int] = {}
        self.serve_trace: deque[str] = deque(maxlen=100_000)
        self.throughput: dict[str, float] = {}
        self.on_pinset: PinsetHandler | None = None
        self.on_peer: Callable[[PeerInfo], None] | None = None
        self._listener = None
        self._tasks: list[asyncio.Task] = []

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    def __repr__(self) -> str:
        return f"PeerAgent({self.address}, {short_id(self.peer_id)})"

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        self._listener = await self.transport.listen(self.address, self._accept)
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._reannounce_loop()))
        await self.join()

    async def join(self) -> None:
        """Contact bootstrap peers; HELLO introductions fill the routing table."""
        async def dial(address: str) -> None:
            conn = await self.connection(address)
            await asyncio.wait_for(conn.identified.wait(), FIND_TIMEOUT)

        results = await asyncio.gather(*(dial(a) for a in self.bootstrap), return_exceptions=True)
        for addr, res in zip(self.bootstrap, results):
            if isinstance(res, BaseException):
                log.info("%s: bootstrap peer %s unreachable: %s", self.address, addr, res)

    async def stop(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for task in list(self.fetches.values()) + self._tasks:
            task.cancel()
        for conn in list(self._all_conns):
            conn.close()
        await asyncio.gather(*self._tasks, *self.fetches.values(), return_exceptions=True)
        self._tasks.clear()

    # -- connections -------------------------------------------------------

    async def _accept(self, reader, writer) -> None:
        conn = PeerConnection(self, reader, writer, dialed=None)
        self._all_conns.append(conn)
        conn.start()
        try:
            conn.send_nowait(wire.Hello(self.peer_id, self.address))
            await asyncio.gather(*conn.tasks, return_exceptions=True)
        finally:
            conn.close()

    async def connection(self, address: str) -> PeerConnection:
        if address == self.address:
            raise ValueError("refusing to connect to self")
        conn = self.conns.get(address)
        if conn is not None and not conn.closed:
            return conn
        pending = self._dialing.get(address)
        if pending is not None:
            return await asyncio.shield(pending)
        fut = asyncio.get_running_loop().create_future()
        self._dialing[address] = fut
        try:
            reader, writer = await self.transport.connect(address)
            conn = PeerConnection(self, reader, writer, dialed=address)
            self._all_conns.append(conn)
            self.conns[address] = conn
            conn.start()
            conn.send_nowait(wire.Hello(self.peer_id, self.address))
            fut.set_result(conn)
            return conn
        except BaseException as exc:
            fut.set_exception(exc if isinstance(exc, Exception) else ConnectionError("cancelled"))
            fut.exception()  # mark retrieved
            raise
        finally:
            del self._dialing[address]

    def _connection_closed(self, conn: PeerConnection) -> None:
        if conn in self._all_conns:
            self._all_conns.remove(conn)
        addr = conn.address
        if addr is not None and self.conns.get(addr) is conn:
            del self.conns[addr]
        for cid, waiting in list(self.deferred.items()):
            if conn in waiting:
                waiting.remove(conn)
                if not waiting:
                    del self.deferred[cid]
        # pending requests are keyed by address; fail them unless another link remains
        if addr is not None and addr not in self.conns:
            for key in [k for k in self._requests if k[0] == addr]:
                fut = self._requests.pop(key)
                if not fut.done():
                    fut.set_exception(ConnectionResetError(f"lost connection to {addr}"))
                    # the asking session may already be gone
                    fut.exception()

    def _learn(self, info: PeerInfo) -> None:
        if not self.dht or info.address == self.origin or info.address == self.address:
            return
        if peer_id_for(info.address) != info.peer_id:
            return
        if self.routing.update(info.peer_id, info.address) and self.on_peer is not None:
            self.on_peer(info)

    # -- inbound messages -----------------------------------------------

    def _dispatch(self, conn: PeerConnection, msg: wire.Message) -> None:
        if isinstance(msg, wire.Hello):
            info = PeerInfo(msg.peer_id, msg.address)
            if conn.identity is None:
                conn.identity = info
                conn.identified.set()
                if msg.address not in self.conns or self.conns[msg.address].closed:
                    self.conns[msg.address] = conn
                self._learn(info)
                if conn.dialed is None and self.dht:
                    self._introduce(conn, self.routing.closest(info.peer_id, self.k))
            else:
                self._learn(info)
                if conn.finds:
                    conn.finds[0].intros.append(info)
        elif isinstance(msg, wire.Want):
            for cid in msg.cids:
                if conn.address is not None:
                    for session in self.sessions:
                        session.note_peer_wants(conn.address, cid)
                conn.enqueue_want(cid)
        elif isinstance(msg, (wire.BlockMsg, wire.DontHave)):
            fut = self._requests.pop((conn.address, msg.cid), None)
            if fut is not None and not fut.done():
                fut.set_result(msg)
        elif isinstance(msg, wire.Provide):
            if self.dht:
                now = self.now()
                for rec in msg.records:
                    self.providers.add(rec.cid, rec.address, rec.ttl, now)
        elif isinstance(msg, wire.FindProviders):
            self._answer_find(conn, msg.cid)
        elif isinstance(msg, wire.Providers):
            if conn.finds:
                pf = conn.finds.popleft()
                if not pf.future.done():
                    pf.future.set_result((msg.records, pf.intros))
        elif isinstance(msg, wire.PinsetSync):
            if self.on_pinset is not None:
                self.on_pinset(conn, msg.payload)

    def _introduce(self, conn: PeerConnection, peers: list[PeerInfo]) -> None:
        for p in peers:
            if p.address != conn.address:
                conn.send_nowait(wire.Hello(p.peer_id, p.address))

    def _answer_find(self, conn: PeerConnection, cid: ContentId) -> None:
        if not self.dht:
            conn.send_nowait(wire.Providers(()))
            return
        now = self.now()
        self._introduce(conn, self.routing.closest(cid, self.k))
        records = tuple(
            wire.ProviderRecordMsg(rec.cid, rec.address, rec.ttl_left(now))
            for rec in self.providers.get(cid, now)
            if rec.ttl_left(now) > 0
        )
        conn.send_nowait(wire.Providers(records))

    # -- serving ---------------------------------------------------------

    def holds(self, cid: ContentId) -> bool:
        return self.store.has(cid) or self.store.root_for(cid) is not None

    def _answer(self, conn: PeerConnection, cid: ContentId) -> wire.Message | None:
        if not self.serving:
            return wire.DontHave(cid)
        target = cid if self.store.has(cid) else self.store.root_for(cid) or cid
        if self.store.has(target):
            try:
                data = self.store.get_block(target)
            except (NotFoundError, IntegrityError):
                return wire.DontHave(cid)
            peer = conn.address or "?"
            self.served[peer] = self.served.get(peer, 0) + 1
            self.serve_trace.append(peer)
            return wire.BlockMsg(cid, data)
        if self._should_park(cid):
            self.deferred.setdefault(cid, []).append(conn)
            return None
        return wire.DontHave(cid)

    def _should_park(self, cid: ContentId) -> bool:
        # a block we do not know yet may belong to a DAG still being read;
        # refusing now would send the asker to the origin for a block we
        # are about to fetch ourselves
        return self.will_obtain(cid) or any(s.learning for s in self.sessions)

    def will_obtain(self, cid: ContentId) -> bool:
        if cid in self.origin_bound:
            return True
        return any(s.expects(cid) for s in self.sessions)

    def origin_fetch_started(self, cid: ContentId) -> None:
        self.origin_bound[cid] = self.origin_bound.get(cid, 0) + 1

    def origin_fetch_ended(self, cid: ContentId) -> None:
        n = self.origin_bound.get(cid, 0) - 1
        if n > 0:
            self.origin_bound[cid] = n
        else:
            self.origin_bound.pop(cid, None)
        self.release_deferred(cid)

    def release_deferred(self, cid: ContentId) -> None:
        """Re-queue parked wants; they are answered from the store or refused."""
        if self._should_park(cid) and not self.holds(cid):
            return
        for conn in self.deferred.pop(cid, []):
            if not conn.closed:
                conn.enqueue_want(cid)

    def recheck_deferred(self) -> None:
        for cid in list(self.deferred):
            self.release_deferred(cid)

    # -- requesting ------------------------------------------------------

    async def want(self, address: str, cid: ContentId) -> asyncio.Future:
        """Send a WANT (or join an identical outstanding one); returns the reply future."""
        key = (address, cid)
        fut = self._requests.get(key)
        if fut is not None and not fut.done():
            return fut
        conn = await self.connection(address)
        fut = asyncio.get_running_loop().create_future()
        self._requests[key] = fut
        try:
            conn.send_nowait(wire.Want((cid,)))
        except ConnectionError:
            self._requests.pop(key, None)
            raise
        return fut

    def forget_request(self, address: str, cid: ContentId) -> None:
        fut = self._requests.get((address, cid))
        if fut is not None and fut.done():
            del self._requests[(address, cid)]

    def record_throughput(self, address: str, sample: float) -> None:
        prev = self.throughput.get(address)
        self.throughput[address] = sample if prev is None else 0.3 * sample + 0.7 * prev

    # -- DHT ------------------------------------------------------------

    def _record_holders(self, cid: ContentId) -> list[PeerInfo]:
        me = PeerInfo(self.peer_id, self.address)
        ranked = sorted(self.routing.peers() + [me], key=lambda p: xor_distance(p.peer_id, cid.raw))
        return ranked[: max(1, self.r)]

    async def announce_provide(self, cids: list[ContentId]) -> int:
        """Store provider records on the r closest peers; returns acknowledged sends."""
        if not self.dht or not cids:
            return 0
        now = self.now()
        batches: dict[str, list[wire.ProviderRecordMsg]] = {}
        for cid in cids:
            self.provided[cid] = None
            for holder in self._record_holders(cid):
                if holder.address == self.address:
                    self.providers.add(cid, self.address, self.provider_ttl, now)
                else:
                    batches.setdefault(holder.address, []).append(
                        wire.ProviderRecordMsg(cid, self.address, self.provider_ttl)
                    )

        async def push(addr: str, records: list[wire.ProviderRecordMsg]) -> bool:
            try:
                conn = await self.connection(addr)
                for start in range(0, len(records), 10_000):
                    await conn.send(wire.Provide(tuple(records[start:start + 10_000])))
                return True
            except (ConnectionError, OSError, asyncio.TimeoutError):
                return False

        acks = await asyncio.gather(*(push(a, recs) for a, recs in batches.items()))
        return sum(acks) + sum(1 for cid in cids for h in self._record_holders(cid) if h.address == self.address)

    async def _reannounce_loop(self) -> None:
        while True:
            await asyncio.sleep(self.reannounce_interval)
            live = [c for c in self.provided if self.holds(c)]
            self.provided = dict.fromkeys(live)
            try:
                await self.announce_provide(live)
            except Exception:  # best effort; next round retries
                log.exception("re-announce failed")

    async def _query_find(self, address: str, cid: ContentId):
        conn = await self.connection(address)
        pf = _PendingFind(asyncio.get_running_loop().create_future())
        conn.finds.append(pf)
        conn.send_nowait(wire.FindProviders(cid))
        return await asyncio.wait_for(asyncio.shield(pf.future), FIND_TIMEOUT)

    async def find_providers(self, cid: ContentId) -> list[PeerInfo]:
        """Iterative lookup, alpha queries per round; self excluded, nearest to us first."""
        found: dict[str, PeerInfo] = {}
        if self.dht:
            now = self.now()
            for rec in self.providers.get(cid, now):
                found[rec.address] = PeerInfo(rec.peer_id, rec.address)
            shortlist = self.routing.closest(cid, self.k)
            queried: set[str] = set()
            while True:
                batch = [p for p in shortlist if p.address not in queried][: self.alpha]
                if not batch:
                    break
                for p in batch:
                    queried.add(p.address)
                replies = await asyncio.gather(
                    *(self._query_find(p.address, cid) for p in batch), return_exceptions=True
                )
                known = {p.address for p in shortlist}
                for reply in replies:
                    if isinstance(reply, BaseException):
                        if isinstance(reply, asyncio.CancelledError):
                            raise reply
                        continue
                    records, intros = reply
                    for rec in records:
                        if rec.ttl > 0:
                            found[rec.address] = PeerInfo(peer_id_for(rec.address), rec.address)
                    for intro in intros:
                        if intro.address not in known and intro.address != self.address:
                            known.add(intro.address)
                            shortlist.append(intro)
                shortlist.sort(key=lambda p: xor_distance(p.peer_id, cid.raw))
                shortlist = shortlist[: self.k]
        found.pop(self.address, None)
        ranked = sorted(found.values(), key=lambda p: xor_distance(p.peer_id, self.peer_id))
        return ranked[: self.alpha * self.k]

    # -- fetching -----------------------------------------------------------

    def fetch(self, target: ContentId, **kwargs) -> asyncio.Task:
        """Single-flight DAG fetch keyed by file digest or node id.

        With ``root_only=True`` only the root node is fetched; a full fetch
        already in flight for the same target also satisfies it.
        """
        from .fetch import FetchSession

        root_only = kwargs.get("root_only", False)
        task = self.fetches.get(target)
        if task is None and root_only:
            task = self.fetches.get(("root", target))
        if task is not None and not task.done():
            return task
        key = ("root", target) if root_only else target
        session = FetchSession(self, target, **kwargs)
        task = asyncio.get_running_loop().create_task(session.run())
        task.session = session  # type: ignore[attr-defined]
        self.fetches[key] = task
        task.add_done_callback(lambda t: self.fetches.pop(key, None) if self.fetches.get(key) is t else None)
        return task

    async def provide_file(self, root: ContentId, complete: bool) -> None:
        digest = self.store.file_digest(root)
        cids = [digest, root] if complete else [digest]
        try:
            await self.announce_provide(cids)
        except StoreError:
            pass
