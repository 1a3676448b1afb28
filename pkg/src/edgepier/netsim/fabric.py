"""Deterministic in-process network with bandwidth shaping and fault injection.

Each node has a NIC paced at its bandwidth in both directions; flows sharing a
NIC are served round-robin one segment (at most 64 KiB) at a time.  A segment
leaves the sender's NIC, waits out the link latency, then passes the
receiver's NIC before it is handed to the application.
"""
from __future__ import annotations

import asyncio
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Awaitable, Callable

from .topology import LinkShape, Topology

QUANTUM = 64 * 1024
HIGH_WATER = 2 * QUANTUM
CONNECT_TIMEOUT = 3.0

Handler = Callable[[asyncio.StreamReader, "SimWriter"], Awaitable[None]]


@dataclass
class PairCounters:
    bytes_sent: int = 0
    messages: int = 0
    bytes_dropped: int = 0
    bytes_received: int = 0
    utilization: dict[int, int] = field(default_factory=dict)  # second -> bytes


class ByteCounters:
    """Per directed pair: bytes, messages and a 1 s utilization series."""

    def __init__(self) -> None:
        self.pairs: dict[tuple[str, str], PairCounters] = {}

    def pair(self, src: str, dst: str) -> PairCounters:
        key = (src, dst)
        counters = self.pairs.get(key)
        if counters is None:
            counters = self.pairs[key] = PairCounters()
        return counters

    def sent_from(self, node: str) -> int:
        return sum(c.bytes_sent - c.bytes_dropped for (s, _), c in self.pairs.items() if s == node)

    def received_by(self, node: str) -> int:
        return sum(c.bytes_received for (_, d), c in self.pairs.items() if d == node)

    def egress_series(self, node: str) -> dict[int, int]:
        series: dict[int, int] = {}
        for (src, _), c in self.pairs.items():
            if src == node:
                for sec, n in c.utilization.items():
                    series[sec] = series.get(sec, 0) + n
        return dict(sorted(series.items()))

    def snapshot(self) -> list[tuple]:
        return [
            (s, d, c.bytes_sent, c.messages, c.bytes_dropped, c.bytes_received, tuple(sorted(c.utilization.items())))
            for (s, d), c in sorted(self.pairs.items())
        ]


def _spread(series: dict[int, int], start: float, end: float, n: int) -> None:
    """Credit ``n`` bytes sent during [start, end) to the 1 s buckets they overlap."""
    first, last = int(start), int(end)
    if first == last or end <= start:
        series[last] = series.get(last, 0) + n
        return
    credited = 0
    for sec in range(first, last + 1):
        overlap = min(end, sec + 1) - max(start, sec)
        share = n - credited if sec == last else round(n * overlap / (end - start))
        credited += share
        if share:
            series[sec] = series.get(sec, 0) + share


class _Segment:
    __slots__ = ("pipe", "data", "eof")

    def __init__(self, pipe: "_Pipe", data: bytes, eof: bool = False):
        self.pipe = pipe
        self.data = data
        self.eof = eof


class Pacer:
    """Serializes segments at a fixed bit rate, round-robin across flows."""

    def __init__(self, loop: asyncio.AbstractEventLoop, rate_bps: float, on_done: Callable[[_Segment], None]):
        if rate_bps <= 0:
            raise ValueError("bandwidth must be positive")
        self.loop = loop
        self.rate = rate_bps
        self.on_done = on_done
        self.queues: dict[int, deque[_Segment]] = {}
        self.active: deque[int] = deque()
        self.busy = False

    def enqueue(self, flow: int, seg: _Segment) -> None:
        queue = self.queues.get(flow)
        if queue is None:
            queue = self.queues[flow] = deque()
        if not queue:
            self.active.append(flow)
        queue.append(seg)
        if not self.busy:
            self._next()

    def _next(self) -> None:
        if not self.active:
            self.busy = False
            return
        flow = self.active.popleft()
        queue = self.queues[flow]
        seg = queue.popleft()
        if queue:
            self.active.append(flow)
        else:
            del self.queues[flow]
        self.busy = True
        self.loop.call_later(len(seg.data) * 8 / self.rate, self._finish, seg)

    def _finish(self, seg: _Segment) -> None:
        self.on_done(seg)
        self._next()


class _Pipe:
    """One direction of a simulated connection."""

    _ids = itertools.count()

    def __init__(self, fabric: "Fabric", src: str, dst: str, reader: asyncio.StreamReader):
        self.id = next(self._ids)
        self.fabric = fabric
        self.src = src
        self.dst = dst
        self.reader = reader
        self.shape = fabric.topology.link(src, dst)
        self.counters = fabric.counters.pair(src, dst)
        self.queued = 0  # bytes waiting in the sender's NIC
        self.inflight = 0  # bytes accepted but not yet delivered
        self.broken = False
        self.eof_sent = False
        self.waiters: list[asyncio.Future] = []
        self.loopback = src == dst

    def send(self, data: bytes) -> None:
        if self.broken:
            raise ConnectionResetError(f"connection {self.src}->{self.dst} reset")
        if self.eof_sent:
            raise ConnectionError("write after close")
        if not data:
            return
        self.counters.messages += 1
        self.counters.bytes_sent += len(data)
        if self.shape.drop_prob and self.fabric.rng.random() < self.shape.drop_prob:
            self.counters.bytes_dropped += len(data)
            return
        if self.loopback:
            self.counters.bytes_received += len(data)
            self.reader.feed_data(data)
            return
        self.inflight += len(data)
        view = memoryview(data)
        for start in range(0, len(data), QUANTUM):
            piece = bytes(view[start:start + QUANTUM])
            self.queued += len(piece)
            self.fabric._egress(self, _Segment(self, piece))

    def send_eof(self) -> None:
        if self.eof_sent or self.broken:
            return
        self.eof_sent = True
        if self.loopback:
            self.reader.feed_eof()
            return
        self.fabric._egress(self, _Segment(self, b"", eof=True))

    def departed(self, seg: _Segment) -> None:
        if self.broken:
            return
        self.queued -= len(seg.data)
        if self.queued <= HIGH_WATER:
            self._wake()

    def _wake(self) -> None:
        waiters, self.waiters = self.waiters, []
        for fut in waiters:
            if not fut.done():
                fut.set_result(None)

    def deliver(self, seg: _Segment) -> None:
        if self.broken:
            return
        if seg.eof:
            self.reader.feed_eof()
            return
        self.inflight -= len(seg.data)
        self.counters.bytes_received += len(seg.data)
        self.reader.feed_data(seg.data)

    def reset(self) -> None:
        if self.broken:
            return
        self.broken = True
        self.counters.bytes_dropped += self.inflight
        self.inflight = 0
        self.queued = 0
        if not self.reader.at_eof():
            self.reader.set_exception(ConnectionResetError(f"connection {self.src}->{self.dst} reset"))
        self._wake()


class SimWriter:
    """The subset of ``asyncio.StreamWriter`` the protocol code relies on."""

    def __init__(self, pipe: _Pipe, local: str, peer: str):
        self._pipe = pipe
        self._local = local
        self._peer = peer
        self._closing = False

    def write(self, data: bytes) -> None:
        self._pipe.send(bytes(data))

    def writelines(self, lines) -> None:
        for line in lines:
            self.write(line)

    async def drain(self) -> None:
        pipe = self._pipe
        while pipe.queued > HIGH_WATER and not pipe.broken:
            fut = asyncio.get_running_loop().create_future()
            pipe.waiters.append(fut)
            await fut
        if pipe.broken:
            raise ConnectionResetError(f"connection {pipe.src}->{pipe.dst} reset")

    def can_write_eof(self) -> bool:
        return True

    def write_eof(self) -> None:
        self._pipe.send_eof()

    def close(self) -> None:
        if not self._closing:
            self._closing = True
            self._pipe.send_eof()

    def is_closing(self) -> bool:
        return self._closing or self._pipe.broken

    async def wait_closed(self) -> None:
        return None

    def get_extra_info(self, name: str, default=None):
        if name == "peername":
            return self._peer
        if name == "sockname":
            return self._local
        return default


class Fabric:
    def __init__(self, topology: Topology, loop: asyncio.AbstractEventLoop):
        self.topology = topology
        self.loop = loop
        self.rng = random.Random(topology.seed)
        self.counters = ByteCounters()
        self.listeners: dict[tuple[str, int], Handler] = {}
        self.down: set[str] = set()
        self.blocked: set[frozenset[str]] = set()
        self.pipes: list[_Pipe] = []
        self._egress_pacers: dict[str, Pacer] = {}
        self._ingress_pacers: dict[str, Pacer] = {}
        self.tasks: set[asyncio.Task] = set()
        for node in topology.nodes:
            rate = topology.nic_rate(node)
            self._egress_pacers[node] = Pacer(loop, rate, self._departed)
            self._ingress_pacers[node] = Pacer(loop, rate, self._arrived)

    # -- data path ---------------------------------------------------------

    def _egress(self, pipe: _Pipe, seg: _Segment) -> None:
        self._egress_pacers[pipe.src].enqueue(pipe.id, seg)

    def _departed(self, seg: _Segment) -> None:
        pipe = seg.pipe
        pipe.departed(seg)
        if pipe.broken:
            return
        if seg.data:
            end = self.loop.time()
            rate = self._egress_pacers[pipe.src].rate
            _spread(pipe.counters.utilization, end - len(seg.data) * 8 / rate, end, len(seg.data))
        delay = pipe.shape.latency_ms / 1000.0
        self.loop.call_later(delay, self._ingress_pacers[pipe.dst].enqueue, pipe.id, seg)

    def _arrived(self, seg: _Segment) -> None:
        seg.pipe.deliver(seg)

    # -- connections -------------------------------------------------------

    def listen(self, node: str, port: int, handler: Handler) -> None:
        self._check_node(node)
        key = (node, port)
        if key in self.listeners:
            raise OSError(f"address {node}:{port} already in use")
        self.listeners[key] = handler

    def unlisten(self, node: str, port: int) -> None:
        self.listeners.pop((node, port), None)

    def _check_node(self, node: str) -> None:
        if node not in self._egress_pacers:
            raise KeyError(f"unknown node {node!r}")

    def reachable(self, a: str, b: str) -> bool:
        return a not in self.down and b not in self.down and frozenset((a, b)) not in self.blocked

    async def connect(self, src: str, address: str) -> tuple[asyncio.StreamReader, SimWriter]:
        host, port = split_address(address)
        self._check_node(src)
        if host not in self._egress_pacers:
            raise ConnectionRefusedError(f"unknown host {host!r}")
        shape = self.topology.link(src, host)
        rtt = 2 * shape.latency_ms / 1000.0
        if src != host and shape.drop_prob and self.rng.random() < shape.drop_prob:
            await asyncio.sleep(CONNECT_TIMEOUT)
            raise ConnectionError(f"connect to {address} timed out")
        if src != host:
            await asyncio.sleep(rtt)
        if not self.reachable(src, host):
            raise ConnectionRefusedError(f"{address} unreachable from {src}")
        handler = self.listeners.get((host, port))
        if handler is None:
            raise ConnectionRefusedError(f"nothing listening on {address}")
        client_reader = asyncio.StreamReader(limit=2**24)
        server_reader = asyncio.StreamReader(limit=2**24)
        up = _Pipe(self, src, host, server_reader)
        down = _Pipe(self, host, src, client_reader)
        self.pipes.extend((up, down))
        client_writer = SimWriter(up, src, address)
        server_writer = SimWriter(down, address, src)
        task = self.loop.create_task(self._serve(handler, server_reader, server_writer))
        self.tasks.add(task)
        task.add_done_callback(self.tasks.discard)
        return client_reader, client_writer

    @staticmethod
    async def _serve(handler: Handler, reader: asyncio.StreamReader, writer: SimWriter) -> None:
        try:
            await handler(reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def shutdown(self) -> None:
        for pipe in self.pipes:
            pipe.reset()
        tasks = list(self.tasks)
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    # -- faults ------------------------------------------------------------

    def partition(self, nodes_a, nodes_b) -> None:
        a, b = set(nodes_a), set(nodes_b)
        if a & b:
            raise ValueError("partition sides must be disjoint")
        for x in sorted(a):
            for y in sorted(b):
                self.blocked.add(frozenset((x, y)))
        self._reset_unreachable()

    def heal(self) -> None:
        self.blocked.clear()
        self.down.clear()

    def set_down(self, node: str) -> None:
        self._check_node(node)
        self.down.add(node)
        self._reset_unreachable()

    def set_up(self, node: str) -> None:
        self.down.discard(node)

    def _reset_unreachable(self) -> None:
        alive = []
        for pipe in self.pipes:
            if pipe.broken:
                continue
            if not self.reachable(pipe.src, pipe.dst):
                pipe.reset()
            else:
                alive.append(pipe)
        self.pipes = alive

    # -- clock ----------------------------------------------------------------

    def now(self) -> float:
        return self.loop.time()

    def advance(self, duration: float) -> None:
        self.loop.advance(duration)


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)
