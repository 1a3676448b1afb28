"""Minimal HTTP/1.1 server and client over asyncio-style streams (via h11).

Working on plain ``(reader, writer)`` pairs lets the same code run over OS
sockets and the simulated fabric.
"""
from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import AsyncIterator, Awaitable, Callable, Iterable
from urllib.parse import parse_qs, urlsplit

import h11

log = logging.getLogger(__name__)

READ_SIZE = 256 * 1024
MAX_BODY = 2 * 1024**3


class StreamAborted(Exception):
    """Raised by a body iterator to cut the connection mid-response."""


@dataclass
class Request:
    method: str
    target: str
    headers: dict[str, str]
    body: bytes = b""

    @property
    def path(self) -> str:
        return urlsplit(self.target).path

    @property
    def query(self) -> dict[str, str]:
        return {k: v[0] for k, v in parse_qs(urlsplit(self.target).query).items()}


Body = bytes | AsyncIterator[bytes] | Iterable[bytes]


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: Body = b""
    # for HEAD: advertised length without a body
    content_length: int | None = None


App = Callable[[Request], Awaitable[Response]]


async def _receive(conn: h11.Connection, reader: asyncio.StreamReader):
    while True:
        event = conn.next_event()
        if event is h11.NEED_DATA:
            data = await reader.read(READ_SIZE)
            conn.receive_data(data)
            continue
        return event


async def serve_http(reader: asyncio.StreamReader, writer, app: App) -> None:
    """Serve requests on one connection until the peer closes it."""
    conn = h11.Connection(h11.SERVER)
    try:
        while True:
            event = await _receive(conn, reader)
            if isinstance(event, (h11.ConnectionClosed, type(None))) or event is h11.PAUSED:
                return
            if not isinstance(event, h11.Request):
                return
            headers = {k.decode().lower(): v.decode() for k, v in event.headers}
            body = bytearray()
            while True:
                ev = await _receive(conn, reader)
                if isinstance(ev, h11.Data):
                    body += ev.data
                    if len(body) > MAX_BODY:
                        return
                elif isinstance(ev, h11.EndOfMessage):
                    break
                else:
                    return
            request = Request(event.method.decode(), event.target.decode(), headers, bytes(body))
            try:
                response = await app(request)
            except Exception:
                log.exception("handler failed for %s %s", request.method, request.target)
                response = Response(500, {"content-type": "text/plain"}, b"internal error")
            ok = await _send_response(conn, writer, request, response)
            if not ok or conn.our_state is h11.MUST_CLOSE:
                return
            try:
                conn.start_next_cycle()
            except h11.LocalProtocolError:
                return
    except (h11.RemoteProtocolError, ConnectionError, OSError, asyncio.IncompleteReadError):
        return
    finally:
        try:
            writer.close()
        except Exception:
            pass


async def _send_response(conn: h11.Connection, writer, request: Request, response: Response) -> bool:
    headers = dict(response.headers)
    body = response.body
    if isinstance(body, (bytes, bytearray)):
        length = response.content_length if response.content_length is not None else len(body)
        headers["content-length"] = str(length)
    elif response.content_length is not None:
        headers["content-length"] = str(response.content_length)
    out = h11.Response(status_code=response.status, headers=list(headers.items()))
    writer.write(conn.send(out))
    if request.method == "HEAD":
        writer.write(conn.send(h11.EndOfMessage()))
        await writer.drain()
        return True
    try:
        if isinstance(body, (bytes, bytearray)):
            if body:
                writer.write(conn.send(h11.Data(data=bytes(body))))
        elif hasattr(body, "__aiter__"):
            async for chunk in body:
                writer.write(conn.send(h11.Data(data=chunk)))
                await writer.drain()
        else:
            for chunk in body:
                writer.write(conn.send(h11.Data(data=chunk)))
                await writer.drain()
    except StreamAborted:
        return False
    writer.write(conn.send(h11.EndOfMessage()))
    await writer.drain()
    return True


@dataclass
class HttpResult:
    status: int
    headers: dict[str, str]
    body: bytes

    def json(self):
        import json

        return json.loads(self.body.decode())


class HttpClient:
    """Keep-alive HTTP/1.1 client with one idle connection pool per host."""

    def __init__(self, connect: Callable[[str], Awaitable[tuple]], timeout: float | None = 600.0):
        self._connect = connect
        self.timeout = timeout
        self._idle: dict[str, list[tuple]] = {}

    async def request(
        self,
        method: str,
        url: str,
        *,
        headers: dict[str, str] | None = None,
        body: bytes = b"",
        sink: Callable[[bytes], None] | None = None,
    ) -> HttpResult:
        """``url`` is ``host:port/path?query``.  With ``sink``, body chunks go there instead."""
        hostport, _, rest = url.partition("/")
        target = "/" + rest
        hdrs = {"host": hostport, "user-agent": "edgepier"}
        hdrs.update(headers or {})
        if body or method in ("PUT", "POST"):
            hdrs["content-length"] = str(len(body))
        for attempt in range(2):
            pooled = self._idle.get(hostport)
            reused = bool(pooled)
            reader, writer, conn = pooled.pop() if pooled else (*await self._connect(hostport), h11.Connection(h11.CLIENT))
            try:
                return await asyncio.wait_for(
                    self._exchange(hostport, reader, writer, conn, method, target, hdrs, body, sink), self.timeout
                )
            except (ConnectionError, h11.RemoteProtocolError, asyncio.IncompleteReadError) as exc:
                writer.close()
                if reused and attempt == 0:
                    continue  # stale keep-alive connection; retry on a fresh one
                raise ConnectionError(f"{method} {url}: {exc}") from exc
        raise AssertionError("unreachable")

    async def _exchange(self, hostport, reader, writer, conn, method, target, hdrs, body, sink) -> HttpResult:
        writer.write(conn.send(h11.Request(method=method, target=target, headers=list(hdrs.items()))))
        if body:
            writer.write(conn.send(h11.Data(data=body)))
        writer.write(conn.send(h11.EndOfMessage()))
        await writer.drain()
        event = await _receive(conn, reader)
        if isinstance(event, h11.ConnectionClosed):
            raise ConnectionResetError("server closed the connection")
        if not isinstance(event, h11.Response):
            raise h11.RemoteProtocolError(f"unexpected {event!r}")
        headers = {k.decode().lower(): v.decode() for k, v in event.headers}
        chunks = bytearray()
        while True:
            ev = await _receive(conn, reader)
            if isinstance(ev, h11.Data):
                if sink is not None:
                    sink(bytes(ev.data))
                else:
                    chunks += ev.data
            elif isinstance(ev, h11.EndOfMessage):
                break
            else:
                raise ConnectionResetError("response body cut short")
        if conn.our_state is h11.DONE and conn.their_state is h11.DONE:
            conn.start_next_cycle()
            self._idle.setdefault(hostport, []).append((reader, writer, conn))
        else:
            writer.close()
        return HttpResult(event.status_code, headers, bytes(chunks))

    def close(self) -> None:
        for conns in self._idle.values():
            for _, writer, _ in conns:
                writer.close()
        self._idle.clear()
