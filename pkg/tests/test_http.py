import asyncio

import pytest

from edgepier.httpio import HttpClient, Response, StreamAborted, serve_http
from edgepier.transport import TcpTransport

from daemons import free_port


async def app(req):
    if req.path == "/echo":
        return Response(200, {"x-method": req.method}, req.body)
    if req.path == "/stream":
        n = int(req.query["n"])
        return Response(200, {}, (bytes([i % 256]) * 1000 for i in range(n)), content_length=n * 1000)
    if req.path == "/abort":
        def gen():
            yield b"a" * 1000
            raise StreamAborted("gone")
        return Response(200, {}, gen(), content_length=5000)
    if req.path == "/head":
        return Response(200, {}, b"", content_length=1234)
    return Response(404, {}, b"missing")


async def with_server(fn):
    transport = TcpTransport()
    address = f"127.0.0.1:{free_port()}"
    listener = await transport.listen(address, lambda r, w: serve_http(r, w, app))
    client = HttpClient(transport.connect, timeout=10)
    try:
        return await fn(client, address)
    finally:
        client.close()
        listener.close()


def test_echo_and_keep_alive():
    async def go(client, address):
        results = [await client.request("POST", f"{address}/echo", body=f"n{i}".encode()) for i in range(5)]
        return results

    results = asyncio.run(with_server(go))
    assert [r.body for r in results] == [f"n{i}".encode() for i in range(5)]
    assert results[0].headers["x-method"] == "POST"


def test_streamed_body_reaches_sink():
    seen = []

    async def go(client, address):
        return await client.request("GET", f"{address}/stream?n=300", sink=seen.append)

    res = asyncio.run(with_server(go))
    assert res.status == 200
    data = b"".join(seen)
    assert len(data) == 300_000 and data[:1000] == b"\x00" * 1000


def test_head_advertises_length_without_body():
    async def go(client, address):
        return await client.request("HEAD", f"{address}/head")

    res = asyncio.run(with_server(go))
    assert res.headers["content-length"] == "1234" and res.body == b""


def test_aborted_stream_is_not_a_complete_response():
    async def go(client, address):
        with pytest.raises((ConnectionError, OSError, asyncio.IncompleteReadError, ValueError)):
            await client.request("GET", f"{address}/abort")
        # the server survives and serves the next connection
        return await client.request("GET", f"{address}/echo")

    assert asyncio.run(with_server(go)).status == 200


def test_not_found_and_connection_refused():
    async def go(client, address):
        res = await client.request("GET", f"{address}/nope")
        assert res.status == 404
        with pytest.raises((ConnectionError, OSError)):
            await client.request("GET", f"127.0.0.1:{free_port()}/echo")

    asyncio.run(with_server(go))
