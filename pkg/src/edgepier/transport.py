"""Stream transports: real TCP sockets or the simulated fabric.

Both expose ``listen(address, handler)`` and ``connect(address)`` returning
asyncio-style ``(reader, writer)`` pairs, so protocol code is shared.
"""
from __future__ import annotations

import asyncio
from typing import Awaitable, Callable, Protocol

from .netsim.fabric import Fabric, split_address

Handler = Callable[[asyncio.StreamReader, asyncio.StreamWriter], Awaitable[None]]


class Listener(Protocol):
    address: str

    def close(self) -> None: ...


class Transport(Protocol):
    async def listen(self, address: str, handler: Handler) -> Listener: ...

    async def connect(self, address: str) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]: ...


class _TcpListener:
    def __init__(self, server: asyncio.base_events.Server, address: str):
        self.server = server
        self.address = address

    def close(self) -> None:
        self.server.close()


class TcpTransport:
    """OS sockets; no shaping."""

    def __init__(self, connect_timeout: float = 5.0):
        self.connect_timeout = connect_timeout

    async def listen(self, address: str, handler: Handler) -> _TcpListener:
        host, port = split_address(address)
        server = await asyncio.start_server(handler, host, port, limit=2**24)
        bound_port = server.sockets[0].getsockname()[1]
        return _TcpListener(server, f"{host}:{bound_port}")

    async def connect(self, address: str):
        host, port = split_address(address)
        return await asyncio.wait_for(
            asyncio.open_connection(host, port, limit=2**24), self.connect_timeout
        )


class _SimListener:
    def __init__(self, fabric: Fabric, host: str, port: int):
        self.fabric = fabric
        self.host = host
        self.port = port
        self.address = f"{host}:{port}"

    def close(self) -> None:
        self.fabric.unlisten(self.host, self.port)


class SimTransport:
    """Connections originate from ``host`` inside a simulated fabric."""

    def __init__(self, fabric: Fabric, host: str):
        self.fabric = fabric
        self.host = host

    async def listen(self, address: str, handler: Handler) -> _SimListener:
        host, port = split_address(address)
        if host != self.host:
            raise OSError(f"cannot bind {address} from host {self.host}")
        self.fabric.listen(host, port, handler)
        return _SimListener(self.fabric, host, port)

    async def connect(self, address: str):
        return await self.fabric.connect(self.host, address)
