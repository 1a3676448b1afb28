"""Length-prefixed binary framing for the peer protocol.

Frame: u32 big-endian payload length, u8 message type, payload.  The length
counts the payload only.
"""
from __future__ import annotations

import asyncio
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

from .cas import ContentId

MAX_FRAME = 2 * 1024 * 1024

_HEADER = struct.Struct(">IB")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


class ProtocolError(Exception):
    pass


class MsgType(IntEnum):
    HELLO = 0x01
    WANT = 0x02
    BLOCK = 0x03
    DONT_HAVE = 0x04
    PROVIDE = 0x05
    FIND_PROVIDERS = 0x06
    PROVIDERS = 0x07
    PINSET_SYNC = 0x08


@dataclass(frozen=True)
class Hello:
    peer_id: bytes
    address: str


@dataclass(frozen=True)
class Want:
    cids: tuple[ContentId, ...]


@dataclass(frozen=True)
class BlockMsg:
    cid: ContentId
    data: bytes


@dataclass(frozen=True)
class DontHave:
    cid: ContentId


@dataclass(frozen=True)
class ProviderRecordMsg:
    cid: ContentId
    address: str
    ttl: int


@dataclass(frozen=True)
class Provide:
    records: tuple[ProviderRecordMsg, ...]


@dataclass(frozen=True)
class FindProviders:
    cid: ContentId


@dataclass(frozen=True)
class Providers:
    records: tuple[ProviderRecordMsg, ...]


@dataclass(frozen=True)
class PinsetSync:
    payload: bytes


Message = Union[Hello, Want, BlockMsg, DontHave, Provide, FindProviders, Providers, PinsetSync]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def cid(self) -> ContentId:
        return ContentId.from_raw(self.take(32))

    def text(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("address is not UTF-8") from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError("trailing bytes in payload")


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string too long")
    return _U16.pack(len(raw)) + raw


def _records(records: tuple[ProviderRecordMsg, ...]) -> bytes:
    if len(records) > 0xFFFF:
        raise ProtocolError("too many records")
    parts = [_U16.pack(len(records))]
    for rec in records:
        parts.append(rec.cid.raw + _text(rec.address) + _U32.pack(rec.ttl))
    return b"".join(parts)


def _read_records(r: _Reader) -> tuple[ProviderRecordMsg, ...]:
    return tuple(ProviderRecordMsg(r.cid(), r.text(), r.u32()) for _ in range(r.u16()))


def encode_payload(msg: Message) -> tuple[MsgType, bytes]:
    if isinstance(msg, Hello):
        if len(msg.peer_id) != 32:
            raise ProtocolError("peer id must be 32 bytes")
        return MsgType.HELLO, msg.peer_id + _text(msg.address)
    if isinstance(msg, Want):
        if len(msg.cids) > 0xFFFF:
            raise ProtocolError("want list too long")
        return MsgType.WANT, _U16.pack(len(msg.cids)) + b"".join(c.raw for c in msg.cids)
    if isinstance(msg, BlockMsg):
        return MsgType.BLOCK, msg.cid.raw + _U32.pack(len(msg.data)) + msg.data
    if isinstance(msg, DontHave):
        return MsgType.DONT_HAVE, msg.cid.raw
    if isinstance(msg, Provide):
        return MsgType.PROVIDE, _records(msg.records)
    if isinstance(msg, FindProviders):
        return MsgType.FIND_PROVIDERS, msg.cid.raw
    if isinstance(msg, Providers):
        return MsgType.PROVIDERS, _records(msg.records)
    if isinstance(msg, PinsetSync):
        return MsgType.PINSET_SYNC, msg.payload
    raise TypeError(f"not a protocol message: {msg!r}")


def encode(msg: Message) -> bytes:
    kind, payload = encode_payload(msg)
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(payload), kind) + payload


def decode_payload(kind: int, payload: bytes) -> Message:
    r = _Reader(payload)
    if kind == MsgType.HELLO:
        msg: Message = Hello(r.take(32), r.text())
    elif kind == MsgType.WANT:
        msg = Want(tuple(r.cid() for _ in range(r.u16())))
    elif kind == MsgType.BLOCK:
        cid = r.cid()
        msg = BlockMsg(cid, r.take(r.u32()))
    elif kind == MsgType.DONT_HAVE:
        msg = DontHave(r.cid())
    elif kind == MsgType.PROVIDE:
        msg = Provide(_read_records(r))
    elif kind == MsgType.FIND_PROVIDERS:
        msg = FindProviders(r.cid())
    elif kind == MsgType.PROVIDERS:
        msg = Providers(_read_records(r))
    elif kind == MsgType.PINSET_SYNC:
        return PinsetSync(payload)
    else:
        raise ProtocolError(f"unknown message type 0x{kind:02x}")
    r.done()
    return msg


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(frame) < _HEADER.size:
        raise ProtocolError("truncated header")
    length, kind = _HEADER.unpack_from(frame, 0)
    if length > MAX_FRAME:
        raise ProtocolError("oversize frame")
    if len(frame) != _HEADER.size + length:
        raise ProtocolError("frame length mismatch")
    return decode_payload(kind, frame[_HEADER.size:])


async def read_message(reader: asyncio.StreamReader) -> Message | None:
    """Read one message from a stream; ``None`` on clean EOF between frames.

    Oversize or malformed frames raise :class:`ProtocolError`; the caller is
    expected to close the connection.
    """
    try:
        header = await reader.readexactly(_HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError("connection closed mid-header") from None
        return None
    length, kind = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"oversize frame ({length} bytes)")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise ProtocolError("connection closed mid-frame") from None
    return decode_payload(kind, payload)
