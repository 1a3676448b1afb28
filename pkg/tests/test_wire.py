import asyncio
import struct

import pytest
from hypothesis import given, strategies as st

from edgepier import wire
from edgepier.cas import ContentId

cids = st.binary(min_size=32, max_size=32).map(ContentId.from_raw)
addrs = st.text(max_size=40)
records = st.tuples(cids, addrs, st.integers(0, 2**32 - 1)).map(lambda t: wire.ProviderRecordMsg(*t))

messages = st.one_of(
    st.builds(wire.Hello, st.binary(min_size=32, max_size=32), addrs),
    st.builds(wire.Want, st.lists(cids, max_size=20).map(tuple)),
    st.builds(wire.BlockMsg, cids, st.binary(max_size=3000)),
    st.builds(wire.DontHave, cids),
    st.builds(wire.Provide, st.lists(records, max_size=5).map(tuple)),
    st.builds(wire.FindProviders, cids),
    st.builds(wire.Providers, st.lists(records, max_size=5).map(tuple)),
    st.builds(wire.PinsetSync, st.binary(max_size=500)),
)


@given(messages)
def test_round_trip(msg):
    assert wire.decode(wire.encode(msg)) == msg


def test_frame_header_layout():
    cid = ContentId.of(b"x")
    frame = wire.encode(wire.DontHave(cid))
    assert frame[:4] == struct.pack(">I", 32)
    assert frame[4] == 0x04
    assert frame[5:] == cid.raw


def test_hello_layout():
    frame = wire.encode(wire.Hello(bytes(range(32)), "n1:4001"))
    assert frame[4] == 0x01
    assert frame[5:37] == bytes(range(32))
    assert frame[37:39] == struct.pack(">H", 7)
    assert frame[39:] == b"n1:4001"


def test_provide_layout():
    cid = ContentId.of(b"y")
    frame = wire.encode(wire.Provide((wire.ProviderRecordMsg(cid, "ab", 30),)))
    payload = frame[5:]
    assert payload == struct.pack(">H", 1) + cid.raw + struct.pack(">H", 2) + b"ab" + struct.pack(">I", 30)


def test_oversize_rejected_on_encode():
    with pytest.raises(wire.ProtocolError):
        wire.encode(wire.BlockMsg(ContentId.of(b"z"), bytes(wire.MAX_FRAME)))


def test_unknown_type():
    with pytest.raises(wire.ProtocolError):
        wire.decode(struct.pack(">IB", 0, 0x42))


def test_trailing_bytes():
    frame = wire.encode(wire.DontHave(ContentId.of(b"a"))) + b"\x00"
    bad = struct.pack(">IB", 33, 0x04) + frame[5:]
    with pytest.raises(wire.ProtocolError):
        wire.decode(bad)


def _stream(data: bytes) -> asyncio.StreamReader:
    reader = asyncio.StreamReader()
    reader.feed_data(data)
    reader.feed_eof()
    return reader


def test_stream_reading():
    async def go():
        msgs = [wire.FindProviders(ContentId.of(b"1")), wire.Want((ContentId.of(b"2"),))]
        reader = _stream(b"".join(wire.encode(m) for m in msgs))
        got = [await wire.read_message(reader), await wire.read_message(reader)]
        assert got == msgs
        assert await wire.read_message(reader) is None

    asyncio.run(go())


def test_stream_oversize_frame():
    async def go():
        reader = _stream(struct.pack(">IB", wire.MAX_FRAME + 1, 0x03))
        with pytest.raises(wire.ProtocolError):
            await wire.read_message(reader)

    asyncio.run(go())


def test_stream_torn_frame():
    async def go():
        frame = wire.encode(wire.DontHave(ContentId.of(b"a")))
        with pytest.raises(wire.ProtocolError):
            await wire.read_message(_stream(frame[:-1]))

    asyncio.run(go())
