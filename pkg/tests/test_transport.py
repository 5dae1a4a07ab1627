import socket
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collabdbn.errors import NumericError, ProtocolError, TransportTimeout
from collabdbn.transport import (
    MIN_FRAME,
    CorruptFrameError,
    ForeignProtocolError,
    FrameError,
    IncompleteFrameError,
    InProcessBus,
    RoundMessage,
    SessionConfig,
    SocketEndpoint,
    UnsupportedVersionError,
    crc_ok,
    decode_message,
    encode_message,
    loopback_mesh,
    parse_address,
)

from oracles import crc32_ref

# body bytes from the frame layout, CRC from the bitwise reference (oracles.crc32_ref)
EXAMPLE_FRAME = bytes.fromhex("424e4344010101000000020001000000000000000000f03f865a7724")


def test_example_frame_bytes():
    frame = encode_message(RoundMessage(1, 2, [1.0]))
    assert frame == EXAMPLE_FRAME
    assert crc32_ref(frame[:-4]) == struct.unpack("<I", frame[-4:])[0]


def test_empty_gradient_frame():
    frame = encode_message(RoundMessage(5, 0, []))
    assert len(frame) == 20 == MIN_FRAME
    assert frame[12:16] == b"\x00\x00\x00\x00"
    assert decode_message(frame) == RoundMessage(5, 0, [])


@given(st.integers(1, 2**32 - 1), st.integers(0, 2**16 - 1),
       arrays(float, st.integers(0, 40), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip(rnd, node, grad):
    msg = RoundMessage(rnd, node, grad)
    frame = encode_message(msg)
    assert decode_message(frame) == msg
    assert crc32_ref(frame[:-4]) == struct.unpack("<I", frame[-4:])[0]


@pytest.mark.parametrize("n", [0, 1, 10**5])
def test_roundtrip_lengths(n):
    g = np.random.default_rng(n).normal(size=n)
    assert decode_message(encode_message(RoundMessage(3, 1, g))) == RoundMessage(3, 1, g)


@given(st.tuples(st.integers(1, 5), st.integers(0, 5), st.lists(st.integers(-3, 3), max_size=3)),
       st.tuples(st.integers(1, 5), st.integers(0, 5), st.lists(st.integers(-3, 3), max_size=3)))
def test_encode_injective(a, b):
    ma = RoundMessage(a[0], a[1], np.array(a[2], dtype=float))
    mb = RoundMessage(b[0], b[1], np.array(b[2], dtype=float))
    assert (encode_message(ma) == encode_message(mb)) == (ma == mb)


def test_encode_rejects_invalid():
    with pytest.raises(NumericError):
        encode_message(RoundMessage(1, 1, [np.nan]))
    with pytest.raises(NumericError):
        encode_message(RoundMessage(1, 1, [np.inf]))
    with pytest.raises(ProtocolError):
        encode_message(RoundMessage(0, 1, [1.0]))
    with pytest.raises(ProtocolError):
        encode_message(RoundMessage(1, 70000, [1.0]))


def test_decode_error_kinds_are_distinct():
    frame = bytearray(EXAMPLE_FRAME)
    bad_magic = b"XNCD" + frame[4:]
    bad_version = frame[:4] + b"\x02" + frame[5:]
    payload_flip = frame[:20] + bytes([frame[20] ^ 0xFF]) + frame[21:]
    kinds = {
        ForeignProtocolError: bad_magic,
        UnsupportedVersionError: bad_version,
        CorruptFrameError: payload_flip,
        IncompleteFrameError: bytes(frame[:-1]),
    }
    for cls, data in kinds.items():
        with pytest.raises(cls):
            decode_message(data)
    assert len({ForeignProtocolError, UnsupportedVersionError, CorruptFrameError, IncompleteFrameError}) == 4
    assert not issubclass(CorruptFrameError, IncompleteFrameError)
    with pytest.raises(IncompleteFrameError):
        decode_message(b"BN")


def test_every_payload_byte_flip_is_crc_error():
    frame = encode_message(RoundMessage(9, 3, np.arange(4.0)))
    for i in range(16, len(frame) - 4):
        bad = bytearray(frame)
        bad[i] ^= 0x5A
        with pytest.raises(CorruptFrameError, match="CRC"):
            decode_message(bytes(bad))


# ---------------------------------------------------------------- in-process bus


def test_bus_gather_and_buffering():
    bus = InProcessBus(2, gradient_length=1, timeout=1.0)
    a, b = bus.endpoints
    b.broadcast(RoundMessage(2, 2, [2.0]))  # early message for round 2
    a.broadcast(RoundMessage(1, 1, [1.0]))
    b.broadcast(RoundMessage(1, 2, [1.5]))
    assert a.gather(1) == [RoundMessage(1, 2, [1.5])]
    assert b.gather(1) == [RoundMessage(1, 1, [1.0])]
    assert a.gather(2) == [RoundMessage(2, 2, [2.0])]


def test_bus_timeout_names_missing_node():
    bus = InProcessBus(3, timeout=0.1)
    bus.endpoints[1].broadcast(RoundMessage(1, 2, [0.0]))
    with pytest.raises(TransportTimeout) as exc:
        bus.endpoints[0].gather(1)
    assert exc.value.missing == [3]
    assert "3" in str(exc.value)


def test_bus_rejects_duplicates_and_bad_length():
    bus = InProcessBus(2, gradient_length=2, timeout=0.1)
    a, b = bus.endpoints
    b.broadcast(RoundMessage(1, 2, [0.0, 1.0]))
    with pytest.raises(ProtocolError, match="duplicate"):
        b.broadcast(RoundMessage(1, 2, [0.0, 1.0]))
    bus2 = InProcessBus(2, gradient_length=2, timeout=0.1)
    with pytest.raises(ProtocolError):
        bus2.endpoints[1].broadcast(RoundMessage(1, 2, [0.0]))
    with pytest.raises(ProtocolError):
        bus2.endpoints[0].broadcast(RoundMessage(1, 2, [0.0, 0.0]))


def test_bus_concurrent_rounds():
    n, rounds = 4, 30
    bus = InProcessBus(n, gradient_length=1, timeout=5.0)
    results = {}

    def worker(ep):
        seen = []
        for r in range(1, rounds + 1):
            ep.broadcast(RoundMessage(r, ep.node_id, [float(ep.node_id * 1000 + r)]))
            seen.append(sorted(m.gradient[0] for m in ep.gather(r)))
        results[ep.node_id] = seen

    threads = [threading.Thread(target=worker, args=(ep,)) for ep in bus.endpoints]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for node, seen in results.items():
        for r, vals in enumerate(seen, start=1):
            assert vals == sorted(float(p * 1000 + r) for p in range(1, n + 1) if p != node)


# ---------------------------------------------------------------- sockets


def test_parse_address():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
    with pytest.raises(ValueError):
        parse_address("nohost")


def test_socket_mesh_exchange_and_buffering():
    eps = loopback_mesh(3, gradient_length=2, timeout=5.0)
    try:
        eps[2].broadcast(RoundMessage(2, 3, [7.0, 7.0]))
        for ep in eps:
            ep.broadcast(RoundMessage(1, ep.node_id, [float(ep.node_id), 0.0]))
        for ep in eps:
            got = ep.gather(1)
            assert [m.node_id for m in got] == [i for i in (1, 2, 3) if i != ep.node_id]
            assert all(m.gradient[0] == m.node_id for m in got)
        eps[1].broadcast(RoundMessage(2, 2, [5.0, 5.0]))
        assert eps[0].gather(2, timeout=5.0) == [RoundMessage(2, 2, [5.0, 5.0]), RoundMessage(2, 3, [7.0, 7.0])]
    finally:
        for ep in eps:
            ep.close()


def test_socket_silent_peer_times_out():
    eps = loopback_mesh(2, timeout=0.2)
    try:
        with pytest.raises(TransportTimeout) as exc:
            eps[0].gather(1)
        assert exc.value.missing == [2]
    finally:
        for ep in eps:
            ep.close()


def test_socket_corrupt_frame_surfaces_as_protocol_error():
    ep = SocketEndpoint(SessionConfig(2, 1, None, 2.0), ("127.0.0.1", 0))
    try:
        s = socket.create_connection(ep.address)
        frame = bytearray(encode_message(RoundMessage(1, 2, [1.0])))
        frame[20] ^= 1
        s.sendall(struct.pack("<I", len(frame)) + bytes(frame))
        with pytest.raises(CorruptFrameError):
            ep.gather(1)
        s.close()
    finally:
        ep.close()


def test_socket_connect_timeout_when_peer_absent():
    probe = socket.create_server(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    ep = SocketEndpoint(SessionConfig(2, 1, None, 1.0, {2: ("127.0.0.1", port)}))
    try:
        t0 = time.monotonic()
        with pytest.raises(TransportTimeout):
            ep.connect(0.3)
        assert time.monotonic() - t0 < 3
    finally:
        ep.close()


def test_frame_errors_are_protocol_errors():
    assert issubclass(FrameError, ProtocolError)
    assert crc_ok(EXAMPLE_FRAME) and not crc_ok(b"\x00")
