"""Round-gradient exchange between nodes.

Frame layout (all integers little-endian)::

    "BNCD" | version u8 | msg-type u8 | round u32 | node_id u16 | count u32
    | count x float64 | CRC-32 of everything before it, u32

Two delivery mechanisms share the same endpoint interface
(``broadcast`` / ``gather`` / ``close``): an in-process bus for simulation and
a full TCP mesh in which every frame is prefixed with its u32 byte length.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ProtocolError, TransportTimeout

log = logging.getLogger(__name__)

MAGIC = b"BNCD"
VERSION = 0x01
MSG_GRADIENT = 0x01
_HEADER = struct.Struct("<4sBBIHI")
_CRC = struct.Struct("<I")
_LEN = struct.Struct("<I")
MIN_FRAME = _HEADER.size + _CRC.size
MAX_COUNT = 0xFFFFFFFF


class FrameError(ProtocolError):
    """A frame failed validation."""


class ForeignProtocolError(FrameError):
    pass


class UnsupportedVersionError(FrameError):
    pass


class CorruptFrameError(FrameError):
    pass


class IncompleteFrameError(FrameError):
    pass


@dataclass(frozen=True, eq=False)
class RoundMessage:
    round: int
    node_id: int
    gradient: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gradient", np.asarray(self.gradient, dtype=float).ravel())

    def __eq__(self, other):
        if not isinstance(other, RoundMessage):
            return NotImplemented
        return (
            self.round == other.round
            and self.node_id == other.node_id
            and self.gradient.tobytes() == other.gradient.tobytes()
        )

    __hash__ = None


def encode_message(msg: RoundMessage) -> bytes:
    if not 1 <= msg.round <= 0xFFFFFFFF:
        raise ProtocolError(f"round {msg.round} outside 1..2^32-1")
    if not 0 <= msg.node_id <= 0xFFFF:
        raise ProtocolError(f"node_id {msg.node_id} does not fit in 16 bits")
    count = msg.gradient.shape[0]
    if count > MAX_COUNT:
        raise ProtocolError("gradient too long for a u32 count")
    if not np.all(np.isfinite(msg.gradient)):
        raise NumericError(f"node {msg.node_id} round {msg.round}: gradient contains NaN/Inf")
    body = _HEADER.pack(MAGIC, VERSION, MSG_GRADIENT, msg.round, msg.node_id, count)
    body += msg.gradient.astype("<f8", copy=False).tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def crc_ok(frame: bytes) -> bool:
    """Whether the trailing CRC matches the rest of the frame."""
    if len(frame) < _CRC.size:
        return False
    return zlib.crc32(frame[:-_CRC.size]) == _CRC.unpack_from(frame, len(frame) - _CRC.size)[0]


def decode_message(frame: bytes) -> RoundMessage:
    frame = bytes(frame)
    head = frame[:len(MAGIC)]
    if head != MAGIC[:len(head)]:
        raise ForeignProtocolError(f"bad magic {head!r}")
    if len(frame) < _HEADER.size:
        raise IncompleteFrameError(f"{len(frame)} bytes, header needs {_HEADER.size}")
    _, version, mtype, rnd, node, count = _HEADER.unpack_from(frame)
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version:#04x}")
    if mtype != MSG_GRADIENT:
        raise CorruptFrameError(f"unknown message type {mtype:#04x}")
    need = _HEADER.size + 8 * count + _CRC.size
    if len(frame) < need:
        raise IncompleteFrameError(f"{len(frame)} bytes, frame needs {need}")
    if len(frame) > need:
        raise CorruptFrameError(f"{len(frame) - need} trailing bytes")
    if not crc_ok(frame):
        raise CorruptFrameError("CRC mismatch")
    if rnd == 0:
        raise CorruptFrameError("round 0 is not valid")
    grad = np.frombuffer(frame, dtype="<f8", count=count, offset=_HEADER.size).astype(float)
    return RoundMessage(rnd, node, grad)


# --------------------------------------------------------------------------
# Buffering
# --------------------------------------------------------------------------


@dataclass
class SessionConfig:
    n_nodes: int
    node_id: int
    gradient_length: int | None = None
    timeout: float = 30.0
    peers: dict[int, tuple[str, int]] = field(default_factory=dict)

    @property
    def peer_ids(self) -> list[int]:
        return [i for i in range(1, self.n_nodes + 1) if i != self.node_id]


class _Inbox:
    """Messages keyed by round, then sender. Thread-safe."""

    def __init__(self, session: SessionConfig):
        self.session = session
        self._cond = threading.Condition()
        self._rounds: dict[int, dict[int, RoundMessage]] = {}
        self._done: set[int] = set()
        self._error: Exception | None = None

    def put(self, msg: RoundMessage):
        s = self.session
        with self._cond:
            if msg.node_id not in s.peer_ids:
                err = ProtocolError(f"message from unexpected node {msg.node_id}")
            elif s.gradient_length is not None and msg.gradient.shape[0] != s.gradient_length:
                err = ProtocolError(
                    f"node {msg.node_id} sent {msg.gradient.shape[0]} values, expected {s.gradient_length}"
                )
            elif msg.round in self._done or msg.node_id in self._rounds.get(msg.round, {}):
                err = ProtocolError(f"duplicate message for round {msg.round} from node {msg.node_id}")
            else:
                self._rounds.setdefault(msg.round, {})[msg.node_id] = msg
                self._cond.notify_all()
                return
            if self._error is None:
                self._error = err
            self._cond.notify_all()
        raise err

    def fail(self, exc: Exception):
        with self._cond:
            if self._error is None:
                self._error = exc
            self._cond.notify_all()

    def take(self, round_: int, timeout: float) -> list[RoundMessage]:
        expected = set(self.session.peer_ids)
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if self._error is not None:
                    raise self._error
                got = self._rounds.get(round_, {})
                if expected <= got.keys():
                    self._rounds.pop(round_, None)
                    self._done.add(round_)
                    return [got[i] for i in sorted(expected)]
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TransportTimeout(round_, expected - got.keys())
                self._cond.wait(left)


# --------------------------------------------------------------------------
# In-process bus
# --------------------------------------------------------------------------


class InProcessBus:
    """Shared mailbox set for L endpoints living in one process."""

    def __init__(self, n_nodes: int, gradient_length: int | None = None, timeout: float = 30.0):
        self.n_nodes = n_nodes
        self._inboxes = {
            i: _Inbox(SessionConfig(n_nodes, i, gradient_length, timeout)) for i in range(1, n_nodes + 1)
        }
        self.endpoints = [BusEndpoint(self, i) for i in range(1, n_nodes + 1)]

    def deliver(self, msg: RoundMessage, frame: bytes):
        for node, inbox in self._inboxes.items():
            if node != msg.node_id:
                # every delivery goes through the codec so both mechanisms carry identical bits
                inbox.put(decode_message(frame))

    def close(self):
        pass


class BusEndpoint:
    def __init__(self, bus: InProcessBus, node_id: int):
        self.bus = bus
        self.node_id = node_id
        self.session = bus._inboxes[node_id].session

    def broadcast(self, msg: RoundMessage):
        if msg.node_id != self.node_id:
            raise ProtocolError(f"endpoint {self.node_id} cannot send as node {msg.node_id}")
        self.bus.deliver(msg, encode_message(msg))

    def gather(self, round_: int, timeout: float | None = None) -> list[RoundMessage]:
        inbox = self.bus._inboxes[self.node_id]
        return inbox.take(round_, self.session.timeout if timeout is None else timeout)

    def close(self):
        pass


# --------------------------------------------------------------------------
# TCP mesh
# --------------------------------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {text!r}; expected host:port")
    return host, int(port)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf += chunk
    return bytes(buf)


class SocketEndpoint:
    """One node of a full TCP mesh.

    Outbound: one connection per peer, used for sending. Inbound: one reader
    thread per accepted connection feeding the shared inbox.
    """

    def __init__(self, session: SessionConfig, listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.session = session
        self.node_id = session.node_id
        self._inbox = _Inbox(session)
        self._server = socket.create_server(listen, reuse_port=False)
        self._server.settimeout(0.2)
        self.address = self._server.getsockname()[:2]
        self._out: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._inbound: list[socket.socket] = []
        self._closed = threading.Event()
        self._threads = [threading.Thread(target=self._accept_loop, daemon=True,
                                          name=f"accept-{self.node_id}")]
        self._threads[0].start()

    def connect(self, timeout: float | None = None):
        """Open outbound connections to every peer, retrying until ``timeout``."""
        timeout = self.session.timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        for peer in self.session.peer_ids:
            if peer in self._out:
                continue
            if peer not in self.session.peers:
                raise ProtocolError(f"no address configured for node {peer}")
            addr = self.session.peers[peer]
            while True:
                try:
                    s = socket.create_connection(addr, timeout=max(0.1, deadline - time.monotonic()))
                    break
                except OSError:
                    if time.monotonic() >= deadline:
                        raise TransportTimeout(0, [peer]) from None
                    time.sleep(0.05)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(None)
            self._out[peer] = s
            self._send_locks[peer] = threading.Lock()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            self._inbound.append(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                                 name=f"reader-{self.node_id}")
            self._threads.append(t)
            t.start()

    def _read_loop(self, conn):
        try:
            while not self._closed.is_set():
                head = _recv_exact(conn, _LEN.size)
                if head is None:
                    return
                if len(head) < _LEN.size:
                    raise IncompleteFrameError("stream closed inside a length prefix")
                (n,) = _LEN.unpack(head)
                frame = _recv_exact(conn, n)
                if frame is None or len(frame) < n:
                    raise IncompleteFrameError("stream closed inside a frame")
                self._inbox.put(decode_message(frame))
        except ProtocolError as exc:
            self._inbox.fail(exc)
        except OSError as exc:
            if not self._closed.is_set():
                log.debug("node %d: inbound connection error: %s", self.node_id, exc)
        finally:
            conn.close()

    def broadcast(self, msg: RoundMessage):
        if msg.node_id != self.node_id:
            raise ProtocolError(f"endpoint {self.node_id} cannot send as node {msg.node_id}")
        frame = encode_message(msg)
        data = _LEN.pack(len(frame)) + frame
        for peer in self.session.peer_ids:
            if peer not in self._out:
                raise ProtocolError(f"not connected to node {peer}")
            with self._send_locks[peer]:
                self._out[peer].sendall(data)

    def gather(self, round_: int, timeout: float | None = None) -> list[RoundMessage]:
        return self._inbox.take(round_, self.session.timeout if timeout is None else timeout)

    def close(self):
        self._closed.set()
        for s in [*self._out.values(), *self._inbound]:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for s in self._out.values():
            s.close()
        self._server.close()
        for t in self._threads:
            t.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def loopback_mesh(n_nodes: int, gradient_length: int | None = None, timeout: float = 30.0,
                  host: str = "127.0.0.1") -> list[SocketEndpoint]:
    """L connected socket endpoints on ephemeral loopback ports."""
    eps = [SocketEndpoint(SessionConfig(n_nodes, i, gradient_length, timeout), (host, 0))
           for i in range(1, n_nodes + 1)]
    addrs = {ep.node_id: ep.address for ep in eps}
    try:
        for ep in eps:
            ep.session.peers = {k: v for k, v in addrs.items() if k != ep.node_id}
            ep.connect()
    except Exception:
        for ep in eps:
            ep.close()
        raise
    return eps
