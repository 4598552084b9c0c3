"""Bit-exact message frames and two carriers: an in-process loopback bus and TCP sockets.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     total length of the body that follows (u32)
    4       2     magic  b"PC" (0x50 0x43)
    6       1     version (0x01)
    7       1     variant (u8, see Variant)
    8       8     session (u64)
    16      4     layer (u32)
    20      4     expert (u32)
    24      4     token_count (u32)
    28      4     dim (u32)
    32      8*token_count*dim   payload, row-major float64

Control variants carry no payload and set token_count = dim = 0.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

MAGIC = b"PC"
VERSION = 1
HEADER = struct.Struct("<2sBBQIIII")
PREFIX = struct.Struct("<I")
HEADER_SIZE = HEADER.size  # 28
MAX_BODY = 1 << 30


class Variant(enum.IntEnum):
    EXPERT_FORWARD_REQUEST = 1
    EXPERT_FORWARD_RESPONSE = 2
    EXPERT_BACKWARD_GRAD = 3
    BACKWARD_ACK = 4
    TURN_GRANT = 5
    TURN_DONE = 6

    @property
    def has_payload(self) -> bool:
        return self <= Variant.BACKWARD_ACK


class FrameError(ValueError):
    """Base class for encode/decode failures."""


class MagicError(FrameError):
    pass


class VersionError(FrameError):
    pass


class VariantError(FrameError):
    pass


class LengthError(FrameError):
    pass


class PayloadError(FrameError):
    pass


class TransportError(ConnectionError):
    """A carrier failed to deliver or receive within its timeout."""


class RecvTimeout(TransportError):
    """Nothing arrived within the receive timeout."""


@dataclass(eq=False)
class Message:
    variant: Variant
    session: int
    layer: int = 0
    expert: int = 0
    payload: np.ndarray | None = None

    @property
    def tokens(self) -> int:
        return 0 if self.payload is None else self.payload.shape[0]

    @property
    def dim(self) -> int:
        return 0 if self.payload is None else self.payload.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        if (self.variant, self.session, self.layer, self.expert) != (
            other.variant,
            other.session,
            other.layer,
            other.expert,
        ):
            return False
        if self.payload is None or other.payload is None:
            return self.payload is None and other.payload is None
        return self.payload.shape == other.payload.shape and self.payload.tobytes() == other.payload.tobytes()

    def __repr__(self) -> str:
        shape = None if self.payload is None else self.payload.shape
        return f"Message({self.variant.name}, session={self.session}, layer={self.layer}, expert={self.expert}, payload={shape})"


def encode_frame(msg: Message, d_model: int | None = None) -> bytes:
    """Serialize ``msg`` including its 4-byte length prefix.

    With ``d_model`` given, payload rows must have exactly that width.
    """
    variant = Variant(msg.variant)
    if not 0 <= msg.session < 1 << 64 or not 0 <= msg.layer < 1 << 32 or not 0 <= msg.expert < 1 << 32:
        raise FrameError(f"header field out of range in {msg!r}")
    if variant.has_payload:
        p = msg.payload
        if p is None or p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
            raise PayloadError(f"{variant.name} needs a non-empty [tokens x dim] payload")
        if d_model is not None and p.shape[1] != d_model:
            raise PayloadError(f"payload width {p.shape[1]} != d_model {d_model}")
        if not np.all(np.isfinite(p)):
            raise PayloadError("payload contains non-finite values")
        body = np.ascontiguousarray(p, dtype="<f8").tobytes()
        tokens, dim = p.shape
    else:
        if msg.payload is not None:
            raise PayloadError(f"{variant.name} carries no payload")
        body, tokens, dim = b"", 0, 0
    header = HEADER.pack(MAGIC, VERSION, int(variant), msg.session, msg.layer, msg.expert, tokens, dim)
    return PREFIX.pack(HEADER_SIZE + len(body)) + header + body


def decode_frame(data: bytes) -> Message:
    """Parse one length-prefixed frame. Raises a :class:`FrameError` subclass on any defect."""
    if len(data) < PREFIX.size:
        raise LengthError("frame shorter than its length prefix")
    (declared,) = PREFIX.unpack_from(data, 0)
    if declared != len(data) - PREFIX.size:
        raise LengthError(f"declared length {declared} != actual {len(data) - PREFIX.size}")
    if declared < HEADER_SIZE:
        raise LengthError(f"body of {declared} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, variant, session, layer, expert, tokens, dim = HEADER.unpack_from(data, PREFIX.size)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    try:
        var = Variant(variant)
    except ValueError:
        raise VariantError(f"unknown variant {variant}") from None
    if tokens * dim * 8 != declared - HEADER_SIZE:
        raise LengthError(f"payload of {tokens}x{dim} floats does not match {declared - HEADER_SIZE} bytes")
    if not var.has_payload:
        if tokens or dim:
            raise PayloadError(f"{var.name} must not carry a payload")
        return Message(var, session, layer, expert)
    if tokens == 0 or dim == 0:
        raise PayloadError(f"{var.name} needs a non-empty payload")
    start = PREFIX.size + HEADER_SIZE
    payload = np.frombuffer(data, dtype="<f8", count=tokens * dim, offset=start).astype(np.float64).reshape(tokens, dim)
    if not np.all(np.isfinite(payload)):
        raise PayloadError("payload contains non-finite values")
    return Message(var, session, layer, expert, payload)


# --- carriers ---------------------------------------------------------------


class Endpoint:
    """One party's attachment to a carrier. FIFO per ordered pair of parties."""

    def __init__(self, party: int, timeout: float) -> None:
        self.party = party
        self.timeout = timeout
        self._inbox: queue.Queue[tuple[int, bytes | None]] = queue.Queue()

    def send(self, dest: int, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        try:
            src, frame = self._inbox.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise RecvTimeout(f"party {self.party}: receive timed out") from None
        if frame is None:
            raise TransportError(f"party {self.party}: peer {src} disconnected")
        return src, frame

    def pending(self) -> bool:
        return not self._inbox.empty()

    def close(self) -> None:
        raise NotImplementedError


class LoopbackEndpoint(Endpoint):
    def __init__(self, bus: "LoopbackBus", party: int, timeout: float) -> None:
        super().__init__(party, timeout)
        self.bus = bus
        self.closed = False

    def send(self, dest: int, frame: bytes) -> None:
        if self.closed:
            raise TransportError(f"party {self.party}: endpoint closed")
        peer = self.bus.endpoints[dest]
        if peer.closed:
            raise TransportError(f"party {self.party}: peer {dest} disconnected")
        peer._inbox.put((self.party, bytes(frame)))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for peer in self.bus.endpoints:
            if peer is not self and not peer.closed:
                peer._inbox.put((self.party, None))


class LoopbackBus:
    def __init__(self, n: int, timeout: float = 5.0) -> None:
        self.endpoints = [LoopbackEndpoint(self, i, timeout) for i in range(n)]


def loopback_bus(n: int, timeout: float = 5.0) -> list[LoopbackEndpoint]:
    return LoopbackBus(n, timeout).endpoints


def _recv_exact(sock: socket.socket, size: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


class SocketEndpoint(Endpoint):
    """TCP carrier endpoint: one full-duplex stream per peer, a reader thread per stream."""

    def __init__(self, party: int, timeout: float) -> None:
        super().__init__(party, timeout)
        self.peers: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._threads: list[threading.Thread] = []
        self.closed = False

    def attach(self, peer: int, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self.peers[peer] = sock
        self._locks[peer] = threading.Lock()
        t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
        t.start()
        self._threads.append(t)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                prefix = _recv_exact(sock, PREFIX.size)
                if prefix is None:
                    break
                (length,) = PREFIX.unpack(prefix)
                if length > MAX_BODY:
                    break
                body = _recv_exact(sock, length)
                if body is None:
                    break
                self._inbox.put((peer, prefix + body))
        except OSError:
            pass
        self._inbox.put((peer, None))

    def send(self, dest: int, frame: bytes) -> None:
        if self.closed:
            raise TransportError(f"party {self.party}: endpoint closed")
        if dest == self.party:
            self._inbox.put((dest, bytes(frame)))
            return
        try:
            with self._locks[dest]:
                self.peers[dest].sendall(frame)
        except (OSError, KeyError) as exc:
            raise TransportError(f"party {self.party}: send to {dest} failed: {exc}") from exc

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for sock in self.peers.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def socket_carrier(addresses: list[tuple[str, int]], timeout: float = 5.0) -> list[SocketEndpoint]:
    """Listen on every address and connect all pairs; port 0 picks a free port.

    Party ``j`` dials party ``i`` for every ``i < j`` and announces itself
    with a 4-byte id.
    """
    if len(set(addresses)) != len(addresses) and not all(port == 0 for _, port in addresses):
        raise ValueError("addresses must be unique")
    listeners = []
    try:
        for host, port in addresses:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, port))
            srv.listen(len(addresses))
            srv.settimeout(timeout)
            listeners.append(srv)
        endpoints = [SocketEndpoint(i, timeout) for i in range(len(addresses))]
        for j in range(len(addresses)):
            for i in range(j):
                try:
                    client = socket.create_connection(listeners[i].getsockname(), timeout=timeout)
                    client.sendall(PREFIX.pack(j))
                    server_side, _ = listeners[i].accept()
                    server_side.settimeout(timeout)
                    hello = _recv_exact(server_side, PREFIX.size)
                except OSError as exc:
                    raise TransportError(f"connect {j} -> {i} failed: {exc}") from exc
                if hello is None or PREFIX.unpack(hello)[0] != j:
                    raise TransportError(f"bad handshake from party {j}")
                endpoints[j].attach(i, client)
                endpoints[i].attach(j, server_side)
        return endpoints
    finally:
        for srv in listeners:
            srv.close()
