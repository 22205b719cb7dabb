"""Wire protocol between learners and the federation controller.

Frame layout (all integers little-endian):

    magic   4 bytes  "FEDR"
    version 1 byte   (currently 1)
    kind    1 byte   message kind
    round   4 bytes  unsigned round number
    learner 2 bytes  unsigned learner index
    length  8 bytes  unsigned payload byte count
    payload
    crc32   4 bytes  CRC32 of every preceding byte

Model parameters travel as a segment list: u16 segment count, then per
segment a u16 name length, the UTF-8 name, a u64 element count, and the
elements as little-endian IEEE-754 doubles.

The same codec backs the in-process queue transport and the TCP transport,
so both produce byte-identical frames for identical envelopes. Each session
counts frames per kind and, separately, frames that carry a model payload.
"""

from __future__ import annotations

import queue
import socket
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from fedorch.models import ParameterVector

MAGIC = b"FEDR"
VERSION = 1
HEADER = struct.Struct("<4sBBIHQ")  # magic, version, kind, round, learner, length
CRC = struct.Struct("<I")
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024


class MessageKind(IntEnum):
    REGISTER = 1
    ASSIGN = 2
    UPDATE = 3
    COMMUNITY = 4
    SHUTDOWN = 5
    ERROR = 6


class FrameError(Exception):
    """Base class for wire-format violations."""


class BadMagicError(FrameError):
    pass


class UnsupportedVersionError(FrameError):
    pass


class OversizeFrameError(FrameError):
    pass


class CrcMismatchError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class TrailingDataError(FrameError):
    pass


class UnknownKindError(FrameError):
    pass


class TransportClosedError(ConnectionError):
    """Peer went away or the channel was shut down."""


@dataclass(frozen=True)
class Envelope:
    kind: MessageKind
    round_num: int = 0
    learner_index: int = 0
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self) -> None:
        if not 0 <= self.round_num < 2**32:
            raise ValueError("round_num must fit in 32 bits")
        if not 0 <= self.learner_index < 2**16:
            raise ValueError("learner_index must fit in 16 bits")


def encode(envelope: Envelope, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(envelope.payload) > max_payload:
        raise OversizeFrameError(
            f"payload of {len(envelope.payload)} bytes exceeds limit {max_payload}"
        )
    head = HEADER.pack(
        MAGIC,
        envelope.version,
        int(envelope.kind),
        envelope.round_num,
        envelope.learner_index,
        len(envelope.payload),
    )
    body = head + envelope.payload
    return body + CRC.pack(zlib.crc32(body))


def decode(frame: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Envelope:
    if len(frame) < HEADER.size + CRC.size:
        raise TruncatedFrameError(f"frame of {len(frame)} bytes is shorter than a header")
    magic, version, kind, round_num, learner_index, length = HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if length > max_payload:
        raise OversizeFrameError(f"declared payload of {length} bytes exceeds limit")
    expected = HEADER.size + length + CRC.size
    if len(frame) < expected:
        raise TruncatedFrameError(f"frame has {len(frame)} bytes, header promises {expected}")
    if len(frame) > expected:
        raise TrailingDataError(f"{len(frame) - expected} bytes after frame end")
    (crc,) = CRC.unpack_from(frame, expected - CRC.size)
    if crc != zlib.crc32(frame[: expected - CRC.size]):
        raise CrcMismatchError("checksum mismatch")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise UnknownKindError(f"unknown message kind {kind}") from None
    return Envelope(
        kind=kind,
        round_num=round_num,
        learner_index=learner_index,
        payload=frame[HEADER.size : HEADER.size + length],
    )


# ------------------------------------------------------------ params on wire

_SEG_COUNT = struct.Struct("<H")
_SEG_HEAD = struct.Struct("<H")   # name length
_SEG_ELEMS = struct.Struct("<Q")  # element count


def encode_params(params: ParameterVector | None) -> bytes:
    """Serialize a parameter vector; None encodes as zero segments."""
    if params is None:
        return _SEG_COUNT.pack(0)
    parts = [_SEG_COUNT.pack(len(params.layout))]
    offset = 0
    for name, shape in params.layout:
        raw = name.encode("utf-8")
        size = 1
        for s in shape:
            size *= s
        segment = params.values[offset : offset + size]
        offset += size
        parts.append(_SEG_HEAD.pack(len(raw)))
        parts.append(raw)
        parts.append(_SEG_ELEMS.pack(size))
        parts.append(segment.astype("<f8").tobytes())
    return b"".join(parts)


def decode_params(
    buf: bytes,
    offset: int = 0,
    layout: tuple | None = None,
) -> tuple[ParameterVector | None, int]:
    """Parse a parameter vector starting at `offset`; returns (params, end).

    The wire carries flat segments; pass `layout` to restore the original
    shapes (names and sizes are verified against it).
    """
    (count,) = _SEG_COUNT.unpack_from(buf, offset)
    offset += _SEG_COUNT.size
    if count == 0:
        return None, offset
    names: list[str] = []
    chunks: list[np.ndarray] = []
    for _ in range(count):
        (name_len,) = _SEG_HEAD.unpack_from(buf, offset)
        offset += _SEG_HEAD.size
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (size,) = _SEG_ELEMS.unpack_from(buf, offset)
        offset += _SEG_ELEMS.size
        end = offset + 8 * size
        if end > len(buf):
            raise TruncatedFrameError("parameter payload ends mid-segment")
        chunks.append(np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64))
        names.append(name)
        offset += 8 * size
    values = np.concatenate(chunks)
    if layout is None:
        wire_layout = tuple((n, (c.size,)) for n, c in zip(names, chunks))
        return ParameterVector(values, wire_layout), offset
    expected = [(n, s) for n, s in layout]
    got = [(n, c.size) for n, c in zip(names, chunks)]
    want = [(n, int(np.prod(s, dtype=np.int64))) for n, s in expected]
    if got != want:
        raise ValueError(f"wire segments {got} do not match expected layout {want}")
    return ParameterVector(values, tuple(layout)), offset


def params_carried(kind: MessageKind, payload: bytes) -> bool:
    """True when a frame of this kind carries a nonempty model payload."""
    offsets = {
        MessageKind.ASSIGN: _ASSIGN_HEAD.size,
        MessageKind.UPDATE: _UPDATE_HEAD.size,
        MessageKind.COMMUNITY: 0,
    }
    offset = offsets.get(kind)
    if offset is None or len(payload) < offset + _SEG_COUNT.size:
        return False
    (count,) = _SEG_COUNT.unpack_from(payload, offset)
    return count > 0


# ------------------------------------------------------------- payload kinds

_REGISTER = struct.Struct("<QId")   # num_examples, batch_size, batch_seconds
_ASSIGN_HEAD = struct.Struct("<QdIQ")  # num_batches, learning_rate, batch_size, seed
_UPDATE_HEAD = struct.Struct("<QdQd")  # num_examples, t_batch, batches, busy_s


def encode_register(num_examples: int, batch_size: int, batch_seconds: float) -> bytes:
    return _REGISTER.pack(num_examples, batch_size, batch_seconds)


def decode_register(payload: bytes) -> tuple[int, int, float]:
    return _REGISTER.unpack(payload)


def encode_assign(
    num_batches: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
    params: ParameterVector | None,
) -> bytes:
    head = _ASSIGN_HEAD.pack(num_batches, learning_rate, batch_size, seed)
    return head + encode_params(params)


def decode_assign(payload: bytes, layout=None):
    num_batches, learning_rate, batch_size, seed = _ASSIGN_HEAD.unpack_from(payload)
    params, _ = decode_params(payload, _ASSIGN_HEAD.size, layout)
    return num_batches, learning_rate, batch_size, seed, params


def encode_update(
    num_examples: int,
    observed_batch_time: float,
    batches_executed: int,
    busy_seconds: float,
    params: ParameterVector | None,
) -> bytes:
    head = _UPDATE_HEAD.pack(num_examples, observed_batch_time, batches_executed, busy_seconds)
    return head + encode_params(params)


def decode_update(payload: bytes, layout=None):
    num_examples, t_batch, batches, busy = _UPDATE_HEAD.unpack_from(payload)
    params, _ = decode_params(payload, _UPDATE_HEAD.size, layout)
    return num_examples, t_batch, batches, busy, params


def encode_error(message: str) -> bytes:
    return message.encode("utf-8")


def decode_error(payload: bytes) -> str:
    return payload.decode("utf-8", errors="replace")


# ------------------------------------------------------------------ sessions


@dataclass
class SessionCounters:
    frames_sent: Counter = field(default_factory=Counter)
    frames_received: Counter = field(default_factory=Counter)
    models_sent: int = 0
    models_received: int = 0


class Session:
    """One ordered, framed duplex channel between a learner and controller."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.counters = SessionCounters()
        self.max_payload = max_payload

    def send(self, envelope: Envelope) -> None:
        frame = encode(envelope, self.max_payload)
        self._send_bytes(frame)
        self.counters.frames_sent[envelope.kind] += 1
        if params_carried(envelope.kind, envelope.payload):
            self.counters.models_sent += 1

    def recv(self, timeout: float | None = None) -> Envelope:
        envelope = decode(self._recv_bytes(timeout), self.max_payload)
        self.counters.frames_received[envelope.kind] += 1
        if params_carried(envelope.kind, envelope.payload):
            self.counters.models_received += 1
        return envelope

    def _send_bytes(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class InProcessSession(Session):
    """Queue-backed session; frames still pass through the byte codec."""

    def __init__(self, inbox: "queue.Queue[bytes | None]", outbox: "queue.Queue[bytes | None]"):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise TransportClosedError("session closed")
        self._outbox.put(frame)

    def _recv_bytes(self, timeout: float | None) -> bytes:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        if frame is None:
            raise TransportClosedError("peer closed the channel")
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def make_channel_pair() -> tuple[InProcessSession, InProcessSession]:
    """Two connected in-process sessions (controller side, learner side)."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcessSession(b_to_a, a_to_b), InProcessSession(a_to_b, b_to_a)


class SocketSession(Session):
    """TCP session reading length-delimited frames."""

    def __init__(self, sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD):
        super().__init__(max_payload)
        self._sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_bytes(self, frame: bytes) -> None:
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise TransportClosedError(str(exc)) from exc

    def _recv_bytes(self, timeout: float | None) -> bytes:
        self._sock.settimeout(timeout)
        head = self._recv_exact(HEADER.size)
        *_, length = HEADER.unpack(head)
        if length > self.max_payload:
            raise OversizeFrameError(f"declared payload of {length} bytes exceeds limit")
        return head + self._recv_exact(length + CRC.size)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TimeoutError("no frame within timeout") from None
            except OSError as exc:
                raise TransportClosedError(str(exc)) from exc
            if not chunk:
                raise TransportClosedError("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def listen(host: str, port: int, backlog: int = 16) -> socket.socket:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(backlog)
    return server


def accept(server: socket.socket, timeout: float | None = None) -> SocketSession:
    server.settimeout(timeout)
    sock, _ = server.accept()
    return SocketSession(sock)


def connect(host: str, port: int, timeout: float = 30.0) -> SocketSession:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return SocketSession(sock)
