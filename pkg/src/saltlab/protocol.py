"""Split-learning wire protocol and client/server sessions.

Frame layout (little-endian)::

    b"SALT" | u8 version=1 | u8 msg_type | u32 payload_len | payload

Tensors travel as ``u8 dtype | u8 ndim | ndim x u32 dims | values``.
A session is strictly lock-step: every FEATURES frame is answered before
the client may send the next one.

Session flow after the HELLO/CONFIG_ACK handshake::

    EPOCH_END(e, phase)   announces that the following FEATURES frames
                          belong to epoch ``e`` of ``phase`` (train/validate)
    FEATURES              train phase   -> GRADIENTS, METRICS
                          validate phase -> METRICS
    SHUTDOWN              either side, ends the session
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import tensor as T
from .channel import ChannelSpec, apply_channel
from .errors import FramingError, ProtocolError, SessionError
from .metrics import predict
from .rng import RngStream
from .split import SplitModel, forward_tail

log = logging.getLogger(__name__)

MAGIC = b"SALT"
VERSION = 1
HEADER = struct.Struct("<4sBBI")

TRAIN_PHASE = 0
VALIDATE_PHASE = 1


class MessageType(IntEnum):
    HELLO = 0x01
    CONFIG_ACK = 0x02
    FEATURES = 0x03
    GRADIENTS = 0x04
    METRICS = 0x05
    EPOCH_END = 0x06
    SHUTDOWN = 0x07


CLIENT_TO_SERVER = {MessageType.HELLO, MessageType.FEATURES, MessageType.EPOCH_END, MessageType.SHUTDOWN}
SERVER_TO_CLIENT = {MessageType.CONFIG_ACK, MessageType.GRADIENTS, MessageType.METRICS, MessageType.SHUTDOWN}


# --------------------------------------------------------------------------
# tensor codec
# --------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0x01, np.dtype(np.float64): 0x02}
_CODE_DTYPES = {0x01: np.dtype("<f4"), 0x02: np.dtype("<f8")}


def encode_tensor(t) -> bytes:
    data = t.data if isinstance(t, T.Tensor) else np.asarray(t)
    if data.dtype not in _DTYPE_CODES:
        raise ProtocolError(f"cannot encode dtype {data.dtype}")
    if not 1 <= data.ndim <= 255:
        raise ProtocolError(f"tensor rank {data.ndim} outside 1..255")
    if any(d >= 2 ** 32 for d in data.shape):
        raise ProtocolError("tensor dimension does not fit in u32")
    wire = _CODE_DTYPES[_DTYPE_CODES[data.dtype]]
    return (struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim)
            + struct.pack(f"<{data.ndim}I", *data.shape)
            + np.ascontiguousarray(data, dtype=wire).tobytes())


def decode_tensor_from(buf, offset: int = 0) -> tuple[T.Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it with the next offset."""
    buf = memoryview(buf)
    if len(buf) < offset + 2:
        raise FramingError("tensor header truncated")
    code, ndim = struct.unpack_from("<BB", buf, offset)
    if code not in _CODE_DTYPES:
        raise ProtocolError(f"unknown tensor dtype code 0x{code:02x}")
    if ndim == 0:
        raise ProtocolError("tensors need at least one dimension")
    offset += 2
    if len(buf) < offset + 4 * ndim:
        raise FramingError("tensor dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise FramingError("tensor values truncated")
    values = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(dims)
    return T.Tensor(values.astype(dtype.newbyteorder("="))), offset + nbytes


def decode_tensor(buf) -> T.Tensor:
    t, end = decode_tensor_from(buf)
    if end != len(buf):
        raise FramingError(f"{len(buf) - end} trailing bytes after tensor")
    return t


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

def encode_frame(msg_type: MessageType, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload)) + payload


def _check_header(magic: bytes, version: int, msg_type: int) -> MessageType:
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        return MessageType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}") from None


def decode_frame(buf: bytes) -> tuple[MessageType, bytes]:
    """Decode exactly one frame occupying all of ``buf``."""
    if len(buf) < HEADER.size:
        raise FramingError("frame header truncated")
    magic, version, msg_type, length = HEADER.unpack_from(buf)
    kind = _check_header(magic, version, msg_type)
    if len(buf) != HEADER.size + length:
        raise FramingError(f"frame declares {length} payload bytes, buffer holds {len(buf) - HEADER.size}")
    return kind, bytes(buf[HEADER.size:])


class FrameDecoder:
    """Incremental parser: feed arbitrary chunks, collect complete frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[tuple[MessageType, bytes]]:
        self._buf += chunk
        frames = []
        while len(self._buf) >= HEADER.size:
            magic, version, msg_type, length = HEADER.unpack_from(self._buf)
            kind = _check_header(magic, version, msg_type)
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            frames.append((kind, bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# --------------------------------------------------------------------------
# payloads
# --------------------------------------------------------------------------

def encode_features(z, labels) -> bytes:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return (encode_tensor(z) + struct.pack("<I", labels.size)
            + labels.astype("<u4").tobytes())


def decode_features(payload: bytes) -> tuple[T.Tensor, np.ndarray]:
    z, offset = decode_tensor_from(payload)
    if len(payload) < offset + 4:
        raise FramingError("label count truncated")
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    if len(payload) != offset + 4 * count:
        raise FramingError("label block length mismatch")
    labels = np.frombuffer(payload, dtype="<u4", count=count, offset=offset).astype(np.int64)
    if count != z.shape[0]:
        raise ProtocolError(f"{count} labels for a feature batch of {z.shape[0]}")
    return z, labels


@dataclass(frozen=True)
class BatchMetrics:
    loss: float
    correct: int
    total: int


def encode_metrics(m: BatchMetrics) -> bytes:
    return struct.pack("<fII", m.loss, m.correct, m.total)


def decode_metrics(payload: bytes) -> BatchMetrics:
    if len(payload) != 12:
        raise FramingError("METRICS payload must be 12 bytes")
    loss, correct, total = struct.unpack("<fII", payload)
    return BatchMetrics(loss, correct, total)


def encode_epoch_end(epoch: int, phase: int) -> bytes:
    return struct.pack("<IB", epoch, phase)


def decode_epoch_end(payload: bytes) -> tuple[int, int]:
    if len(payload) != 5:
        raise FramingError("EPOCH_END payload must be 5 bytes")
    epoch, phase = struct.unpack("<IB", payload)
    if phase not in (TRAIN_PHASE, VALIDATE_PHASE):
        raise ProtocolError(f"unknown phase {phase}")
    return epoch, phase


@dataclass
class SessionConfig:
    """Parameters both peers must agree on before the first batch."""

    split_point: str
    latent_shape: tuple[int, ...]
    batch_size: int
    seed: int
    forward_channel: ChannelSpec = field(default_factory=ChannelSpec.identity)
    dtype: str = "f32"

    def to_json(self) -> bytes:
        return json.dumps({
            "version": VERSION, "split_point": self.split_point,
            "latent_shape": list(self.latent_shape), "batch_size": self.batch_size,
            "seed": self.seed, "forward_channel": self.forward_channel.to_dict(),
            "dtype": self.dtype,
        }, sort_keys=True).encode("utf-8")

    @classmethod
    def from_json(cls, payload: bytes) -> SessionConfig:
        try:
            d = json.loads(payload.decode("utf-8"))
            return cls(d["split_point"], tuple(int(v) for v in d["latent_shape"]), int(d["batch_size"]),
                       int(d["seed"]), ChannelSpec.from_dict(d.get("forward_channel")), d.get("dtype", "f32"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed HELLO: {exc}") from exc


# --------------------------------------------------------------------------
# transports
# --------------------------------------------------------------------------

class SocketTransport:
    """Frames over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._decoder = FrameDecoder()
        self._ready: list[tuple[MessageType, bytes]] = []
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 60.0) -> SocketTransport:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, msg_type: MessageType, payload: bytes = b"") -> None:
        self.sock.sendall(encode_frame(msg_type, payload))

    def recv(self) -> tuple[MessageType, bytes]:
        while not self._ready:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


class LoopbackTransport:
    """In-process transport; frames are fully encoded and decoded like on a socket."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = 60.0):
        self._inbox, self._outbox = inbox, outbox
        self._decoder = FrameDecoder()
        self._ready: list[tuple[MessageType, bytes]] = []
        self.timeout = timeout
        self.sent: list[bytes] = []

    def send(self, msg_type: MessageType, payload: bytes = b"") -> None:
        frame = encode_frame(msg_type, payload)
        self.sent.append(frame)
        self._outbox.put(frame)

    def recv(self) -> tuple[MessageType, bytes]:
        while not self._ready:
            try:
                chunk = self._inbox.get(timeout=self.timeout)
            except queue.Empty:
                raise ConnectionError("loopback receive timed out") from None
            if chunk is None:
                raise ConnectionError("peer closed the loopback")
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        self._outbox.put(None)


def loopback_pair() -> tuple[LoopbackTransport, LoopbackTransport]:
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return LoopbackTransport(b_to_a, a_to_b), LoopbackTransport(a_to_b, b_to_a)


# --------------------------------------------------------------------------
# server side
# --------------------------------------------------------------------------

def channel_stream(seed: int, phase: int, epoch: int, batch: int) -> RngStream:
    """Forward-channel stream pinned to one batch, shared by local and networked engines."""
    return RngStream(seed).fork("channel").fork("validate" if phase else "train").fork(epoch).fork(batch)


class ServerRuntime:
    """Tail-side computation for one session: channel, frozen tail, loss, feature gradient."""

    def __init__(self, model: SplitModel, config: SessionConfig):
        self.model = model
        self.config = config
        self.epoch = 0
        self.phase = VALIDATE_PHASE
        self.batch = 0

    def begin_phase(self, epoch: int, phase: int) -> None:
        self.epoch, self.phase, self.batch = epoch, phase, 0

    def handle(self, z, labels) -> tuple[np.ndarray | None, BatchMetrics]:
        z = T.as_tensor(z)
        labels = np.asarray(labels, dtype=np.int64)
        if z.shape[1:] != tuple(self.config.latent_shape):
            raise ProtocolError(f"feature shape {z.shape[1:]} differs from agreed {self.config.latent_shape}")
        if labels.shape[0] != z.shape[0]:
            raise ProtocolError(f"{labels.shape[0]} labels for a feature batch of {z.shape[0]}")
        rng = channel_stream(self.config.seed, self.phase, self.epoch, self.batch)
        self.batch += 1
        received = apply_channel(self.config.forward_channel, z.data, rng)
        if self.phase == VALIDATE_PHASE:
            with T.no_grad():
                logits = forward_tail(self.model, received)
                loss = T.softmax_cross_entropy(logits, labels)
            delta = None
        else:
            leaf = T.Tensor(received, requires_grad=True)
            logits = forward_tail(self.model, leaf)
            loss = T.softmax_cross_entropy(logits, labels)
            self.model.tail.zero_grad()
            loss.backward()
            delta = leaf.grad
        correct = int(np.count_nonzero(predict(logits.data) == labels))
        return delta, BatchMetrics(float(np.float32(loss.item())), correct, int(labels.shape[0]))


class ServerSession:
    """Serve one connection until SHUTDOWN or disconnect."""

    def __init__(self, model: SplitModel, transport):
        self.model = model
        self.transport = transport
        self.runtime: ServerRuntime | None = None
        self.batches_served = 0

    def handshake(self) -> bool:
        kind, payload = self.transport.recv()
        if kind != MessageType.HELLO:
            raise ProtocolError(f"expected HELLO, got {kind.name}")
        config = SessionConfig.from_json(payload)
        problem = None
        if config.split_point != self.model.split_point:
            problem = f"server is split at {self.model.split_point}, client asked for {config.split_point}"
        elif tuple(config.latent_shape) != self.model.latent_shape:
            problem = f"latent shape {config.latent_shape} != server {self.model.latent_shape}"
        elif config.dtype != "f32":
            problem = f"unsupported dtype {config.dtype}"
        if problem:
            self.transport.send(MessageType.CONFIG_ACK, b"\x01" + problem.encode("utf-8"))
            return False
        self.runtime = ServerRuntime(self.model, config)
        self.transport.send(MessageType.CONFIG_ACK, b"\x00")
        return True

    def serve(self) -> None:
        try:
            if not self.handshake():
                return
            while True:
                kind, payload = self.transport.recv()
                if kind == MessageType.SHUTDOWN:
                    return
                if kind not in CLIENT_TO_SERVER or kind == MessageType.HELLO:
                    raise ProtocolError(f"unexpected {kind.name} from client")
                if kind == MessageType.EPOCH_END:
                    self.runtime.begin_phase(*decode_epoch_end(payload))
                    continue
                z, labels = decode_features(payload)
                delta, metrics = self.runtime.handle(z, labels)
                if delta is not None:
                    self.transport.send(MessageType.GRADIENTS, encode_tensor(delta))
                self.transport.send(MessageType.METRICS, encode_metrics(metrics))
                self.batches_served += 1
        except ConnectionError:
            log.info("client disconnected after %d batches", self.batches_served)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        transport = SocketTransport(self.request)
        try:
            ServerSession(self.server.model, transport).serve()
        except ProtocolError as exc:
            log.warning("session aborted: %s", exc)
            try:
                transport.send(MessageType.SHUTDOWN, str(exc).encode("utf-8"))
            except OSError:
                pass


class SplitServer(socketserver.ThreadingTCPServer):
    """TCP server hosting independent sessions, one thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: SplitModel, host: str = "127.0.0.1", port: int = 0):
        self.model = model
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


# --------------------------------------------------------------------------
# client side
# --------------------------------------------------------------------------

class LocalServer:
    """In-process stand-in for a remote server; same calls, no encoding."""

    def __init__(self, model: SplitModel, config: SessionConfig):
        self.runtime = ServerRuntime(model, config)
        self.config = config

    def begin_phase(self, epoch: int, phase: int) -> None:
        self.runtime.begin_phase(epoch, phase)

    def exchange(self, z, labels) -> tuple[np.ndarray | None, BatchMetrics]:
        return self.runtime.handle(z, labels)

    def close(self) -> None:
        pass


class ClientSession:
    """Client end of a networked session, exposing the same calls as :class:`LocalServer`."""

    def __init__(self, transport, config: SessionConfig):
        self.transport = transport
        self.config = config
        self.phase = VALIDATE_PHASE
        self.batch = 0
        self._handshake()

    def _recv(self) -> tuple[MessageType, bytes]:
        try:
            kind, payload = self.transport.recv()
        except (ConnectionError, OSError) as exc:
            raise SessionError(f"transport closed: {exc}", self.batch) from exc
        if kind == MessageType.SHUTDOWN:
            raise SessionError(f"server shut down the session {payload.decode('utf-8', 'replace')}".strip(),
                               self.batch)
        if kind not in SERVER_TO_CLIENT:
            raise ProtocolError(f"unexpected {kind.name} from server")
        return kind, payload

    def _handshake(self) -> None:
        self.transport.send(MessageType.HELLO, self.config.to_json())
        kind, payload = self._recv()
        if kind != MessageType.CONFIG_ACK or not payload:
            raise ProtocolError("expected CONFIG_ACK")
        if payload[0] != 0:
            raise ProtocolError(f"server rejected config: {payload[1:].decode('utf-8', 'replace')}")

    def begin_phase(self, epoch: int, phase: int) -> None:
        self.phase, self.batch = phase, 0
        self.transport.send(MessageType.EPOCH_END, encode_epoch_end(epoch, phase))

    def exchange(self, z, labels) -> tuple[np.ndarray | None, BatchMetrics]:
        z = T.as_tensor(z)
        if z.shape[1:] != tuple(self.config.latent_shape):
            raise ProtocolError(f"feature shape {z.shape[1:]} differs from agreed {self.config.latent_shape}")
        try:
            self.transport.send(MessageType.FEATURES, encode_features(z, labels))
        except OSError as exc:
            raise SessionError(f"transport closed: {exc}", self.batch) from exc
        delta = None
        if self.phase == TRAIN_PHASE:
            kind, payload = self._recv()
            if kind != MessageType.GRADIENTS:
                raise ProtocolError(f"expected GRADIENTS, got {kind.name}")
            delta = decode_tensor(payload).data
            if delta.shape != z.shape:
                raise ProtocolError(f"gradient shape {delta.shape} != feature shape {z.shape}")
        kind, payload = self._recv()
        if kind != MessageType.METRICS:
            raise ProtocolError(f"expected METRICS, got {kind.name}")
        self.batch += 1
        return delta, decode_metrics(payload)

    def close(self) -> None:
        try:
            self.transport.send(MessageType.SHUTDOWN)
        except OSError:
            pass
        self.transport.close()


def serve_in_thread(model: SplitModel, host: str = "127.0.0.1", port: int = 0) -> tuple[SplitServer, threading.Thread]:
    server = SplitServer(model, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
