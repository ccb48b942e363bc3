"""Message transport: the length-prefixed wire protocol and the socket
mesh used by multi-process runs.

Frame layout (little-endian), after a u32 total-length prefix that does
not count itself:

  u8  message type     1 = parcels, 2 = checkpoint control, 3 = stop
  u32 sender queue length (doubles as a control subcode for types 2/3)
  -- types 1 and 2 continue with --
  u32 parcel count
  per parcel: u32 item, u64 version, k x f64 components

Type-3 frames stop after the u32 (5-byte payload).  Control frames may
carry parcels: checkpoint snapshots reuse the parcel layout to ship
factor rows and engine state.
"""
from __future__ import annotations

import socket
import struct
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

MSG_PARCELS = 1
MSG_CONTROL = 2
MSG_STOP = 3

# control subcodes (carried in the sender_queue_len slot of type-2 frames)
CTRL_CKPT_BEGIN = 0
CTRL_CKPT_MARKER = 1
CTRL_SNAP_PARCELS = 2
CTRL_SNAP_WROWS = 3
CTRL_SNAP_STATS = 4
CTRL_RESUME = 5

DEFAULT_BATCH_CAPACITY = 100
DEFAULT_MAX_DELAY = 0.010

_HEAD = struct.Struct("<BI")
_COUNT = struct.Struct("<I")
_PARCEL_HEAD = struct.Struct("<IQ")
_LEN = struct.Struct("<I")
_HELLO = struct.Struct("<II")
_HELLO_ACK = struct.Struct("<I")


class WireFormatError(ValueError):
    """Frame violates the wire protocol (truncation, bad type, bad sizes)."""


class TransportError(RuntimeError):
    """Connection-level failure (handshake rejection, peer disconnect)."""


@dataclass
class ColumnParcel:
    """The nomadic unit: an item index, its current factor row, and the
    count of processing events applied to it so far."""

    item: int
    h: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, ColumnParcel):
            return NotImplemented
        return (
            self.item == other.item
            and self.version == other.version
            and np.array_equal(self.h, other.h)
        )


@dataclass
class ParcelBatch:
    sender_queue_len: int
    parcels: list[ColumnParcel] = field(default_factory=list)
    msg_type: int = MSG_PARCELS


def encode_batch(batch: ParcelBatch, k: int) -> bytes:
    """Serialize a batch; equal batches yield equal bytes."""
    if batch.msg_type not in (MSG_PARCELS, MSG_CONTROL, MSG_STOP):
        raise WireFormatError(f"unknown message type {batch.msg_type}")
    if batch.sender_queue_len < 0 or batch.sender_queue_len > 0xFFFFFFFF:
        raise WireFormatError("sender queue length out of u32 range")
    if batch.msg_type == MSG_STOP:
        payload = _HEAD.pack(MSG_STOP, batch.sender_queue_len)
        return _LEN.pack(len(payload)) + payload
    if len(batch.parcels) > 0xFFFFFFFF:
        raise WireFormatError("parcel count overflows u32")
    if batch.msg_type == MSG_PARCELS and not batch.parcels:
        raise WireFormatError("parcel frames must carry at least one parcel")
    chunks = [
        _HEAD.pack(batch.msg_type, batch.sender_queue_len),
        _COUNT.pack(len(batch.parcels)),
    ]
    for parcel in batch.parcels:
        if parcel.h.shape != (k,):
            raise WireFormatError(
                f"parcel vector length {parcel.h.shape} does not match k={k}"
            )
        if not 0 <= parcel.item <= 0xFFFFFFFF:
            raise WireFormatError(f"item id {parcel.item} out of u32 range")
        if not 0 <= parcel.version <= 0xFFFFFFFFFFFFFFFF:
            raise WireFormatError(f"version {parcel.version} out of u64 range")
        chunks.append(_PARCEL_HEAD.pack(parcel.item, parcel.version))
        chunks.append(parcel.h.astype("<f8", copy=False).tobytes())
    payload = b"".join(chunks)
    return _LEN.pack(len(payload)) + payload


def decode_batch(buf: bytes, k: int) -> ParcelBatch:
    """Inverse of encode_batch; rejects malformed or non-finite frames."""
    if len(buf) < 4:
        raise WireFormatError(f"truncated frame: {len(buf)} bytes")
    (length,) = _LEN.unpack_from(buf, 0)
    if len(buf) != 4 + length:
        raise WireFormatError(
            f"frame length mismatch: declared {length}, found {len(buf) - 4}"
        )
    return decode_payload(buf[4:], k)


def decode_payload(payload: bytes, k: int) -> ParcelBatch:
    """Decode a frame body (the bytes after the length prefix)."""
    if len(payload) < _HEAD.size:
        raise WireFormatError(f"truncated frame body: {len(payload)} bytes")
    msg_type, qlen = _HEAD.unpack_from(payload, 0)
    if msg_type == MSG_STOP:
        if len(payload) != _HEAD.size:
            raise WireFormatError("stop frame carries unexpected payload")
        return ParcelBatch(sender_queue_len=qlen, parcels=[], msg_type=MSG_STOP)
    if msg_type not in (MSG_PARCELS, MSG_CONTROL):
        raise WireFormatError(f"unknown message type {msg_type}")
    if len(payload) < _HEAD.size + _COUNT.size:
        raise WireFormatError("frame too short for a parcel count")
    (count,) = _COUNT.unpack_from(payload, _HEAD.size)
    if msg_type == MSG_PARCELS and count == 0:
        raise WireFormatError("parcel frame with zero parcels")
    parcel_size = _PARCEL_HEAD.size + 8 * k
    expected = _HEAD.size + _COUNT.size + count * parcel_size
    if len(payload) != expected:
        raise WireFormatError(
            f"frame size mismatch for k={k}: expected {expected} body bytes "
            f"({count} parcels), found {len(payload)}"
        )
    parcels = []
    off = _HEAD.size + _COUNT.size
    for _ in range(count):
        item, version = _PARCEL_HEAD.unpack_from(payload, off)
        off += _PARCEL_HEAD.size
        h = np.frombuffer(payload, dtype="<f8", count=k, offset=off).copy()
        off += 8 * k
        if not np.all(np.isfinite(h)):
            raise WireFormatError(f"non-finite component in parcel for item {item}")
        parcels.append(ColumnParcel(item=int(item), h=h, version=int(version)))
    return ParcelBatch(sender_queue_len=qlen, parcels=parcels, msg_type=msg_type)


def flush_policy(
    pending: int,
    elapsed_since_first: float,
    batch_capacity: int = DEFAULT_BATCH_CAPACITY,
    max_delay: float = DEFAULT_MAX_DELAY,
) -> bool:
    """True when a pending outbox should be sent: the batch is full, or
    the oldest pending parcel has waited longer than max_delay."""
    if pending <= 0:
        return False
    return pending >= batch_capacity or elapsed_since_first >= max_delay


def _recv_exact(sock: socket.socket, nbytes: int) -> bytes:
    chunks = []
    remaining = nbytes
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise TransportError("peer closed the connection mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame body from a stream socket."""
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    return _recv_exact(sock, length)


def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


class SocketMesh:
    """All-to-all TCP mesh over a configured host/port list.

    Every rank listens on its own endpoint; rank r initiates connections
    to every lower rank, sending a hello of (rank, k).  The accepting
    side validates k and acknowledges, so a peer built for a different
    latent dimension is rejected during the handshake.
    """

    def __init__(self, rank: int, endpoints: list[tuple[str, int]], k: int):
        if not 0 <= rank < len(endpoints):
            raise ValueError(f"rank {rank} outside endpoint list of {len(endpoints)}")
        self.rank = rank
        self.endpoints = list(endpoints)
        self.k = int(k)
        self.peers: dict[int, socket.socket] = {}
        self._listener: socket.socket | None = None

    @property
    def size(self) -> int:
        return len(self.endpoints)

    def connect(self, timeout: float = 30.0) -> None:
        host, port = self.endpoints[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(self.size)
        self._listener = listener

        deadline = time.monotonic() + timeout
        expected_inbound = {r for r in range(self.rank + 1, self.size)}
        # dial lower ranks, retrying until their listeners are up
        for r in range(self.rank):
            while True:
                try:
                    sock = socket.create_connection(self.endpoints[r], timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"rank {self.rank}: cannot reach rank {r}")
                    time.sleep(0.05)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(_HELLO.pack(self.rank, self.k))
            (status,) = _HELLO_ACK.unpack(_recv_exact(sock, _HELLO_ACK.size))
            if status != 0:
                sock.close()
                raise TransportError(
                    f"rank {r} rejected handshake (status {status}); likely a k mismatch"
                )
            self.peers[r] = sock
        # accept higher ranks
        listener.settimeout(max(0.1, deadline - time.monotonic()))
        while expected_inbound:
            try:
                sock, _ = listener.accept()
            except socket.timeout as exc:
                raise TransportError(
                    f"rank {self.rank}: timed out waiting for {sorted(expected_inbound)}"
                ) from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            peer_rank, peer_k = _HELLO.unpack(_recv_exact(sock, _HELLO.size))
            if peer_k != self.k or peer_rank not in expected_inbound:
                sock.sendall(_HELLO_ACK.pack(1))
                sock.close()
                raise TransportError(
                    f"handshake rejected: peer rank {peer_rank} declared k={peer_k}, "
                    f"expected k={self.k}"
                )
            sock.sendall(_HELLO_ACK.pack(0))
            self.peers[peer_rank] = sock
            expected_inbound.discard(peer_rank)

    def send(self, dest: int, frame: bytes) -> None:
        try:
            self.peers[dest].sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to rank {dest} failed: {exc}") from exc

    def close(self) -> None:
        for sock in self.peers.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self.peers.clear()
        if self._listener is not None:
            self._listener.close()
            self._listener = None


class InProcessTransport:
    """Queues and load estimates for a single-process multi-worker run.

    Delivery is a direct push onto the destination's FIFO; the
    sender-queue-length payload that socket frames carry is modeled by
    updating the destination's estimate of the sender at delivery time.
    """

    def __init__(self, p: int):
        self.p = p
        self.queues = [deque() for _ in range(p)]
        self.estimates = [[0] * p for _ in range(p)]

    def send(self, dest: int, item: int, sender: int, sender_queue_len: int) -> None:
        self.queues[dest].append(item)
        self.estimates[dest][sender] = sender_queue_len

    def queue_len(self, q: int) -> int:
        return len(self.queues[q])
