"""Packet formats and bit-exact serialization.

Layout (big-endian, no padding)::

    magic:u16 kind:u8 worker_id:u8 seq:u32 payload_len:u16   (10 bytes)
    data kinds:      payload_len x i32
    heartbeat kinds: ack:u32 credit:u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = 0x4E57
ELEMS_PER_PACKET = 64
OPTIMIZER_ID = 0xFF

HEADER = struct.Struct(">HBBIH")
HEARTBEAT = struct.Struct(">II")
HEADER_SIZE = HEADER.size
HEARTBEAT_SIZE = HEADER_SIZE + HEARTBEAT.size

_PAYLOAD_DTYPE = np.dtype(">i4")


class PacketKind(IntEnum):
    PARAM_DATA = 0
    GRAD_DATA = 1
    PARAM_HEARTBEAT = 2
    GRAD_HEARTBEAT = 3

    @property
    def is_data(self) -> bool:
        return self <= PacketKind.GRAD_DATA


class WireError(ValueError):
    """Base class for malformed traffic."""


class BadMagic(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownKind(WireError):
    pass


class InvariantViolation(WireError):
    pass


class Direction(IntEnum):
    PARAM_STREAM = 0
    GRAD_STREAM = 1


@dataclass(frozen=True)
class StreamId:
    direction: Direction
    round: int


@dataclass(eq=False)
class Packet:
    kind: PacketKind
    worker_id: int
    seq: int = 0
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    ack: int = 0
    credit: int = 0

    @classmethod
    def data(cls, kind: PacketKind, worker_id: int, seq: int, values) -> "Packet":
        return cls(kind, worker_id, seq, np.asarray(values, dtype=np.int32))

    @classmethod
    def heartbeat(cls, kind: PacketKind, worker_id: int, ack: int, credit: int) -> "Packet":
        return cls(kind, worker_id, 0, np.zeros(0, dtype=np.int32), ack, credit)

    @property
    def payload_len(self) -> int:
        return len(self.values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Packet):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.worker_id == other.worker_id
            and self.seq == other.seq
            and self.ack == other.ack
            and self.credit == other.credit
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        kind = PacketKind(self.kind).name
        if PacketKind(self.kind).is_data:
            return f"Packet({kind}, w={self.worker_id}, seq={self.seq}, len={self.payload_len})"
        return f"Packet({kind}, w={self.worker_id}, ack={self.ack}, credit={self.credit})"


def encoded_size(kind: PacketKind, payload_len: int = 0) -> int:
    if PacketKind(kind).is_data:
        return HEADER_SIZE + 4 * payload_len
    return HEARTBEAT_SIZE


def encode(packet: Packet, elems_per_packet: int = ELEMS_PER_PACKET) -> bytes:
    kind = PacketKind(packet.kind)
    if not 0 <= packet.worker_id <= 0xFF:
        raise InvariantViolation(f"worker_id {packet.worker_id} out of range")
    if not 0 <= packet.seq < 2**32:
        raise InvariantViolation(f"seq {packet.seq} out of range")
    values = packet.values
    if kind.is_data:
        if values.ndim != 1 or len(values) > elems_per_packet:
            raise InvariantViolation(
                f"payload of {len(values)} elements exceeds {elems_per_packet}"
            )
        head = HEADER.pack(MAGIC, kind, packet.worker_id, packet.seq, len(values))
        return head + np.asarray(values, dtype=_PAYLOAD_DTYPE).tobytes()
    if len(values):
        raise InvariantViolation("heartbeat packets carry no data payload")
    if not (0 <= packet.ack < 2**32 and 0 <= packet.credit < 2**32):
        raise InvariantViolation("ack/credit out of range")
    if packet.credit + 1 < packet.ack:
        raise InvariantViolation(f"credit {packet.credit} behind ack {packet.ack}")
    return HEADER.pack(MAGIC, kind, packet.worker_id, packet.seq, 0) + HEARTBEAT.pack(
        packet.ack, packet.credit
    )


def peek_kind(data: bytes) -> PacketKind:
    """Validate the fixed header prefix and return the packet kind."""
    if len(data) < HEADER_SIZE:
        raise Truncated(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, kind = data[0] << 8 | data[1], data[2]
    if magic != MAGIC:
        raise BadMagic(f"magic 0x{magic:04x}")
    if kind > 3:
        raise UnknownKind(f"kind {kind}")
    return PacketKind(kind)


def decode(data: bytes, elems_per_packet: int = ELEMS_PER_PACKET) -> Packet:
    kind = peek_kind(data)
    _, _, worker_id, seq, payload_len = HEADER.unpack_from(data)
    if kind.is_data:
        if payload_len > elems_per_packet:
            raise InvariantViolation(f"payload_len {payload_len} exceeds {elems_per_packet}")
        expected = HEADER_SIZE + 4 * payload_len
        if len(data) < expected:
            raise Truncated(f"{len(data)} bytes, header declares {expected}")
        if len(data) > expected:
            raise InvariantViolation(f"{len(data) - expected} trailing bytes")
        values = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, offset=HEADER_SIZE, count=payload_len)
        return Packet(kind, worker_id, seq, values.astype(np.int32))
    if payload_len != 0:
        raise InvariantViolation("heartbeat with nonzero payload_len")
    if len(data) < HEARTBEAT_SIZE:
        raise Truncated(f"{len(data)} bytes, heartbeat needs {HEARTBEAT_SIZE}")
    if len(data) > HEARTBEAT_SIZE:
        raise InvariantViolation(f"{len(data) - HEARTBEAT_SIZE} trailing bytes")
    ack, credit = HEARTBEAT.unpack_from(data, HEADER_SIZE)
    return Packet(kind, worker_id, seq, np.zeros(0, dtype=np.int32), ack, credit)
