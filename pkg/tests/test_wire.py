from pathlib import Path

import numpy as np
import pytest

from netopt import wire
from netopt.wire import Packet, PacketKind

FIXTURES = Path(__file__).parent / "fixtures"

# Hand-assembled field by field; the .hex files must agree with these.
GOLDEN = {
    "param_data": (
        Packet.data(PacketKind.PARAM_DATA, 0xFF, 0x01020304, [1, -1, 1572864, -2**31]),
        "4e57" "00" "ff" "01020304" "0004" "00000001" "ffffffff" "00180000" "80000000",
    ),
    "grad_data": (
        Packet.data(PacketKind.GRAD_DATA, 3, 7, [1, -1]),
        "4e57" "01" "03" "00000007" "0002" "00000001" "ffffffff",
    ),
    "param_heartbeat": (
        Packet.heartbeat(PacketKind.PARAM_HEARTBEAT, 2, 5, 132),
        "4e57" "02" "02" "00000000" "0000" "00000005" "00000084",
    ),
    "grad_heartbeat": (
        Packet.heartbeat(PacketKind.GRAD_HEARTBEAT, 0xFF, 300, 427),
        "4e57" "03" "ff" "00000000" "0000" "0000012c" "000001ab",
    ),
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_fixture(name):
    packet, expected = GOLDEN[name]
    on_disk = (FIXTURES / f"{name}.hex").read_text().strip()
    assert on_disk == expected
    raw = bytes.fromhex(on_disk)
    assert wire.encode(packet) == raw
    assert wire.decode(raw) == packet
    assert wire.encode(wire.decode(raw)) == raw


def test_empty_param_packet_is_header_only():
    raw = wire.encode(Packet.data(PacketKind.PARAM_DATA, 0xFF, 0, []))
    assert len(raw) == 10
    assert raw[8:10] == b"\x00\x00"


def test_two_element_grad_packet_layout():
    raw = wire.encode(Packet.data(PacketKind.GRAD_DATA, 3, 7, [1, -1]))
    assert len(raw) == 18
    assert raw[-8:] == bytes.fromhex("00000001ffffffff")


def _random_packet(rng) -> Packet:
    kind = PacketKind(int(rng.integers(4)))
    wid = int(rng.integers(256))
    if kind.is_data:
        n = int(rng.integers(0, wire.ELEMS_PER_PACKET + 1))
        vals = rng.integers(-2**31, 2**31, n, dtype=np.int64).astype(np.int32)
        return Packet.data(kind, wid, int(rng.integers(2**32)), vals)
    ack = int(rng.integers(2**32 - 1))
    credit = int(rng.integers(ack, 2**32)) if rng.random() < 0.9 else max(ack - 1, 0)
    return Packet.heartbeat(kind, wid, ack, credit)


def test_round_trip_10k_random_packets():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        p = _random_packet(rng)
        raw = wire.encode(p)
        assert len(raw) == wire.encoded_size(p.kind, p.payload_len)
        assert wire.decode(raw) == p


def test_bad_magic():
    raw = bytearray(bytes.fromhex(GOLDEN["grad_data"][1]))
    raw[0] = 0
    with pytest.raises(wire.BadMagic):
        wire.decode(bytes(raw))


def test_truncated_header():
    with pytest.raises(wire.Truncated):
        wire.decode(b"\x4e\x57\x01\x00\x00")


def test_truncated_payload():
    raw = bytes.fromhex(GOLDEN["grad_data"][1])
    with pytest.raises(wire.Truncated):
        wire.decode(raw[:-1])


def test_unknown_kind():
    raw = bytearray(bytes.fromhex(GOLDEN["grad_heartbeat"][1]))
    raw[2] = 9
    with pytest.raises(wire.UnknownKind):
        wire.decode(bytes(raw))


def test_errors_are_distinct():
    kinds = {wire.BadMagic, wire.Truncated, wire.UnknownKind}
    assert len(kinds) == 3
    assert all(issubclass(k, wire.WireError) for k in kinds)


def test_oversized_payload_rejected():
    p = Packet.data(PacketKind.GRAD_DATA, 0, 0, np.zeros(65, dtype=np.int32))
    with pytest.raises(wire.InvariantViolation):
        wire.encode(p)


def test_heartbeat_credit_behind_ack_rejected():
    with pytest.raises(wire.InvariantViolation):
        wire.encode(Packet.heartbeat(PacketKind.PARAM_HEARTBEAT, 0, 10, 3))


def test_heartbeat_with_payload_rejected():
    raw = bytearray(bytes.fromhex(GOLDEN["param_heartbeat"][1]))
    raw[9] = 1
    with pytest.raises(wire.InvariantViolation):
        wire.decode(bytes(raw))
