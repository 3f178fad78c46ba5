"""Fixed-layout binary datagrams, network byte order.

    offset  size  field
    0       4     magic b"LTEM"
    4       1     kind (0 burst, 1 rtt probe, 2 rtt echo)
    5       4     cycle_id, unsigned
    9       2     seq_in_cycle, unsigned
    11      8     send_timestamp_us, unsigned (sender clock)
    19      ..    zero padding to 1470 bytes (burst) or 64 bytes (probe/echo)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .config import BURST_PACKET_SIZE, KIND_BURST, KIND_ECHO, KIND_PROBE, PROBE_PACKET_SIZE

MAGIC = b"LTEM"
HEADER = struct.Struct("!4sBIHQ")

PACKET_SIZE = {KIND_BURST: BURST_PACKET_SIZE, KIND_PROBE: PROBE_PACKET_SIZE, KIND_ECHO: PROBE_PACKET_SIZE}
SEQ_LIMIT = {KIND_BURST: 50, KIND_PROBE: 10, KIND_ECHO: 10}


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class ProbePacket:
    kind: int
    cycle_id: int
    seq_in_cycle: int
    send_timestamp_us: int

    def __post_init__(self):
        if self.kind not in PACKET_SIZE:
            raise WireError(f"unknown packet kind {self.kind}")
        if not 0 <= self.cycle_id < 2**32:
            raise WireError(f"cycle_id {self.cycle_id} out of range")
        if not 0 <= self.seq_in_cycle < SEQ_LIMIT[self.kind]:
            raise WireError(f"seq {self.seq_in_cycle} out of range for kind {self.kind}")
        if not 0 <= self.send_timestamp_us < 2**64:
            raise WireError(f"timestamp {self.send_timestamp_us} out of range")

    @property
    def size(self) -> int:
        return PACKET_SIZE[self.kind]

    def encode(self) -> bytes:
        head = HEADER.pack(MAGIC, self.kind, self.cycle_id, self.seq_in_cycle, self.send_timestamp_us)
        return head + bytes(self.size - HEADER.size)

    def echo(self) -> "ProbePacket":
        if self.kind != KIND_PROBE:
            raise WireError("only rtt probes are echoed")
        return ProbePacket(KIND_ECHO, self.cycle_id, self.seq_in_cycle, self.send_timestamp_us)


def decode(data: bytes) -> ProbePacket:
    if len(data) < HEADER.size:
        raise WireError(f"datagram too short ({len(data)} bytes)")
    magic, kind, cycle_id, seq, ts = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    pkt = ProbePacket(kind, cycle_id, seq, ts)
    if len(data) != pkt.size:
        raise WireError(f"kind {kind} datagram must be {pkt.size} bytes, got {len(data)}")
    return pkt


def session_open() -> bytes:
    """Client hello: a probe-kind datagram with cycle_id 0."""
    return ProbePacket(KIND_PROBE, 0, 0, 0).encode()
