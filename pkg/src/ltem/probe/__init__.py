"""UDP measurement protocol: 1 s cycles of a bandwidth burst then RTT probes."""

from .config import ProbeSessionConfig, cycle_schedule
from .records import (
    CycleSummary,
    ProbeLogRecord,
    estimate_bandwidth_from_burst,
    estimate_rtt,
    parse_log,
    summarize_cycle,
    summarize_log,
    write_log,
)
from .wire import ProbePacket, decode

__all__ = [
    "CycleSummary",
    "ProbeLogRecord",
    "ProbePacket",
    "ProbeSessionConfig",
    "cycle_schedule",
    "decode",
    "estimate_bandwidth_from_burst",
    "estimate_rtt",
    "parse_log",
    "summarize_cycle",
    "summarize_log",
    "write_log",
]
