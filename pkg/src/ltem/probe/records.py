"""Probe logs, per-cycle estimators and summaries.

Bandwidth uses only receiver timestamps (burst arrival spread) and RTT only
the server clock (echo arrival minus the send timestamp the echo carries), so
neither estimate depends on client/server clock synchronisation.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .config import BURST_PACKET_SIZE, KIND_BURST, KIND_ECHO, KIND_PROBE

LOG_HEADER = ["recv_time_us", "cycle_id", "kind", "seq", "send_timestamp_us", "size_bytes", "csq"]
SUMMARY_HEADER = ["cycle_id", "bandwidth_mbps", "rtt_count", "rtt_mean_ms", "loss_fraction", "csq"]
EPOCH_PREFIX = "# epoch_us="


class ProbeError(ValueError):
    pass


class CorruptLog(ProbeError):
    pass


class OrphanEcho(ProbeError):
    pass


@dataclass(frozen=True)
class ProbeLogRecord:
    recv_time_us: int
    cycle_id: int
    kind: int
    seq: int
    send_timestamp_us: int
    size_bytes: int
    csq: int | None = None

    @property
    def key(self):
        return self.cycle_id, self.kind, self.seq


@dataclass
class CycleSummary:
    cycle_id: int
    bandwidth_mbps: float | None
    rtt_ms: list[float] = field(default_factory=list)
    loss_fraction: float = 0.0
    csq: int | None = None

    @property
    def rtt_mean_ms(self) -> float | None:
        return sum(self.rtt_ms) / len(self.rtt_ms) if self.rtt_ms else None


# --- estimators -------------------------------------------------------------

def estimate_bandwidth_from_burst(records, burst_size: int = BURST_PACKET_SIZE) -> float | None:
    """Mbps from one cycle's burst arrivals: (n-1) * size * 8 / arrival span."""
    burst = [r for r in records if r.kind == KIND_BURST]
    if len({r.cycle_id for r in burst}) > 1:
        raise ProbeError("burst records span more than one cycle")
    if len(burst) < 2:
        return None
    times = [r.recv_time_us for r in burst]
    if any(b < a for a, b in zip(times, times[1:])):
        raise CorruptLog("burst arrival timestamps are not monotonic")
    span_us = times[-1] - times[0]
    if span_us <= 0:
        return None
    return (len(burst) - 1) * burst_size * 8 / span_us


def estimate_rtt(sent: ProbeLogRecord, echo: ProbeLogRecord) -> float:
    """RTT in ms: echo arrival minus probe send time, both on the server clock."""
    if (sent.cycle_id, sent.seq) != (echo.cycle_id, echo.seq):
        raise OrphanEcho(f"echo {echo.cycle_id}/{echo.seq} does not match probe {sent.cycle_id}/{sent.seq}")
    delta = echo.recv_time_us - sent.send_timestamp_us
    if delta < 0:
        raise ProbeError(f"echo for {echo.cycle_id}/{echo.seq} arrived before its probe was sent")
    return delta / 1000.0


def summarize_cycle(records, *, side: str = "auto", probe_count: int = 10,
                    burst_size: int = BURST_PACKET_SIZE) -> CycleSummary:
    """Summarise one cycle.

    ``side="server"`` (or ``"auto"`` when echoes are present) takes RTTs and
    loss from echoes.  ``side="client"`` has no RTT; loss counts probes that
    never arrived at the client.
    """
    records = list(records)
    cycles = {r.cycle_id for r in records}
    if len(cycles) > 1:
        raise ProbeError(f"records span cycles {sorted(cycles)}")
    cycle_id = cycles.pop() if cycles else 0
    if side == "auto":
        side = "server" if any(r.kind == KIND_ECHO for r in records) else "client"
    if side not in ("client", "server"):
        raise ValueError(f"unknown side {side!r}")

    bw = estimate_bandwidth_from_burst([r for r in records if r.kind == KIND_BURST], burst_size)
    probes = {}
    for r in records:
        if r.kind == KIND_PROBE and r.seq not in probes:
            probes[r.seq] = r
    rtts = []
    if side == "server":
        seen = set()
        for r in records:
            if r.kind != KIND_ECHO or r.seq in seen:
                continue
            seen.add(r.seq)
            rtts.append(estimate_rtt(probes.get(r.seq, r), r))
        matched = len(seen)
    else:
        matched = len(probes)
    loss = (probe_count - min(matched, probe_count)) / probe_count if probe_count else 0.0
    csq = None
    for r in records:
        if r.csq is not None:
            csq = r.csq
    return CycleSummary(cycle_id, bw, rtts, loss, csq)


def summarize_log(records, *, side: str = "auto", probe_count: int = 10) -> list[CycleSummary]:
    records = list(records)
    if side == "auto":
        side = "server" if any(r.kind == KIND_ECHO for r in records) else "client"
    by_cycle = defaultdict(list)
    for r in records:
        by_cycle[r.cycle_id].append(r)
    return [summarize_cycle(by_cycle[c], side=side, probe_count=probe_count) for c in sorted(by_cycle)]


def label_rtts(client, server) -> list[tuple[int, int, int | None, float]]:
    """Join server echoes with client CSQ reports: (cycle_id, seq, csq, rtt_ms).

    An echo takes the CSQ of the client's record of the same probe, falling
    back to the latest CSQ the client reported in that cycle.
    """
    probe_csq = {}
    cycle_csq = {}
    for r in client:
        if r.csq is None:
            continue
        cycle_csq[r.cycle_id] = r.csq
        if r.kind == KIND_PROBE:
            probe_csq[(r.cycle_id, r.seq)] = r.csq
    out = []
    seen = set()
    for r in server:
        if r.kind != KIND_ECHO or (r.cycle_id, r.seq) in seen:
            continue
        seen.add((r.cycle_id, r.seq))
        csq = r.csq
        if csq is None:
            csq = probe_csq.get((r.cycle_id, r.seq), cycle_csq.get(r.cycle_id))
        out.append((r.cycle_id, r.seq, csq, estimate_rtt(r, r)))
    return out


# --- CSV ------------------------------------------------------------------------

def format_log(records, epoch_us: int | None = None) -> str:
    buf = io.StringIO()
    if epoch_us is not None:
        buf.write(f"{EPOCH_PREFIX}{int(epoch_us)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    prev = None
    for r in records:
        if prev is not None and r.recv_time_us < prev:
            raise ProbeError("log records must be time-ordered")
        prev = r.recv_time_us
        w.writerow([r.recv_time_us, r.cycle_id, r.kind, r.seq, r.send_timestamp_us, r.size_bytes,
                    "" if r.csq is None else r.csq])
    return buf.getvalue()


def write_log(path, records, epoch_us: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_log(records, epoch_us))


def _parse_lines(lines, name="<log>"):
    records = []
    header_seen = False
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if line.startswith("#"):
            continue
        if not header_seen:
            if line.split(",") != LOG_HEADER:
                raise CorruptLog(f"{name}:{lineno}: expected header {','.join(LOG_HEADER)}")
            header_seen = True
            continue
        if not line:
            continue
        row = line.split(",")
        try:
            if len(row) != len(LOG_HEADER):
                raise ValueError(f"expected {len(LOG_HEADER)} fields, got {len(row)}")
            ints = [int(v) for v in row[:6]]
            csq = int(row[6]) if row[6] != "" else None
        except ValueError as exc:
            raise CorruptLog(f"{name}:{lineno}: malformed row: {exc}") from None
        records.append(ProbeLogRecord(*ints, csq))
    if not header_seen:
        raise CorruptLog(f"{name}: empty file, no header")
    return records


def parse_log(path) -> list[ProbeLogRecord]:
    with open(path, newline="") as fh:
        return _parse_lines(fh, str(path))


def parse_log_text(text: str) -> list[ProbeLogRecord]:
    return _parse_lines(text.splitlines())


def read_log_epoch(path) -> int | None:
    with open(path) as fh:
        first = fh.readline()
    if first.startswith(EPOCH_PREFIX):
        return int(first[len(EPOCH_PREFIX):])
    return None


def write_summaries(path, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            mean = s.rtt_mean_ms
            w.writerow([s.cycle_id, "" if s.bandwidth_mbps is None else repr(s.bandwidth_mbps),
                        len(s.rtt_ms), "" if mean is None or math.isnan(mean) else repr(mean),
                        repr(s.loss_fraction), "" if s.csq is None else s.csq])
