"""Run the probe protocol in-process over the queue emulator.

Produces the same client and server logs a real session would, with the
server clock starting at 0 and the client clock shifted by an arbitrary
offset.
"""

from __future__ import annotations

from ..emulator import DELIVERED, ScenarioConfig, UeConfig, run_scenario
from ..model import OperatorProfile, as_csq
from .config import KIND_ECHO, KIND_PROBE, ProbeSessionConfig
from .records import ProbeLogRecord

DRAIN_GRACE_S = 5.0


def _us(t: float) -> int:
    return int(round(t * 1e6))


def run_emulated_session(profile: OperatorProfile, csq, cycles: int, seed: int,
                         cfg: ProbeSessionConfig | None = None, *, queue_capacity: int | None = None,
                         rate_epoch: float = 1.0, client_clock_offset_us: int = 0):
    """Return ``(client_records, server_records)`` for ``cycles`` probe cycles."""
    cfg = cfg or ProbeSessionConfig(cycles=cycles)
    csq = as_csq(csq)
    if cycles <= 0:
        return [], []
    ue = UeConfig(ue_id=1, profile=profile, csq=csq, seed=seed, probe=True, probe_cycles=cycles,
                  queue_capacity=queue_capacity)
    duration = cycles * cfg.cycle_period_ms / 1000.0 + DRAIN_GRACE_S
    scen = ScenarioConfig(duration=duration, ues=[ue], rate_epoch=rate_epoch, probe=cfg)
    if queue_capacity:
        scen.queue_capacity = queue_capacity
    trace = run_scenario(scen)[1]

    client, server = [], []
    for e in trace.events:
        kind, cycle_id, seq = e.tag
        send_us = _us(e.enqueue_time)
        if kind == KIND_PROBE:
            server.append(ProbeLogRecord(send_us, cycle_id, KIND_PROBE, seq, send_us, e.size_bytes))
        if e.outcome != DELIVERED:
            continue
        client.append(ProbeLogRecord(_us(e.deliver_time) + client_clock_offset_us, cycle_id, kind, seq,
                                     send_us, e.size_bytes, csq.value))
        if kind == KIND_PROBE:
            server.append(ProbeLogRecord(_us(e.echo_time), cycle_id, KIND_ECHO, seq, send_us, e.size_bytes))
    client.sort(key=lambda r: r.recv_time_us)
    server.sort(key=lambda r: r.recv_time_us)
    return client, server
