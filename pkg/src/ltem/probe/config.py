from __future__ import annotations

from dataclasses import dataclass

BURST_PACKET_SIZE = 1470
PROBE_PACKET_SIZE = 64

KIND_BURST = 0
KIND_PROBE = 1
KIND_ECHO = 2


@dataclass(frozen=True)
class ProbeSessionConfig:
    """Timing of one measurement session.

    Each cycle opens with a back-to-back burst for bandwidth estimation,
    followed by evenly spaced small probes that the client echoes back.
    """

    host: str = "127.0.0.1"
    port: int = 5201
    cycle_period_ms: float = 1000.0
    burst_window_ms: float = 500.0
    burst_count: int = 50
    burst_size: int = BURST_PACKET_SIZE
    rtt_probe_count: int = 10
    rtt_probe_spacing_ms: float = 50.0
    cycles: int = 10
    log_path: str | None = None

    def __post_init__(self):
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")
        if not 0 <= self.burst_count <= 50:
            raise ValueError("burst_count must be in 0..50")
        if not 0 <= self.rtt_probe_count <= 10:
            raise ValueError("rtt_probe_count must be in 0..10")
        probe_window = self.rtt_probe_count * self.rtt_probe_spacing_ms
        if abs(self.burst_window_ms + probe_window - self.cycle_period_ms) > 1e-9 and self.rtt_probe_count:
            raise ValueError(
                f"burst window {self.burst_window_ms} ms + probe window {probe_window} ms "
                f"!= cycle period {self.cycle_period_ms} ms")


def cycle_schedule(cfg: ProbeSessionConfig, cycle_index: int):
    """Send plan for one cycle as ``(offset_s, kind, seq, size_bytes)``.

    ``cycle_index`` counts from 0; the offset is relative to session start.
    Burst packets share the cycle start instant (back-to-back).
    """
    start = cycle_index * cfg.cycle_period_ms / 1000.0
    plan = [(start, KIND_BURST, i, cfg.burst_size) for i in range(cfg.burst_count)]
    for j in range(cfg.rtt_probe_count):
        t = start + (cfg.burst_window_ms + j * cfg.rtt_probe_spacing_ms) / 1000.0
        plan.append((t, KIND_PROBE, j, PROBE_PACKET_SIZE))
    return plan
