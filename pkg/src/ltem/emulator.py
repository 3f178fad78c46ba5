"""Discrete-event emulation of per-UE LTE downlink queues.

Each UE owns a FIFO at the basestation, served at a bandwidth redrawn from the
link model once per rate epoch.  A delivered packet leaves the queue after its
transmission time and reaches the UE half a base-RTT sample later; echoes
travel back in the other half.  UEs never share capacity, so load on one UE
cannot change another UE's delays.
"""

from __future__ import annotations

import configparser
import csv
import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    BandwidthModel,
    CsqValue,
    ModelError,
    OperatorProfile,
    SeededGenerator,
    as_csq,
    bandwidth_params,
    load_profile,
    rtt_mixture_params,
    sample_bandwidth_series,
    sample_rtt_series,
)
from .probe.config import BURST_PACKET_SIZE, KIND_PROBE, ProbeSessionConfig, cycle_schedule

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 3_000_000
DEFAULT_RATE_EPOCH = 1.0
BULK_PACKET_SIZE = BURST_PACKET_SIZE
KIND_BULK = -1

DELIVERED = "delivered"
DROPPED_QUEUE = "dropped_queue"
DROPPED_LOSS = "dropped_loss"
PENDING = "pending"

# generator sub-streams per link
_RTT_STREAM, _LOSS_STREAM, _PROBE_STREAM = 1, 2, 3
_BLOCK = 4096


class EmulatorError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(slots=True)
class PacketEvent:
    packet_id: int
    ue_id: int
    size_bytes: int
    enqueue_time: float
    depart_time: float = math.nan
    deliver_time: float = math.nan
    outcome: str = PENDING
    base_rtt_ms: float = math.nan
    # probe metadata: (kind, cycle_id, seq); None for bulk traffic
    tag: tuple | None = None

    @property
    def echo_time(self) -> float:
        """Arrival time back at the sender of the UE's echo."""
        return self.deliver_time + self.base_rtt_ms / 2000.0


class _Buffered:
    def __init__(self, draw):
        self._draw = draw
        self._buf = np.empty(0)
        self._i = 0

    def next(self) -> float:
        if self._i >= self._buf.size:
            self._buf = self._draw(_BLOCK)
            self._i = 0
        v = self._buf[self._i]
        self._i += 1
        return float(v)


class UeLinkState:
    """Downlink of one UE: FIFO queue, epoch-wise service rate, base-RTT sampler."""

    def __init__(self, ue_id, bandwidth: BandwidthModel, mixture, loss_rate: float, seed: int,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY, rate_epoch: float = DEFAULT_RATE_EPOCH):
        if queue_capacity <= 0:
            raise EmulatorError("queue capacity must be positive")
        if rate_epoch <= 0:
            raise EmulatorError("rate epoch must be positive")
        self.ue_id = ue_id
        self.bandwidth = bandwidth
        self.mixture = mixture
        self.loss_rate = loss_rate
        self.seed = seed
        self.queue_capacity = queue_capacity
        self.rate_epoch = rate_epoch
        self.queue: deque[PacketEvent] = deque()
        self.queue_bytes = 0
        self.clock = 0.0
        self.counts = {DELIVERED: 0, DROPPED_QUEUE: 0, DROPPED_LOSS: 0}
        self.enqueued = 0

        base = SeededGenerator(seed)
        self._bw_gen = base
        rtt_gen = base.derive(_RTT_STREAM)
        loss_gen = base.derive(_LOSS_STREAM)
        probe_gen = base.derive(_PROBE_STREAM)
        self._rtt = _Buffered(lambda n: sample_rtt_series(mixture, n, rtt_gen))
        self._probe_rtt = _Buffered(lambda n: sample_rtt_series(mixture, n, probe_gen))
        self._loss = _Buffered(loss_gen.random)
        self._rates: list[float] = []
        self._remaining_bits = 0.0
        self._last_deliver = -math.inf
        self._next_id = 0
        self._done: list[PacketEvent] = []
        self.rate_for_epoch(0)

    def rate_for_epoch(self, epoch: int) -> float:
        """Service rate (Mbps) of an epoch; the k-th epoch always gets the k-th draw."""
        while len(self._rates) <= epoch:
            self._rates.append(float(sample_bandwidth_series(self.bandwidth, 1, self._bw_gen)[0]))
        return self._rates[epoch]

    @property
    def current_rate(self) -> float:
        return self.rate_for_epoch(self._epoch(self.clock))

    def _epoch(self, t: float) -> int:
        return int(t // self.rate_epoch)

    def _serve(self, until: float) -> None:
        t = self.clock
        q = self.queue
        while q and t < until:
            e = self._epoch(t)
            rate_bps = self.rate_for_epoch(e) * 1e6
            epoch_end = (e + 1) * self.rate_epoch
            limit = epoch_end if epoch_end < until else until
            if rate_bps <= 0.0:
                t = limit
                continue
            finish = t + self._remaining_bits / rate_bps
            if finish <= limit:
                pkt = q.popleft()
                self.queue_bytes -= pkt.size_bytes
                self._depart(pkt, finish)
                t = finish
                if q:
                    self._remaining_bits = q[0].size_bytes * 8.0
            else:
                self._remaining_bits -= (limit - t) * rate_bps
                t = limit
        self.clock = until

    def _depart(self, pkt: PacketEvent, when: float) -> None:
        base = self._rtt.next()
        deliver = when + base / 2000.0
        if deliver < self._last_deliver:
            deliver = self._last_deliver
        self._last_deliver = deliver
        pkt.depart_time = when
        pkt.deliver_time = deliver
        pkt.base_rtt_ms = base
        pkt.outcome = DELIVERED
        self.counts[DELIVERED] += 1
        self._done.append(pkt)

    def drain_time(self, t: float) -> float:
        """Seconds until the current backlog clears, for a packet injected at ``t``."""
        if not self.queue:
            return 0.0
        bits = self._remaining_bits + sum(p.size_bytes for p in list(self.queue)[1:]) * 8.0
        now = self.clock
        while bits > 0:
            e = self._epoch(now)
            rate_bps = self.rate_for_epoch(e) * 1e6
            epoch_end = (e + 1) * self.rate_epoch
            span = epoch_end - now
            if rate_bps * span >= bits:
                now += bits / rate_bps
                break
            bits -= rate_bps * span
            now = epoch_end
        return max(0.0, now - t)


def create_link(profile: OperatorProfile, csq, seed: int, queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
                rate_epoch: float = DEFAULT_RATE_EPOCH, ue_id=0, mu1: float | None = None) -> UeLinkState:
    csq = as_csq(csq)
    mixture = rtt_mixture_params(profile, csq, mu1)
    bw = bandwidth_params(profile, csq)
    return UeLinkState(ue_id, bw, mixture, profile.loss_rate, seed, queue_capacity, rate_epoch)


def enqueue_packet(link: UeLinkState, t: float, size_bytes: int, tag=None) -> PacketEvent:
    if t < link.clock:
        raise EmulatorError(f"non-monotonic time: {t} < link clock {link.clock}")
    link._serve(t)
    pkt = PacketEvent(link._next_id, link.ue_id, int(size_bytes), t, tag=tag)
    link._next_id += 1
    link.enqueued += 1
    if link.queue_bytes + size_bytes > link.queue_capacity:
        pkt.outcome = DROPPED_QUEUE
    elif link.loss_rate > 0.0 and link._loss.next() < link.loss_rate:
        pkt.outcome = DROPPED_LOSS
    else:
        if not link.queue:
            link._remaining_bits = size_bytes * 8.0
        link.queue.append(pkt)
        link.queue_bytes += pkt.size_bytes
        return pkt
    link.counts[pkt.outcome] += 1
    return pkt


def advance(link: UeLinkState, until_t: float) -> list[PacketEvent]:
    """Serve the queue up to ``until_t``; return packets that departed since the last call."""
    if until_t < link.clock:
        raise EmulatorError(f"non-monotonic time: {until_t} < link clock {link.clock}")
    link._serve(until_t)
    done, link._done = link._done, []
    return done


def measured_rtt(link: UeLinkState, t: float) -> float:
    """RTT (ms) a small probe injected at ``t`` would see: base sample plus queueing delay."""
    if t < link.clock:
        raise EmulatorError(f"non-monotonic time: {t} < link clock {link.clock}")
    return link._probe_rtt.next() + 1000.0 * link.drain_time(t)


# --- scenarios ------------------------------------------------------------------

@dataclass
class UeConfig:
    ue_id: int
    profile: OperatorProfile
    csq: CsqValue
    seed: int
    probe: bool = False
    # Mbps, or None; `bulk_factor` scales the model mean instead
    bulk_mbps: float | None = None
    bulk_factor: float | None = None
    bulk_start: float = 0.0
    queue_capacity: int | None = None
    # stop probing after this many cycles (None: probe for the whole run)
    probe_cycles: int | None = None

    def bulk_rate(self) -> float | None:
        if self.bulk_mbps is not None:
            return self.bulk_mbps
        if self.bulk_factor is not None:
            return self.bulk_factor * bandwidth_params(self.profile, self.csq).mean
        return None


@dataclass
class ScenarioConfig:
    duration: float
    ues: list[UeConfig]
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    rate_epoch: float = DEFAULT_RATE_EPOCH
    probe: ProbeSessionConfig = field(default_factory=ProbeSessionConfig)

    def validate(self) -> None:
        if not self.duration > 0:
            raise ScenarioError(f"duration must be positive, got {self.duration}")
        if not self.ues:
            raise ScenarioError("scenario needs at least one UE")
        ids = [u.ue_id for u in self.ues]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate UE ids")
        if self.queue_capacity <= 0 or self.rate_epoch <= 0:
            raise ScenarioError("queue capacity and rate epoch must be positive")
        for u in self.ues:
            rate = u.bulk_rate()
            if rate is not None and rate <= 0:
                raise ScenarioError(f"UE {u.ue_id}: bulk rate must be positive")


@dataclass
class EmulationTrace:
    ue_id: int
    events: list[PacketEvent]
    summaries: list[tuple[int, float, int, float | None]]  # (t_s, rate_mbps, queue_bytes, probe_rtt_ms)
    still_queued: list[PacketEvent]

    def probe_rtts(self) -> list[tuple[float, float]]:
        """(send time s, measured RTT ms) for every delivered RTT probe."""
        return [(e.enqueue_time, (e.echo_time - e.enqueue_time) * 1000.0)
                for e in self.events
                if e.outcome == DELIVERED and e.tag is not None and e.tag[0] == KIND_PROBE]


def _arrivals(ue: UeConfig, cfg: ScenarioConfig):
    streams = []
    rate = ue.bulk_rate()
    if rate is not None:
        def bulk():
            gap = BULK_PACKET_SIZE * 8 / (rate * 1e6)
            i = 0
            while True:
                t = ue.bulk_start + i * gap
                if t >= cfg.duration:
                    return
                yield t, BULK_PACKET_SIZE, None
                i += 1
        streams.append(bulk())
    if ue.probe:
        def probes():
            c = 0
            while ue.probe_cycles is None or c < ue.probe_cycles:
                plan = cycle_schedule(cfg.probe, c)
                if not plan or plan[0][0] >= cfg.duration:
                    return
                for t, kind, seq, size in plan:
                    if t < cfg.duration:
                        yield t, size, (kind, c + 1, seq)
                c += 1
        streams.append(probes())
    return heapq.merge(*streams, key=lambda a: a[0])


def _keyed_arrivals(ue: UeConfig, cfg: ScenarioConfig):
    # sort key (time, tick-before-arrival, ue_id, per-UE index)
    for i, (t, size, tag) in enumerate(_arrivals(ue, cfg)):
        yield t, 1, ue.ue_id, i, (size, tag)


def run_scenario(cfg: ScenarioConfig) -> dict[int, EmulationTrace]:
    """Drive every UE link on a shared clock; returns one trace per UE."""
    cfg.validate()
    links = {}
    events: dict[int, list[PacketEvent]] = {}
    for u in cfg.ues:
        links[u.ue_id] = create_link(u.profile, u.csq, u.seed, u.queue_capacity or cfg.queue_capacity,
                                     cfg.rate_epoch, ue_id=u.ue_id)
        events[u.ue_id] = []

    ticks = [(float(s), 0, u.ue_id, s, None) for s in range(1, int(math.floor(cfg.duration)) + 1)
             for u in cfg.ues]
    per_ue = [_keyed_arrivals(u, cfg) for u in cfg.ues]
    queue_at: dict[int, dict[int, int]] = {u.ue_id: {} for u in cfg.ues}
    for t, order, ue_id, idx, payload in heapq.merge(iter(ticks), *per_ue):
        link = links[ue_id]
        if order == 0:
            link._serve(t)
            queue_at[ue_id][idx] = link.queue_bytes
            continue
        size, tag = payload
        events[ue_id].append(enqueue_packet(link, t, size, tag))

    traces = {}
    for u in cfg.ues:
        link = links[u.ue_id]
        advance(link, cfg.duration)
        evs = events[u.ue_id]
        trace = EmulationTrace(u.ue_id, [e for e in evs if e.outcome != PENDING], [], list(link.queue))
        rtts: dict[int, list[float]] = {}
        for send_t, rtt in trace.probe_rtts():
            rtts.setdefault(int(send_t // 1.0) + 1, []).append(rtt)
        for s in range(1, int(math.floor(cfg.duration)) + 1):
            vals = rtts.get(s)
            trace.summaries.append((s, link.rate_for_epoch(int((s - 1) // cfg.rate_epoch)),
                                    queue_at[u.ue_id].get(s, 0),
                                    float(np.mean(vals)) if vals else None))
        traces[u.ue_id] = trace
    return traces


# --- files ----------------------------------------------------------------------

_WORKLOADS = ("none", "probe", "bulk")


def _parse_workload(text: str, ue: UeConfig) -> None:
    for item in text.replace("+", ",").split(","):
        item = item.strip()
        if not item or item == "none":
            continue
        if item == "probe":
            ue.probe = True
        elif item.startswith("bulk"):
            _, _, rate = item.partition(":")
            rate = rate.strip() or "2x"
            try:
                if rate.endswith("x"):
                    ue.bulk_factor = float(rate[:-1])
                else:
                    ue.bulk_mbps = float(rate)
            except ValueError:
                raise ScenarioError(f"bad bulk rate {rate!r}") from None
        else:
            raise ScenarioError(f"unknown workload {item!r} (expected one of {_WORKLOADS})")


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse a flat ``key = value`` scenario.

    Global keys: ``duration``, ``queue_capacity``, ``rate_epoch``.  Per-UE
    keys are prefixed ``ue<N>.``: ``profile`` (``builtin:T`` or path),
    ``csq``, ``seed``, ``workload`` (``none``, ``probe``, ``bulk:<Mbps>``,
    ``bulk:<k>x`` for k times the model mean, combined with ``+``),
    ``bulk_start`` and ``queue_capacity``.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    s = cp["scenario"]
    ues: dict[int, dict[str, str]] = {}
    glob = {}
    for key, value in s.items():
        if key.startswith("ue") and "." in key:
            head, _, attr = key.partition(".")
            try:
                uid = int(head[2:])
            except ValueError:
                raise ScenarioError(f"bad UE key {key!r}") from None
            ues.setdefault(uid, {})[attr] = value
        else:
            glob[key] = value
    unknown = set(glob) - {"duration", "queue_capacity", "rate_epoch"}
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        cfg = ScenarioConfig(
            duration=float(glob.get("duration", "0")),
            ues=[],
            queue_capacity=int(float(glob.get("queue_capacity", DEFAULT_QUEUE_CAPACITY))),
            rate_epoch=float(glob.get("rate_epoch", DEFAULT_RATE_EPOCH)),
        )
        for uid in sorted(ues):
            d = ues[uid]
            bad = set(d) - {"profile", "csq", "seed", "workload", "bulk_start", "queue_capacity"}
            if bad:
                raise ScenarioError(f"unknown keys for ue{uid}: {sorted(bad)}")
            ue = UeConfig(
                ue_id=uid,
                profile=load_profile(d.get("profile", "builtin:T")),
                csq=as_csq(int(d["csq"])),
                seed=int(d.get("seed", uid)),
                bulk_start=float(d.get("bulk_start", "0")),
                queue_capacity=int(float(d["queue_capacity"])) if "queue_capacity" in d else None,
            )
            _parse_workload(d.get("workload", "none"), ue)
            cfg.ues.append(ue)
    except KeyError as exc:
        raise ScenarioError(f"missing key {exc.args[0]}") from exc
    except (ValueError, ModelError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_scenario(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text)


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)


def write_trace_csv(path, traces: dict[int, EmulationTrace]) -> None:
    rows = sorted((e for t in traces.values() for e in t.events),
                  key=lambda e: (e.enqueue_time, e.ue_id, e.packet_id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ue_id", "packet_id", "size", "enqueue_s", "depart_s", "deliver_s", "outcome"])
        for e in rows:
            w.writerow([e.ue_id, e.packet_id, e.size_bytes, repr(e.enqueue_time),
                        _fmt(e.depart_time), _fmt(e.deliver_time), e.outcome])


def write_summary_csv(path, traces: dict[int, EmulationTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ue_id", "t_s", "rate_mbps", "queue_bytes", "probe_rtt_ms"])
        for uid in sorted(traces):
            for t_s, rate, qb, rtt in traces[uid].summaries:
                w.writerow([uid, t_s, repr(rate), qb, _fmt(rtt)])
