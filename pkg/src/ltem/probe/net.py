"""Probe client and server over real UDP sockets.

The server waits for the client's hello, then runs the cycles: a
back-to-back burst at each cycle start and evenly spaced probes in the second
half.  The client timestamps every arrival and echoes probes straight back.
Each side keeps sending and receiving in separate threads.
"""

from __future__ import annotations

import logging
import queue
import socket
import subprocess
import threading
import time

from .config import KIND_BURST, KIND_ECHO, KIND_PROBE, ProbeSessionConfig, cycle_schedule
from .records import ProbeError, ProbeLogRecord, write_log
from .wire import ProbePacket, WireError, decode, session_open

log = logging.getLogger(__name__)

RECV_BUFFER = 4096
HELLO_RETRY_S = 0.5


def now_us() -> int:
    return time.monotonic_ns() // 1000


def _sleep_until(deadline: float) -> None:
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            return
        # sleep most of the way, then spin for the last millisecond
        time.sleep(left - 0.001 if left > 0.002 else 0)


class CsqSource:
    """Link-quality source refreshed once per second.

    ``spec`` is ``None`` (no source), an integer / ``value:N`` for a static
    reading, or ``exec:/path`` for a program that prints a CSQ on stdout.
    """

    def __init__(self, spec: str | int | None = None, period_s: float = 1.0):
        self.period_s = period_s
        self._static = None
        self._cmd = None
        self._value = None
        self._thread = None
        self._stop = threading.Event()
        if spec is None or spec == "":
            return
        if isinstance(spec, int):
            self._static = spec
        elif spec.startswith("exec:"):
            self._cmd = spec[5:]
        else:
            text = spec[6:] if spec.startswith("value:") else spec
            try:
                self._static = int(text)
            except ValueError:
                raise ValueError(f"bad CSQ source {spec!r}") from None
        if self._static is not None and not 0 <= self._static <= 31:
            raise ValueError(f"static CSQ {self._static} outside 0..31")

    def current(self) -> int | None:
        if self._static is not None:
            return self._static
        return self._value

    def start(self) -> None:
        if self._cmd is None or self._thread is not None:
            return
        self._stop.clear()
        self._value = self._poll()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    def _run(self) -> None:
        while not self._stop.wait(self.period_s):
            self._value = self._poll()

    def _poll(self) -> int | None:
        try:
            out = subprocess.run([self._cmd], capture_output=True, text=True, timeout=1.0, check=True)
            value = int(out.stdout.strip().split()[0])
        except (OSError, subprocess.SubprocessError, ValueError, IndexError) as exc:
            log.debug("CSQ source failed: %s", exc)
            return None
        return value if 0 <= value <= 31 else None


class ServerResult:
    def __init__(self):
        self.sent = {KIND_BURST: 0, KIND_PROBE: 0}
        self.records: list[ProbeLogRecord] = []
        self.client = None
        self.epoch_us = None


def run_server(cfg: ProbeSessionConfig, *, bind: tuple[str, int] | None = None, hello_timeout: float = 30.0,
               echo_grace_s: float = 1.0, sock: socket.socket | None = None) -> ServerResult:
    """Serve one client for ``cfg.cycles`` cycles; return send counts and the server log."""
    res = ServerResult()
    own = sock is None
    try:
        if own:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind(bind or ("0.0.0.0", cfg.port))
        sock.settimeout(hello_timeout)
        while res.client is None:
            data, addr = sock.recvfrom(RECV_BUFFER)
            try:
                pkt = decode(data)
            except WireError:
                continue
            if pkt.kind == KIND_PROBE and pkt.cycle_id == 0:
                res.client = addr
        log.info("client %s:%d connected", *res.client)
        res.epoch_us = time.time_ns() // 1000
        if cfg.cycles == 0:
            return res

        echoes: queue.SimpleQueue = queue.SimpleQueue()
        stop = threading.Event()
        sock.settimeout(0.1)

        def receive():
            while not stop.is_set():
                try:
                    data, addr = sock.recvfrom(RECV_BUFFER)
                except socket.timeout:
                    continue
                except OSError as exc:
                    log.debug("server receive: %s", exc)
                    continue
                t = now_us()
                try:
                    pkt = decode(data)
                except WireError:
                    continue
                if pkt.kind == KIND_ECHO and addr == res.client:
                    echoes.put(ProbeLogRecord(t, pkt.cycle_id, KIND_ECHO, pkt.seq_in_cycle,
                                              pkt.send_timestamp_us, len(data)))

        rx = threading.Thread(target=receive, daemon=True)
        rx.start()
        start = time.monotonic() + 0.05
        sends = []
        for c in range(cfg.cycles):
            for offset, kind, seq, size in cycle_schedule(cfg, c):
                _sleep_until(start + offset)
                ts = now_us()
                pkt = ProbePacket(kind, c + 1, seq, ts)
                sock.sendto(pkt.encode(), res.client)
                res.sent[kind] += 1
                if kind == KIND_PROBE:
                    sends.append(ProbeLogRecord(ts, c + 1, KIND_PROBE, seq, ts, size))
        time.sleep(echo_grace_s)
        stop.set()
        rx.join()
        got = []
        while not echoes.empty():
            got.append(echoes.get())
        res.records = sorted(sends + got, key=lambda r: r.recv_time_us)
        return res
    except OSError as exc:
        log.error("server aborted: %s", exc)
        raise ProbeError(f"socket failure: {exc}") from exc
    finally:
        if own and sock is not None:
            sock.close()
        if cfg.log_path:
            write_log(cfg.log_path, res.records, res.epoch_us)


class ClientResult:
    def __init__(self):
        self.records: list[ProbeLogRecord] = []
        self.echoes_sent = 0
        self.epoch_us = None


def run_client(cfg: ProbeSessionConfig, *, csq_source: CsqSource | None = None, connect_timeout: float = 5.0,
               idle_timeout: float = 2.0) -> ClientResult:
    """Open a session, log every arrival and echo each probe back."""
    res = ClientResult()
    source = csq_source or CsqSource(None)
    source.start()
    sock = None
    try:
        addr = socket.getaddrinfo(cfg.host, cfg.port, socket.AF_INET, socket.SOCK_DGRAM)[0][4]
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.connect(addr)
        sock.settimeout(0.05)
        res.epoch_us = time.time_ns() // 1000
        hello = session_open()
        started = time.monotonic()
        last_hello = -float("inf")
        last_rx = None
        last_cycle_done = cfg.cycles == 0
        while True:
            now = time.monotonic()
            if last_rx is None:
                if now - started > (connect_timeout if cfg.cycles else min(connect_timeout, idle_timeout)):
                    if cfg.cycles == 0:
                        break
                    raise ProbeError(f"no response from {cfg.host}:{cfg.port}")
                if now - last_hello >= HELLO_RETRY_S:
                    sock.send(hello)
                    last_hello = now
            elif now - last_rx > idle_timeout or (last_cycle_done and now - last_rx > 0.2):
                break
            try:
                data = sock.recv(RECV_BUFFER)
            except socket.timeout:
                continue
            except ConnectionRefusedError:
                # ICMP port unreachable from an earlier hello; keep trying until timeout
                continue
            t = now_us()
            last_rx = time.monotonic()
            try:
                pkt = decode(data)
            except WireError:
                continue
            if pkt.kind == KIND_PROBE:
                sock.send(pkt.echo().encode())
                res.echoes_sent += 1
                if pkt.cycle_id >= cfg.cycles and pkt.seq_in_cycle == cfg.rtt_probe_count - 1:
                    last_cycle_done = True
            res.records.append(ProbeLogRecord(t, pkt.cycle_id, pkt.kind, pkt.seq_in_cycle,
                                              pkt.send_timestamp_us, len(data), source.current()))
        return res
    except OSError as exc:
        log.error("client aborted: %s", exc)
        raise ProbeError(f"socket failure: {exc}") from exc
    finally:
        source.stop()
        if sock is not None:
            sock.close()
        if cfg.log_path:
            write_log(cfg.log_path, res.records, res.epoch_us)
