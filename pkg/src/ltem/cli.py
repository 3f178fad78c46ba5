"""``ltem`` command line: sample, fit, emulate, probe-server, probe-client, analyze.

Exit codes: 0 ok, 2 usage, 3 model, 4 fit/parse, 5 scenario, 6 network.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import secrets
import sys
from collections import defaultdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .emulator import ScenarioError, load_scenario, parse_scenario, run_scenario, write_summary_csv, write_trace_csv
from .fitting import (
    DEFAULT_PERIOD_THRESHOLD,
    FitError,
    autocorrelation,
    detect_period,
    fit_gmm,
    fit_poly,
    rebuild_profile,
    write_fit_report,
    write_two_column,
)
from .model import (
    BANDWIDTH_CADENCE_MS,
    LOSS_CADENCE_MS,
    RTT_CADENCE_MS,
    ModelError,
    SeededGenerator,
    bandwidth_params,
    load_profile,
    mixture_moments,
    read_series_csv,
    rtt_mixture_params,
    sample_bandwidth_series,
    sample_loss,
    sample_rtt_series,
    save_profile,
    truncated_moments,
    write_series_csv,
)
from .probe.config import KIND_BURST, KIND_ECHO, ProbeSessionConfig
from .probe.records import (
    ProbeError,
    estimate_bandwidth_from_burst,
    label_rtts,
    parse_log,
    summarize_log,
    write_log,
    write_summaries,
)

log = logging.getLogger("ltem")

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_FIT, EXIT_SCENARIO, EXIT_NETWORK = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _csq_arg(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"CSQ must be an integer, got {text!r}") from None
    if not 0 <= v <= 31:
        raise argparse.ArgumentTypeError(f"CSQ {v} outside 0..31")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = text, "5201"
    try:
        return host or "0.0.0.0", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad address {text!r}") from None


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbits(63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _profile(spec: str):
    try:
        return load_profile(spec)
    except ModelError as exc:
        raise CliError(EXIT_MODEL, str(exc)) from exc


# --- input loading ----------------------------------------------------------------

class _Inputs:
    """Series CSVs and probe logs, kept per file and split by side."""

    def __init__(self):
        self.series: list[np.ndarray] = []
        self.client_logs: list[list] = []
        self.server_logs: list[list] = []

    @property
    def client(self) -> list:
        return [r for recs in self.client_logs for r in recs]

    @property
    def server(self) -> list:
        return [r for recs in self.server_logs for r in recs]

    @property
    def empty(self) -> bool:
        return not any(s.size for s in self.series) and not self.client and not self.server

    def sessions(self):
        """(client_records, server_records) pairs; logs pair up in the order given."""
        clients, servers = self.client_logs, self.server_logs
        if len(clients) <= 1:
            return [(clients[0] if clients else [], s) for s in servers]
        if len(clients) != len(servers):
            raise CliError(EXIT_USAGE, f"{len(clients)} client logs but {len(servers)} server logs; "
                                       "pass one client log per server log, in the same order")
        return list(zip(clients, servers))


def _load_inputs(paths) -> _Inputs:
    inp = _Inputs()
    for p in paths:
        try:
            with open(p) as fh:
                first = fh.readline()
                while first.startswith("#"):
                    first = fh.readline()
        except OSError as exc:
            raise CliError(EXIT_FIT, f"cannot read {p}: {exc}") from exc
        try:
            if first.strip() == "index,time_ms,value":
                inp.series.append(read_series_csv(p))
                continue
            recs = parse_log(p)
        except ValueError as exc:
            raise CliError(EXIT_FIT, str(exc)) from exc
        if any(r.kind == KIND_ECHO for r in recs):
            inp.server_logs.append(recs)
        else:
            inp.client_logs.append(recs)
    return inp


def _rtt_by_csq(inp: _Inputs, csq_bin) -> dict:
    groups = defaultdict(list)
    for s in inp.series:
        groups[csq_bin].extend(s.tolist())
    try:
        for client, server in inp.sessions():
            for _, _, csq, rtt in label_rtts(client, server):
                groups[csq].append(rtt)
    except ProbeError as exc:
        raise CliError(EXIT_FIT, str(exc)) from exc
    if csq_bin is not None:
        groups = {csq_bin: groups.get(csq_bin, [])}
    return {c: np.array(v) for c, v in groups.items() if v}


def _bw_by_csq(inp: _Inputs, csq_bin) -> dict:
    groups = defaultdict(list)
    for s in inp.series:
        groups[csq_bin].extend(s.tolist())
    by_cycle = defaultdict(list)
    for i, recs in enumerate(inp.client_logs):
        for r in recs:
            by_cycle[(i, r.cycle_id)].append(r)
    for recs in by_cycle.values():
        try:
            bw = estimate_bandwidth_from_burst([r for r in recs if r.kind == KIND_BURST])
        except ProbeError as exc:
            raise CliError(EXIT_FIT, str(exc)) from exc
        if bw is not None:
            csq = next((r.csq for r in reversed(recs) if r.csq is not None), None)
            groups[csq].append(bw)
    if csq_bin is not None:
        groups = {csq_bin: groups.get(csq_bin, [])}
    return {c: np.array(v) for c, v in groups.items() if v}


def _series_values(inp: _Inputs, quantity: str) -> np.ndarray:
    if inp.series:
        return np.concatenate(inp.series)
    if quantity == "rtt":
        if not inp.server:
            raise CliError(EXIT_FIT, "RTT analysis needs a server-side log (echo records)")
        return np.array([r for c, sv in inp.sessions() for *_, r in label_rtts(c, sv)])
    return np.concatenate(list(_bw_by_csq(inp, None).values()) or [np.empty(0)])


# --- commands -----------------------------------------------------------------------

def cmd_sample(args) -> int:
    profile = _profile(args.profile)
    seed = _seed(args)
    gen = SeededGenerator(seed)
    try:
        if args.kind == "rtt":
            m = rtt_mixture_params(profile, args.csq, args.mu1)
            values = sample_rtt_series(m, args.n, gen)
            mean, std = mixture_moments(m)
            analytic = f"analytic mean={mean:.4f} std={std:.4f} ms"
            cadence = RTT_CADENCE_MS
        elif args.kind == "bandwidth":
            bm = bandwidth_params(profile, args.csq)
            values = sample_bandwidth_series(bm, args.n, gen)
            tm, ts = truncated_moments(bm)
            analytic = (f"analytic mean={bm.mean:.4f} std={bm.std:.4f} Mbps "
                        f"(truncated at 0: mean={tm:.4f} std={ts:.4f})")
            cadence = BANDWIDTH_CADENCE_MS
        else:
            values = sample_loss(profile, args.n, gen).astype(float)
            p = profile.loss_rate
            analytic = f"analytic mean={p:.6f} std={math.sqrt(p * (1 - p)):.6f}"
            cadence = LOSS_CADENCE_MS
    except ModelError as exc:
        raise CliError(EXIT_MODEL, str(exc)) from exc
    write_series_csv(args.out, values, cadence)
    print(analytic)
    if values.size:
        print(f"empirical mean={values.mean():.4f} std={values.std():.4f} n={values.size}")
    else:
        print("empirical n=0")
    return EXIT_OK


def cmd_fit(args) -> int:
    inp = _load_inputs(args.log)
    if inp.empty:
        raise CliError(EXIT_FIT, "log contains no samples")
    seed = args.seed if args.seed is not None else 0
    try:
        if args.what == "rtt-mixture":
            groups = _rtt_by_csq(inp, args.csq_bin)
            if not groups:
                raise CliError(EXIT_FIT, "no RTT samples for the requested CSQ")
            fits = {}
            for csq in sorted(groups, key=lambda c: (c is None, c)):
                vals = groups[csq]
                if vals.size < 10 * args.k:
                    log.info("skipping CSQ %s: only %d samples", csq, vals.size)
                    continue
                fits[csq] = fit_gmm(vals, args.k, constrained=args.constrained, gen=SeededGenerator(seed))
                r = fits[csq]
                print(f"csq={csq} n={vals.size} weights={np.round(r.weights, 4).tolist()} "
                      f"means={np.round(r.means, 3).tolist()} converged={r.converged}")
            if not fits:
                raise CliError(EXIT_FIT, f"not enough samples to fit k={args.k}")
            write_fit_report(args.out, fits)
            if args.emit_profile:
                bw = {c: (float(v.mean()), float(v.std())) for c, v in _bw_by_csq(inp, None).items()
                      if c is not None}
                labelled = {c: f for c, f in fits.items() if c is not None}
                profile = rebuild_profile(labelled, bw, name="fitted")
                save_profile(profile, args.emit_profile)
        elif args.what in ("moments", "bandwidth"):
            groups = _rtt_by_csq(inp, args.csq_bin) if args.what == "moments" else _bw_by_csq(inp, args.csq_bin)
            groups = {c: v for c, v in groups.items() if c is not None}
            if not groups:
                raise CliError(EXIT_FIT, "no CSQ-labelled samples")
            csqs = sorted(groups)
            means = [float(groups[c].mean()) for c in csqs]
            stds = [float(groups[c].std()) for c in csqs]
            mean_fit = fit_poly(csqs, means, 2 if args.what == "moments" else 1)
            std_fit = fit_poly(csqs, stds, 1)
            with open(args.out, "w") as fh:
                fh.write("csq,n,mean,std,fit_mean,fit_std\n")
                for c, m, s in zip(csqs, means, stds):
                    fh.write(f"{c},{groups[c].size},{m!r},{s!r},{float(mean_fit(c))!r},{float(std_fit(c))!r}\n")
            print(f"mean fit coefficients (ascending): {list(mean_fit.coefficients)}")
            print(f"std fit coefficients (ascending): {list(std_fit.coefficients)}")
        else:
            values = _series_values(inp, args.quantity)
            max_lag = min(args.max_lag, values.size - 1)
            acf = autocorrelation(values, max_lag)
            write_two_column(args.out, ("lag", "acf"), acf.lags.tolist(), [repr(float(v)) for v in acf.values])
            period = detect_period(acf, args.threshold)
            print(f"period: {period if period is not None else 'none'}")
    except FitError as exc:
        raise CliError(EXIT_FIT, str(exc)) from exc
    return EXIT_OK


def _resolve_scenario(spec: str):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        try:
            text = resources.files("ltem.data").joinpath(f"{name}.scenario").read_text()
        except (FileNotFoundError, OSError):
            raise CliError(EXIT_SCENARIO, f"unknown built-in scenario {name!r}") from None
        return parse_scenario(text)
    return load_scenario(spec)


def cmd_emulate(args) -> int:
    try:
        cfg = _resolve_scenario(args.scenario)
        traces = run_scenario(cfg)
    except (ScenarioError, ModelError) as exc:
        raise CliError(EXIT_SCENARIO, str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out / "trace.csv", traces)
    write_summary_csv(out / "summary.csv", traces)
    for uid, tr in sorted(traces.items()):
        rtts = [r for _, r in tr.probe_rtts()]
        desc = f"probe rtt min={min(rtts):.1f} max={max(rtts):.1f} ms" if rtts else "no probes"
        print(f"ue{uid}: {len(tr.events)} packets, {desc}")
    return EXIT_OK


def _print_summaries(records, side):
    sums = summarize_log(records, side=side)
    bws = [s.bandwidth_mbps for s in sums if s.bandwidth_mbps is not None]
    rtts = [r for s in sums for r in s.rtt_ms]
    loss = [s.loss_fraction for s in sums]
    print(f"cycles={len(sums)}"
          + (f" bandwidth_mean={np.mean(bws):.3f} Mbps" if bws else "")
          + (f" rtt_mean={np.mean(rtts):.3f} ms" if rtts else "")
          + (f" loss={np.mean(loss):.4f}" if loss else ""))
    return sums


def _emulated(args):
    from .probe.emulated import run_emulated_session

    try:
        scen = _resolve_scenario(args.over_emulator)
    except (ScenarioError, ModelError) as exc:
        raise CliError(EXIT_SCENARIO, str(exc)) from exc
    ue = scen.ues[0]
    return run_emulated_session(ue.profile, ue.csq, args.cycles, ue.seed,
                                queue_capacity=ue.queue_capacity or scen.queue_capacity,
                                rate_epoch=scen.rate_epoch)


def cmd_probe_server(args) -> int:
    from .probe.net import run_server

    if args.over_emulator:
        _, server = _emulated(args)
        write_log(args.log, server)
        sums = _print_summaries(server, "server")
        if args.summary:
            write_summaries(args.summary, sums)
        return EXIT_OK
    host, port = args.addr
    cfg = ProbeSessionConfig(host=host, port=port, cycles=args.cycles, log_path=args.log)
    try:
        res = run_server(cfg, bind=(host, port), hello_timeout=args.timeout)
    except (ProbeError, OSError) as exc:
        raise CliError(EXIT_NETWORK, str(exc)) from exc
    print(f"sent burst={res.sent[0]} probes={res.sent[1]}")
    sums = _print_summaries(res.records, "server")
    if args.summary:
        write_summaries(args.summary, sums)
    return EXIT_OK


def cmd_probe_client(args) -> int:
    from .probe.net import CsqSource, run_client

    if args.over_emulator:
        client, _ = _emulated(args)
        write_log(args.log, client)
        sums = _print_summaries(client, "client")
        if args.summary:
            write_summaries(args.summary, sums)
        return EXIT_OK
    host, port = args.addr
    cfg = ProbeSessionConfig(host=host, port=port, cycles=args.cycles, log_path=args.log)
    try:
        source = CsqSource(args.csq_source)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        res = run_client(cfg, csq_source=source, connect_timeout=args.timeout)
    except (ProbeError, OSError) as exc:
        raise CliError(EXIT_NETWORK, str(exc)) from exc
    print(f"records={len(res.records)} echoes={res.echoes_sent}")
    sums = _print_summaries(res.records, "client")
    if args.summary:
        write_summaries(args.summary, sums)
    return EXIT_OK


def cmd_analyze(args) -> int:
    inp = _load_inputs(args.log)
    try:
        if args.report == "summaries":
            if inp.series:
                raise CliError(EXIT_FIT, "summaries need probe logs, not a series CSV")
            sums = []
            for recs in inp.client_logs + inp.server_logs:
                sums += summarize_log(recs, side=args.side)
            write_summaries(args.out, sums)
            return EXIT_OK
        values = _series_values(inp, args.quantity)
        if values.size == 0:
            raise CliError(EXIT_FIT, "no samples")
        if args.report == "histogram":
            if not args.bin_width > 0:
                raise CliError(EXIT_USAGE, "bin width must be positive")
            idx = np.floor(values / args.bin_width).astype(np.int64)
            bins, counts = np.unique(idx, return_counts=True)
            write_two_column(args.out, ("bin_start", "count"),
                             [repr(float(b * args.bin_width)) for b in bins], counts.tolist())
        else:
            acf = autocorrelation(values, min(args.max_lag, values.size - 1))
            write_two_column(args.out, ("lag", "acf"), acf.lags.tolist(), [repr(float(v)) for v in acf.values])
    except (FitError, ProbeError) as exc:
        raise CliError(EXIT_FIT, str(exc)) from exc
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltem", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("sample", help="draw RTT, bandwidth or loss series from a profile")
    s.add_argument("--profile", default="builtin:T", help="builtin:T or a profile config path")
    s.add_argument("--csq", type=_csq_arg, required=True)
    s.add_argument("--kind", choices=["rtt", "bandwidth", "loss"], default="rtt")
    s.add_argument("--n", type=_nonneg_int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--mu1", type=float, help="first RTT peak in ms (default: profile value)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("fit", help="fit models from probe logs or series CSVs")
    f.add_argument("--log", action="append", required=True, help="input file; repeat for client+server logs")
    f.add_argument("--what", choices=["rtt-mixture", "moments", "bandwidth", "acf"], required=True)
    f.add_argument("--csq-bin", type=_csq_arg, help="restrict to (or label series input with) this CSQ")
    f.add_argument("--k", type=int, default=4)
    f.add_argument("--constrained", action="store_true", help="tie peaks to the built-in offsets")
    f.add_argument("--quantity", choices=["rtt", "bandwidth"], default="rtt")
    f.add_argument("--max-lag", type=_nonneg_int, default=50)
    f.add_argument("--threshold", type=float, default=DEFAULT_PERIOD_THRESHOLD)
    f.add_argument("--seed", type=int)
    f.add_argument("--emit-profile", help="write a rebuilt operator profile here")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("emulate", help="run a per-UE queue emulation scenario")
    e.add_argument("--scenario", required=True, help="scenario file or builtin:fig5")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_emulate)

    for name, func, default_addr in (("probe-server", cmd_probe_server, "0.0.0.0:5201"),
                                     ("probe-client", cmd_probe_client, "127.0.0.1:5201")):
        q = sub.add_parser(name, help=f"run the measurement {name.split('-')[1]}")
        q.add_argument("--addr", type=_addr, default=_addr(default_addr))
        q.add_argument("--cycles", type=_nonneg_int, default=10)
        q.add_argument("--log", required=True)
        q.add_argument("--summary", help="also write per-cycle summary CSV")
        q.add_argument("--over-emulator", metavar="SCENARIO",
                       help="run both ends in-process over the emulator (first UE of the scenario)")
        q.add_argument("--timeout", type=float, default=5.0 if name == "probe-client" else 30.0)
        if name == "probe-client":
            q.add_argument("--csq-source", help="value:N, N, or exec:/path/to/program")
        q.set_defaults(func=func)

    a = sub.add_parser("analyze", help="export plot-ready CSVs from logs")
    a.add_argument("--log", action="append", required=True)
    a.add_argument("--report", choices=["summaries", "histogram", "acf"], required=True)
    a.add_argument("--quantity", choices=["rtt", "bandwidth"], default="rtt")
    a.add_argument("--side", choices=["auto", "client", "server"], default="auto")
    a.add_argument("--bin-width", type=float, default=1.0)
    a.add_argument("--max-lag", type=_nonneg_int, default=50)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def _setup_logging() -> None:
    level = os.environ.get("LTEM_LOG_LEVEL", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ltem {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
