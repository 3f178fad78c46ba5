"""Empirical LTE link model: CSQ -> RTT mixture / bandwidth distribution.

All numbers for the built-in operator ``T`` profile come from a measurement
campaign over a commercial LTE network.  RTT is a 4-component Gaussian
mixture whose first peak floats around 35 ms and whose remaining peaks sit at
fixed offsets; the mixture weights are linear in CSQ.  Downlink bandwidth over
1 s intervals is a Gaussian truncated to be non-negative, with mean and std
linear in CSQ.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSQ_MIN = 0
CSQ_MAX = 31
# range over which the built-in fits were measured
CSQ_OBSERVED = (10, 31)

RTT_CADENCE_MS = 50.0
BANDWIDTH_CADENCE_MS = 1000.0
LOSS_CADENCE_MS = 50.0


class ModelError(ValueError):
    """Invalid model parameters or a degenerate model evaluation."""


@dataclass(frozen=True, order=True)
class CsqValue:
    value: int

    def __post_init__(self):
        if isinstance(self.value, bool) or int(self.value) != self.value:
            raise ModelError(f"CSQ must be an integer, got {self.value!r}")
        if not CSQ_MIN <= self.value <= CSQ_MAX:
            raise ModelError(f"CSQ {self.value} outside {CSQ_MIN}..{CSQ_MAX}")
        object.__setattr__(self, "value", int(self.value))

    @property
    def extrapolated(self) -> bool:
        lo, hi = CSQ_OBSERVED
        return not lo <= self.value <= hi

    def __int__(self):
        return self.value


def as_csq(csq) -> CsqValue:
    return csq if isinstance(csq, CsqValue) else CsqValue(csq)


def csq_to_rssi(csq) -> int:
    """RSSI in dBm for a modem CSQ report (0 -> -113 dBm, 31 -> -51 dBm)."""
    return -113 + 2 * as_csq(csq).value


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: float
    std: float

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ModelError(f"component weight {self.weight} outside [0, 1]")
        if self.std < 0:
            raise ModelError(f"component std {self.std} is negative")


@dataclass(frozen=True)
class RttMixtureModel:
    """Four-component Gaussian mixture for link-layer RTT (milliseconds)."""

    components: tuple[GaussianComponent, ...]
    mu1: float
    source_csq: CsqValue
    # weights before clamping/renormalisation, kept for inspection
    raw_weights: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != 4:
            raise ModelError(f"RTT mixture needs exactly 4 components, got {len(comps)}")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-9:
            raise ModelError(f"mixture weights sum to {total}, expected 1")
        means = [c.mean for c in comps]
        if any(b <= a for a, b in zip(means, means[1:])):
            raise ModelError(f"component means must be strictly increasing: {means}")

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def stds(self) -> np.ndarray:
        return np.array([c.std for c in self.components])


@dataclass(frozen=True)
class RttMomentModel:
    """Quadratic mean and linear std of RTT as functions of CSQ."""

    mean_coeffs: tuple[float, float, float]
    std_coeffs: tuple[float, float]


@dataclass(frozen=True)
class BandwidthModel:
    mean: float
    std: float
    source_csq: CsqValue | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", max(0.0, float(self.mean)))
        object.__setattr__(self, "std", max(0.0, float(self.std)))


@dataclass(frozen=True)
class OperatorProfile:
    name: str
    # (slope, intercept) per component: w_i = a_i * CSQ + b_i
    weight_fits: tuple[tuple[float, float], ...]
    mean_offsets: tuple[float, ...]
    component_stds: tuple[float, ...]
    default_mu1: float
    # ascending polynomial coefficients (c0, c1)
    bandwidth_mean_fit: tuple[float, float]
    bandwidth_std_fit: tuple[float, float]
    rtt_moment_fit: RttMomentModel
    loss_rate: float = 0.0035

    def __post_init__(self):
        for name in ("weight_fits", "mean_offsets", "component_stds"):
            if len(getattr(self, name)) != 4:
                raise ModelError(f"profile {name} must have 4 entries")
        object.__setattr__(self, "weight_fits", tuple(tuple(map(float, p)) for p in self.weight_fits))
        offsets = tuple(float(o) for o in self.mean_offsets)
        object.__setattr__(self, "mean_offsets", offsets)
        object.__setattr__(self, "component_stds", tuple(float(s) for s in self.component_stds))
        if offsets[0] != 0.0:
            raise ModelError("first mean offset must be 0")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ModelError(f"mean offsets must be strictly increasing: {offsets}")
        if any(s < 0 for s in self.component_stds):
            raise ModelError("component stds must be non-negative")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ModelError(f"loss rate {self.loss_rate} outside [0, 1]")

    def raw_weights(self, csq) -> tuple[float, ...]:
        c = as_csq(csq).value
        return tuple(a * c + b for a, b in self.weight_fits)


PROFILE_T = OperatorProfile(
    name="T",
    weight_fits=((0.0079, -0.1285), (0.0430, -0.3834), (-0.0059, 0.3244), (-0.0096, 0.2937)),
    mean_offsets=(0.0, 9.6, 19.4, 28.5),
    component_stds=(0.02, 0.03, 0.04, 0.04),
    default_mu1=35.0,
    bandwidth_mean_fit=(0.13, 0.55),
    bandwidth_std_fit=(-1.17, 0.31),
    rtt_moment_fit=RttMomentModel(mean_coeffs=(177.69, -9.11, 0.158), std_coeffs=(97.21, -3.17)),
    loss_rate=0.0035,
)

BUILTIN_PROFILES = {"T": PROFILE_T}


def fixed_profile(bandwidth_mbps: float, rtt_ms: float, loss_rate: float = 0.0,
                  name: str = "fixed") -> OperatorProfile:
    """Profile with zero variance everywhere: constant bandwidth and RTT at every CSQ."""
    return OperatorProfile(
        name=name,
        weight_fits=((0.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
        mean_offsets=PROFILE_T.mean_offsets,
        component_stds=(0.0, 0.0, 0.0, 0.0),
        default_mu1=rtt_ms,
        bandwidth_mean_fit=(bandwidth_mbps, 0.0),
        bandwidth_std_fit=(0.0, 0.0),
        rtt_moment_fit=RttMomentModel((rtt_ms, 0.0, 0.0), (0.0, 0.0)),
        loss_rate=loss_rate,
    )


class SeededGenerator:
    """Reproducible random stream; a thin owner of a numpy PCG64 generator.

    Not safe for unsynchronised sharing between threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, stream: int) -> "SeededGenerator":
        """Independent generator for a named sub-stream of this seed."""
        child = SeededGenerator.__new__(SeededGenerator)
        child.seed = self.seed
        child.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, stream])))
        return child

    def random(self, n: int) -> np.ndarray:
        return self.rng.random(n)

    def standard_normal(self, n: int) -> np.ndarray:
        return self.rng.standard_normal(n)


def _generator(gen) -> SeededGenerator:
    return gen if isinstance(gen, SeededGenerator) else SeededGenerator(gen)


def rtt_mixture_params(profile: OperatorProfile, csq, mu1: float | None = None) -> RttMixtureModel:
    csq = as_csq(csq)
    if mu1 is None:
        mu1 = profile.default_mu1
    raw = profile.raw_weights(csq)
    clamped = [max(0.0, w) for w in raw]
    total = sum(clamped)
    if total <= 0.0:
        raise ModelError(f"degenerate mixture: all weights non-positive at CSQ {csq.value}")
    weights = [w / total for w in clamped]
    comps = tuple(
        GaussianComponent(weight=w, mean=mu1 + off, std=s)
        for w, off, s in zip(weights, profile.mean_offsets, profile.component_stds)
    )
    return RttMixtureModel(components=comps, mu1=float(mu1), source_csq=csq, raw_weights=tuple(raw))


def rtt_moments(model: RttMomentModel, csq) -> tuple[float, float]:
    c = as_csq(csq).value
    c0, c1, c2 = model.mean_coeffs
    d0, d1 = model.std_coeffs
    return c0 + c1 * c + c2 * c * c, max(0.0, d0 + d1 * c)


def mixture_moments(m) -> tuple[float, float]:
    """Analytic mean and std of a Gaussian mixture.

    Accepts anything exposing ``weights``, ``means`` and ``stds``.
    """
    w = np.asarray(m.weights, dtype=float)
    mu = np.asarray(m.means, dtype=float)
    sd = np.asarray(m.stds, dtype=float)
    mean = float(np.dot(w, mu))
    var = float(np.dot(w, sd**2 + mu**2)) - mean**2
    return mean, math.sqrt(max(var, 0.0))


def sample_rtt_series(m: RttMixtureModel, n: int, gen) -> np.ndarray:
    """Draw ``n`` i.i.d. RTT values (ms); negative draws are redrawn."""
    gen = _generator(gen)
    n = int(n)
    if n < 0:
        raise ModelError("sample count must be non-negative")
    cum = np.cumsum(m.weights)
    means, stds = m.means, m.stds
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        u = gen.random(todo.size)
        idx = np.searchsorted(cum, u * cum[-1], side="right")
        z = gen.standard_normal(todo.size)
        x = means[idx] + stds[idx] * z
        out[todo] = x
        todo = todo[x < 0]
    return out


def bandwidth_params(profile: OperatorProfile, csq) -> BandwidthModel:
    csq = as_csq(csq)
    c = csq.value
    m0, m1 = profile.bandwidth_mean_fit
    s0, s1 = profile.bandwidth_std_fit
    return BandwidthModel(mean=m0 + m1 * c, std=s0 + s1 * c, source_csq=csq)


def sample_bandwidth_series(bm: BandwidthModel, n: int, gen) -> np.ndarray:
    """Draw ``n`` non-negative bandwidth values (Mbps) by rejection.

    The output equals taking the first ``n`` non-negative values of a single
    normal stream, so one call with ``n`` matches ``n`` calls with 1.
    """
    gen = _generator(gen)
    n = int(n)
    if n < 0:
        raise ModelError("sample count must be non-negative")
    parts = []
    need = n
    while need:
        x = bm.mean + bm.std * gen.standard_normal(need)
        x = x[x >= 0]
        parts.append(x)
        need -= x.size
    return np.concatenate(parts) if parts else np.empty(0)


def truncated_moments(bm: BandwidthModel) -> tuple[float, float]:
    """Mean and std of N(mean, std) conditioned on being non-negative."""
    if bm.std == 0:
        return bm.mean, 0.0
    a = -bm.mean / bm.std
    pdf = math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    tail = 0.5 * math.erfc(a / math.sqrt(2))
    lam = pdf / tail
    mean = bm.mean + bm.std * lam
    var = bm.std**2 * (1 + a * lam - lam**2)
    return mean, math.sqrt(max(var, 0.0))


def sample_loss(profile: OperatorProfile, n: int, gen) -> np.ndarray:
    gen = _generator(gen)
    n = int(n)
    if n < 0:
        raise ModelError("sample count must be non-negative")
    return gen.random(n) < profile.loss_rate


# --- persistence ----------------------------------------------------------

_SECTION = "profile"


def _floats(text: str, count: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if count is not None and len(vals) != count:
        raise ModelError(f"expected {count} values, got {len(vals)} in {text!r}")
    return vals


def profile_to_text(p: OperatorProfile) -> str:
    def fmt(vals: Iterable[float]) -> str:
        return ", ".join(repr(float(v)) for v in vals)

    lines = [f"name = {p.name}"]
    for i, (a, _) in enumerate(p.weight_fits, 1):
        lines.append(f"a{i} = {a!r}")
    for i, (_, b) in enumerate(p.weight_fits, 1):
        lines.append(f"b{i} = {b!r}")
    lines += [
        f"offsets = {fmt(p.mean_offsets)}",
        f"stds = {fmt(p.component_stds)}",
        f"mu1 = {p.default_mu1!r}",
        f"bw_mean_fit = {fmt(p.bandwidth_mean_fit)}",
        f"bw_std_fit = {fmt(p.bandwidth_std_fit)}",
        f"rtt_mean_fit = {fmt(p.rtt_moment_fit.mean_coeffs)}",
        f"rtt_std_fit = {fmt(p.rtt_moment_fit.std_coeffs)}",
        f"loss_rate = {p.loss_rate!r}",
    ]
    return "\n".join(lines) + "\n"


def profile_from_text(text: str) -> OperatorProfile:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ModelError(f"malformed profile: {exc}") from exc
    s = cp[_SECTION]
    try:
        return OperatorProfile(
            name=s.get("name", "custom"),
            weight_fits=tuple((float(s[f"a{i}"]), float(s[f"b{i}"])) for i in range(1, 5)),
            mean_offsets=_floats(s["offsets"], 4),
            component_stds=_floats(s["stds"], 4),
            default_mu1=float(s["mu1"]),
            bandwidth_mean_fit=_floats(s["bw_mean_fit"], 2),
            bandwidth_std_fit=_floats(s["bw_std_fit"], 2),
            rtt_moment_fit=RttMomentModel(_floats(s["rtt_mean_fit"], 3), _floats(s["rtt_std_fit"], 2)),
            loss_rate=float(s.get("loss_rate", "0.0035")),
        )
    except KeyError as exc:
        raise ModelError(f"profile missing key {exc.args[0]}") from exc
    except ValueError as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed profile value: {exc}") from exc


def save_profile(p: OperatorProfile, path) -> None:
    Path(path).write_text(profile_to_text(p))


def load_profile(spec: str) -> OperatorProfile:
    """Resolve ``builtin:NAME`` or a path to a profile config file."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        try:
            return BUILTIN_PROFILES[name]
        except KeyError:
            raise ModelError(f"unknown built-in profile {name!r}") from None
    try:
        text = Path(spec).read_text()
    except OSError as exc:
        raise ModelError(f"cannot read profile {spec}: {exc}") from exc
    return profile_from_text(text)


def write_series_csv(path, values: Sequence[float], cadence_ms: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "time_ms", "value"])
        for i, v in enumerate(values):
            w.writerow([i, repr(i * cadence_ms), repr(float(v))])


def read_series_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["index", "time_ms", "value"]:
            raise ValueError(f"{path}: not a series CSV (header {header})")
        vals = []
        for lineno, row in enumerate(r, 2):
            try:
                vals.append(float(row[2]))
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed series row {row}") from None
    return np.array(vals)


def with_widened_stds(profile: OperatorProfile, std: float) -> OperatorProfile:
    return replace(profile, component_stds=(std,) * 4)
