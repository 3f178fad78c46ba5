"""Recover link models from measured series.

EM for 1-D Gaussian mixtures (optionally with peaks tied to fixed offsets),
least-squares polynomial fits of moments against CSQ, sample
autocorrelation with period detection, and loss-rate estimation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (
    PROFILE_T,
    CsqValue,
    GaussianComponent,
    OperatorProfile,
    RttMixtureModel,
    RttMomentModel,
    SeededGenerator,
    as_csq,
    mixture_moments,
)

log = logging.getLogger(__name__)

STD_FLOOR = 1e-3
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500
DEFAULT_PERIOD_THRESHOLD = 0.3


class FitError(ValueError):
    pass


class InsufficientSupport(FitError):
    pass


class ConstantSeries(FitError):
    pass


@dataclass
class SampleSet:
    values: np.ndarray
    label: str = ""
    csq: CsqValue | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.csq is not None:
            self.csq = as_csq(self.csq)

    def __len__(self):
        return self.values.size


def _values(samples) -> np.ndarray:
    v = samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    return np.asarray(v, dtype=float).ravel()


@dataclass
class GmmFitResult:
    components: list[GaussianComponent]
    log_likelihood: float
    iterations: int
    converged: bool
    ll_history: list[float] = field(default_factory=list, repr=False)
    # components dropped because their responsibility mass collapsed
    removed_components: int = 0

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def stds(self) -> np.ndarray:
        return np.array([c.std for c in self.components])

    @property
    def k(self) -> int:
        return len(self.components)

    def to_mixture(self, csq) -> RttMixtureModel:
        return RttMixtureModel(components=tuple(self.components), mu1=self.components[0].mean,
                               source_csq=as_csq(csq))


# --- EM -------------------------------------------------------------------

def _log_norm(x, mu, sd):
    # (n, k) log densities
    z = (x[:, None] - mu[None, :]) / sd[None, :]
    return -0.5 * z * z - np.log(sd)[None, :] - 0.5 * math.log(2 * math.pi)


def _e_step(x, w, mu, sd):
    with np.errstate(divide="ignore"):
        lw = np.log(w)
    lp = _log_norm(x, mu, sd) + lw[None, :]
    mx = lp.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(lp - mx).sum(axis=1))
    resp = np.exp(lp - lse[:, None])
    return resp, float(lse.sum())


def _lloyd(x, centers, iters=50):
    centers = np.sort(np.asarray(centers, dtype=float))
    for _ in range(iters):
        bounds = (centers[1:] + centers[:-1]) / 2
        lab = np.searchsorted(bounds, x)
        new = centers.copy()
        for j in range(centers.size):
            sel = x[lab == j]
            if sel.size:
                new[j] = sel.mean()
        new.sort()
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(x.size)]]
    for _ in range(k - 1):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        tot = d2.sum()
        if tot <= 0:
            centers.append(x[rng.integers(x.size)])
        else:
            centers.append(x[np.searchsorted(np.cumsum(d2), rng.random() * tot)])
    return np.array(centers)


def _inertia(x, centers):
    bounds = (centers[1:] + centers[:-1]) / 2
    lab = np.searchsorted(bounds, x)
    return float(((x - centers[lab]) ** 2).sum())


def _init_params(x, centers):
    """Uniform weights, means at the centres, pooled within-cluster std."""
    k = centers.size
    pooled = max(math.sqrt(_inertia(x, centers) / x.size), STD_FLOOR)
    return np.full(k, 1.0 / k), centers.copy(), np.full(k, pooled)


def _run_em(x, w, mu, sd, tol, max_iter, offsets=None):
    n = x.size
    history = []
    resp, ll = _e_step(x, w, mu, sd)
    history.append(ll)
    converged = False
    it = 0
    raw_sd = sd.copy()
    while it < max_iter:
        it += 1
        mass = resp.sum(axis=0)
        if np.any(mass < 1.0):
            # degenerate component; caller drops it and refits
            return dict(w=w, mu=mu, sd=sd, raw_sd=raw_sd, ll=ll, history=history, it=it,
                        converged=False, degenerate=int(np.argmin(mass)))
        w = mass / n
        if offsets is None:
            mu = (resp * x[:, None]).sum(axis=0) / mass
        else:
            # means tied to mu1 + offset: precision-weighted ECM update of mu1
            prec = 1.0 / sd**2
            num = (resp * (x[:, None] - offsets[None, :]) * prec[None, :]).sum()
            den = (mass * prec).sum()
            mu = num / den + offsets
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / mass
        raw_sd = np.sqrt(np.maximum(var, 0.0))
        sd = np.maximum(raw_sd, STD_FLOOR)
        resp, new_ll = _e_step(x, w, mu, sd)
        history.append(new_ll)
        change = abs(new_ll - ll) / max(abs(ll), 1e-300)
        ll = new_ll
        if change < tol:
            converged = True
            break
    return dict(w=w, mu=mu, sd=sd, raw_sd=raw_sd, ll=ll, history=history, it=it,
                converged=converged, degenerate=None)


def fit_gmm(samples, k: int = 4, constrained: bool = False, tol: float = DEFAULT_TOL,
            max_iter: int = DEFAULT_MAX_ITER, gen=0, offsets: Sequence[float] | None = None,
            n_init: int = 10) -> GmmFitResult:
    """Fit a k-component 1-D Gaussian mixture by expectation-maximisation.

    Initial means are 1-D k-means centres: the quantile-spaced start and
    ``n_init - 1`` seeded k-means++ starts are refined by Lloyd iterations and
    the lowest-inertia set is used.
    With ``constrained=True`` component means are ``mu1 + offsets`` and only
    ``mu1``, the weights and the stds are estimated.  A component whose
    responsibility mass drops below one sample is removed and the fit is
    repeated with ``k - 1`` components (counted in ``removed_components``).
    """
    x = _values(samples)
    if k < 1:
        raise FitError("k must be at least 1")
    if x.size < 10 * k:
        raise InsufficientSupport(f"need at least {10 * k} samples for k={k}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise FitError("samples contain non-finite values")
    gen = gen if isinstance(gen, SeededGenerator) else SeededGenerator(gen)
    off = None
    if constrained:
        off = np.asarray(offsets if offsets is not None else PROFILE_T.mean_offsets, dtype=float)
        if off.size != k:
            raise FitError(f"constrained fit needs {k} offsets, got {off.size}")

    centers = _lloyd(x, np.quantile(x, (np.arange(k) + 0.5) / k))
    best = _inertia(x, centers)
    for _ in range(max(0, n_init - 1)):
        c = _lloyd(x, _kmeanspp(x, k, gen.rng))
        score = _inertia(x, c)
        if score < best:
            centers, best = c, score
    return _fit_from(x, centers, k, off, tol, max_iter)


def _fit_from(x, centers, k, off, tol, max_iter):
    removed = 0
    w, mu, sd = _init_params(x, centers)
    if off is not None:
        mu = float(np.min(centers)) + off
    while True:
        r = _run_em(x, w, mu, sd, tol, max_iter, off)
        if r["degenerate"] is None:
            break
        j = r["degenerate"]
        log.info("dropping degenerate component %d (k=%d)", j, w.size)
        removed += 1
        keep = np.arange(w.size) != j
        if keep.sum() == 0:
            raise FitError("all mixture components degenerate")
        w = r["w"][keep] / r["w"][keep].sum()
        mu, sd = r["mu"][keep], r["sd"][keep]
        if off is not None:
            off = off[keep]
    order = np.argsort(r["mu"], kind="stable")
    wts = r["w"][order]
    wts = wts / wts.sum()
    comps = [GaussianComponent(weight=float(min(1.0, wi)), mean=float(m), std=float(s))
             for wi, m, s in zip(wts, r["mu"][order], r["raw_sd"][order])]
    return GmmFitResult(components=comps, log_likelihood=r["ll"], iterations=r["it"],
                        converged=r["converged"], ll_history=r["history"], removed_components=removed)


# --- polynomial fits --------------------------------------------------------

@dataclass(frozen=True)
class PolyFit:
    degree: int
    coefficients: tuple[float, ...]  # ascending: c0 + c1 x + c2 x^2
    residual_rms: float

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), self.coefficients)


def fit_poly(xs, ys, degree: int) -> PolyFit:
    if degree not in (1, 2):
        raise FitError(f"degree must be 1 or 2, got {degree}")
    x = np.array([int(v) if isinstance(v, CsqValue) else v for v in xs], dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise FitError("xs and ys differ in length")
    if np.unique(x).size <= degree:
        raise InsufficientSupport(f"degree {degree} fit needs more than {degree} distinct x values")
    design = np.vander(x, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return PolyFit(degree, tuple(float(c) for c in coef), float(np.sqrt(np.mean(resid**2))))


# --- autocorrelation ----------------------------------------------------------

@dataclass(frozen=True)
class AcfResult:
    lags: np.ndarray
    values: np.ndarray

    @property
    def max_lag(self) -> int:
        return int(self.lags[-1])


def autocorrelation(series, max_lag: int) -> AcfResult:
    """Biased sample autocorrelation (divisor N) for lags 0..max_lag."""
    x = _values(series)
    if max_lag < 0 or x.size <= max_lag:
        raise FitError(f"series of length {x.size} too short for max_lag {max_lag}")
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom <= 0 or not np.isfinite(denom):
        raise ConstantSeries("constant series")
    n = x.size
    if max_lag > 64:
        # FFT path for long lag ranges
        size = 1 << (2 * n - 1).bit_length()
        f = np.fft.rfft(d, size)
        acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    else:
        acov = np.array([np.dot(d[: n - k], d[k:]) for k in range(max_lag + 1)])
    vals = np.clip(acov / denom, -1.0, 1.0)
    vals[0] = 1.0
    return AcfResult(np.arange(max_lag + 1), vals)


def _is_local_max(r, k):
    left = r[k] >= r[k - 1]
    right = k + 1 >= r.size or r[k] >= r[k + 1]
    return left and right


def detect_period(acf: AcfResult, threshold: float = DEFAULT_PERIOD_THRESHOLD) -> int | None:
    """Smallest lag >= 2 that is a strong ACF peak repeating at its multiples."""
    r = np.asarray(acf.values)
    max_lag = r.size - 1
    for k in range(2, max_lag + 1):
        if r[k] < threshold or not _is_local_max(r, k):
            continue
        if all(r[m] >= 0.5 * threshold and _is_local_max(r, m)
               for m in range(2 * k, max_lag + 1, k)):
            return k
    return None


def loss_rate(sent: int, received: int) -> float:
    if sent <= 0:
        raise FitError("no samples")
    if not 0 <= received <= sent:
        raise FitError(f"received {received} outside 0..{sent}")
    return (sent - received) / sent


# --- profile reconstruction ----------------------------------------------------

def rebuild_profile(per_csq_fits: Mapping, per_csq_bw: Mapping, *, per_csq_rtt_moments: Mapping | None = None,
                    name: str = "fitted", loss: float | None = None,
                    template: OperatorProfile = PROFILE_T) -> OperatorProfile:
    """Assemble an operator profile from per-CSQ fits.

    ``per_csq_fits`` maps CSQ to either a 4-component :class:`GmmFitResult`
    or a bare sequence of 4 weights.  Weight fits are linear in CSQ.  When
    full mixtures are given, peak offsets, stds and mu1 are averaged across
    CSQs and RTT moments come from the mixtures; otherwise they are taken
    from ``template``.  ``per_csq_bw`` maps CSQ to (mean, std) in Mbps.
    """
    fits = {as_csq(c).value: f for c, f in per_csq_fits.items()}
    bw = {as_csq(c).value: v for c, v in per_csq_bw.items()}
    if len(fits) < 3 or len(bw) < 3:
        raise InsufficientSupport("need at least 3 distinct CSQ values for weights and bandwidth")

    csqs = sorted(fits)
    weight_rows = []
    mixtures = []
    for c in csqs:
        f = fits[c]
        if hasattr(f, "components"):
            if len(f.components) != 4:
                raise FitError(f"fit at CSQ {c} has {len(f.components)} components, need 4")
            mixtures.append(f)
            weight_rows.append(list(f.weights))
        else:
            weight_rows.append([float(v) for v in f])
    weights = np.array(weight_rows)
    if weights.shape[1] != 4:
        raise FitError("weight vectors must have 4 entries")

    weight_fits = []
    for i in range(4):
        p = fit_poly(csqs, weights[:, i], 1)
        weight_fits.append((p.coefficients[1], p.coefficients[0]))

    if mixtures and len(mixtures) == len(csqs):
        means = np.array([m.means for m in mixtures])
        offsets = tuple(float(v) for v in (means - means[:, :1]).mean(axis=0))
        stds = tuple(float(v) for v in np.array([m.stds for m in mixtures]).mean(axis=0))
        mu1 = float(means[:, 0].mean())
    else:
        offsets, stds, mu1 = template.mean_offsets, template.component_stds, template.default_mu1

    if per_csq_rtt_moments is None and mixtures and len(mixtures) == len(csqs):
        per_csq_rtt_moments = {c: mixture_moments(m) for c, m in zip(csqs, mixtures)}
    if per_csq_rtt_moments:
        mom = {as_csq(c).value: v for c, v in per_csq_rtt_moments.items()}
        mc = sorted(mom)
        mean_fit = fit_poly(mc, [mom[c][0] for c in mc], 2)
        std_fit = fit_poly(mc, [mom[c][1] for c in mc], 1)
        moment_model = RttMomentModel(mean_fit.coefficients, std_fit.coefficients)
    else:
        moment_model = template.rtt_moment_fit

    bc = sorted(bw)
    bw_mean = fit_poly(bc, [bw[c][0] for c in bc], 1)
    bw_std = fit_poly(bc, [bw[c][1] for c in bc], 1)

    return OperatorProfile(
        name=name,
        weight_fits=tuple(weight_fits),
        mean_offsets=offsets,
        component_stds=stds,
        default_mu1=mu1,
        bandwidth_mean_fit=bw_mean.coefficients,
        bandwidth_std_fit=bw_std.coefficients,
        rtt_moment_fit=moment_model,
        loss_rate=template.loss_rate if loss is None else loss,
    )


# --- reports -------------------------------------------------------------------

def write_fit_report(path, rows: Mapping[int, GmmFitResult]) -> None:
    """CSV with one row per CSQ: ``csq,w1..wk,mu1,sigma1..sigmak,loglik``."""
    k = max((r.k for r in rows.values()), default=4)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["csq", *[f"w{i}" for i in range(1, k + 1)], "mu1",
                    *[f"sigma{i}" for i in range(1, k + 1)], "loglik"])
        for csq in sorted(rows, key=lambda c: (c is None, c)):
            r = rows[csq]
            pad = [""] * (k - r.k)
            w.writerow(["" if csq is None else csq, *map(repr, r.weights.tolist()), *pad,
                        repr(float(r.means[0])), *map(repr, r.stds.tolist()), *pad,
                        repr(r.log_likelihood)])


def write_two_column(path, header: tuple[str, str], xs, ys) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, b in zip(xs, ys):
            w.writerow([a, b])
