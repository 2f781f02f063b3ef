"""Reference processes with known extremal dependence, on Laplace margins.

Three stationary Markov chains are provided for testing and calibration:

* ``gauss_ar1(rho)``: Gaussian AR(1), transformed to Laplace margins.  Its
  conditional-tail location coefficient at lag i is rho**(2 i) and the
  limiting scale exponent is 1/2.
* ``gauss_ar2(theta1, theta2)``: Gaussian AR(2) with unit marginal
  variance, transformed to Laplace margins; the location coefficients
  follow the AR(2) autocorrelation sequence.
* ``inv_logistic(gamma)``: first-order chain whose consecutive pairs have
  an inverted-logistic dependence structure with parameter gamma in
  (0, 1]; asymptotically independent with location coefficient 0 and
  limiting scale exponent 1 - gamma.

All generators stream in fixed-size chunks so that long realizations use
bounded memory, and are bitwise reproducible for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter, lfiltic
from scipy.special import log_ndtr

from .errors import InputError
from .margins import LaplaceSeries
from .report import EstimateReport

__all__ = [
    "GeneratorSpec",
    "generate",
    "inv_logistic_conditional_survival",
    "inv_logistic_joint_survival",
    "inv_logistic_conditional_sample",
    "oracle_conditional_probability",
    "oracle_union_probability",
]

_CHUNK = 1_000_000


def _laplace_from_gauss(y):
    """Exact monotone map from standard normal to standard Laplace."""
    y = np.asarray(y, dtype=float)
    log2 = np.log(2.0)
    upper = y > 0.0
    out = np.empty_like(y)
    out[upper] = -(log2 + log_ndtr(-y[upper]))
    out[~upper] = log2 + log_ndtr(y[~upper])
    return out


def _laplace_from_exponential(y):
    """Exact monotone map from unit exponential to standard Laplace."""
    y = np.asarray(y, dtype=float)
    log2 = np.log(2.0)
    upper = y >= log2
    out = np.empty_like(y)
    out[upper] = y[upper] - log2
    with np.errstate(divide="ignore"):
        out[~upper] = log2 + np.log(-np.expm1(-y[~upper]))
    return out


@dataclass(frozen=True)
class GeneratorSpec:
    """A reference process: ``kind`` with its parameters, length and seed."""

    kind: str
    n: int
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 2:
            raise InputError(f"series length must be >= 2, got {self.n}")
        if self.kind == "gauss_ar1":
            rho = self.params.get("rho")
            if rho is None or not -1.0 < rho < 1.0:
                raise InputError(f"gauss_ar1 needs rho in (-1, 1), got {rho}")
        elif self.kind == "gauss_ar2":
            t1 = self.params.get("theta1")
            t2 = self.params.get("theta2")
            if t1 is None or t2 is None:
                raise InputError("gauss_ar2 needs theta1 and theta2")
            if not (t1 + t2 < 1.0 and t2 - t1 < 1.0 and abs(t2) < 1.0):
                raise InputError(
                    f"({t1}, {t2}) is outside the AR(2) stationarity region"
                )
        elif self.kind == "inv_logistic":
            g = self.params.get("gamma")
            if g is None or not 0.0 < g <= 1.0:
                raise InputError(f"inv_logistic needs gamma in (0, 1], got {g}")
        else:
            raise InputError(f"unknown generator kind {self.kind!r}")


def _gauss_ar1_stream(rho, n, rng):
    """Yield chunks of a stationary Gaussian AR(1) with unit variance."""
    sd = math.sqrt(1.0 - rho * rho)
    a = [1.0, -rho]
    y0 = rng.standard_normal()
    zi = lfiltic([1.0], a, [y0])
    m = min(_CHUNK, n)
    eps = rng.normal(0.0, sd, size=m - 1)
    rest, zi = lfilter([1.0], a, eps, zi=zi)
    yield np.concatenate(([y0], rest))
    produced = m
    while produced < n:
        m = min(_CHUNK, n - produced)
        eps = rng.normal(0.0, sd, size=m)
        chunk, zi = lfilter([1.0], a, eps, zi=zi)
        produced += m
        yield chunk


def _gauss_ar2_stream(theta1, theta2, n, rng):
    rho1 = theta1 / (1.0 - theta2)
    rho2 = theta2 + theta1 * rho1
    sw = math.sqrt(1.0 - theta1 * rho1 - theta2 * rho2)
    # stationary start for the first pair
    z = rng.standard_normal(2)
    y0 = z[0]
    y1 = rho1 * z[0] + math.sqrt(1.0 - rho1 * rho1) * z[1]
    a = [1.0, -theta1, -theta2]
    zi = lfiltic([1.0], a, [y1, y0])
    head = np.array([y0, y1])[: min(2, n)]
    yield head
    produced = head.size
    while produced < n:
        m = min(_CHUNK, n - produced)
        eps = rng.normal(0.0, sw, size=m)
        chunk, zi = lfilter([1.0], a, eps, zi=zi)
        produced += m
        yield chunk


# ---------------------------------------------------------------------------
# inverted-logistic chain (exponential margins internally)
# ---------------------------------------------------------------------------

def inv_logistic_joint_survival(x, y, gamma):
    """Joint survival P(Y_n > x, Y_{n+1} > y) of a consecutive pair,
    unit exponential margins."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.exp(-((x ** (1.0 / gamma) + y ** (1.0 / gamma)) ** gamma))


def inv_logistic_conditional_survival(y, x, gamma):
    """P(Y_{n+1} > y | Y_n = x), obtained analytically as
    exp(x) * (-d/dx joint survival)(x, y)."""
    y = np.asarray(y, dtype=float)
    if x <= 0.0:
        raise InputError(f"conditioning value must be positive, got {x}")
    s = x ** (1.0 / gamma) + y ** (1.0 / gamma)
    t = s**gamma
    return np.exp(x - t) * (t / x) ** (1.0 - 1.0 / gamma)


def _inv_logistic_next(x, u, gamma, tol=1e-12):
    """Solve S(y | x) = u for y by bisection on t = (x^(1/g) + y^(1/g))^g.

    The root equation c*log(t/x) + (t - x) + log(u) = 0 with
    c = 1/gamma - 1 >= 0 is increasing in t and bracketed by
    [x, x - log(u)].
    """
    c = 1.0 / gamma - 1.0
    log_u = math.log(u)
    lo = x
    hi = x - log_u
    if c > 0.0:
        for _ in range(200):
            if hi - lo <= tol * max(1.0, hi):
                break
            mid = 0.5 * (lo + hi)
            f = c * math.log(mid / x) + (mid - x) + log_u
            if f < 0.0:
                lo = mid
            else:
                hi = mid
        t = 0.5 * (lo + hi)
    else:
        t = hi
    inv_g = 1.0 / gamma
    return (t**inv_g - x**inv_g) ** gamma


def inv_logistic_conditional_sample(x, gamma, rng, size):
    """Vectorized draws from the conditional law of the next value given
    the current value ``x`` (exponential scale), by the same bisection."""
    if x <= 0.0:
        raise InputError(f"conditioning value must be positive, got {x}")
    u = rng.uniform(size=size)
    if gamma >= 1.0:
        return -np.log(u)
    c = 1.0 / gamma - 1.0
    log_u = np.log(u)
    lo = np.full(u.shape, float(x))
    hi = x - log_u
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        f = c * np.log(mid / x) + (mid - x) + log_u
        below = f < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    inv_g = 1.0 / gamma
    return (t**inv_g - x ** inv_g) ** gamma


def _inv_logistic_stream(gamma, n, rng):
    produced = 0
    x = float(rng.exponential())
    while produced < n:
        m = min(_CHUNK, n - produced)
        u = rng.uniform(size=m)
        out = np.empty(m)
        if gamma >= 1.0:
            out = -np.log(u)
            if produced == 0:
                out[0] = x
            x = float(out[-1])
        else:
            nxt = _inv_logistic_next
            cur = x
            start = 0
            if produced == 0:
                out[0] = cur
                start = 1
            for i in range(start, m):
                cur = nxt(max(cur, 1e-300), u[i], gamma)
                out[i] = cur
            x = cur
        produced += m
        yield out


def _chunks(spec, rng):
    p = spec.params
    if spec.kind == "gauss_ar1":
        for chunk in _gauss_ar1_stream(p["rho"], spec.n, rng):
            yield _laplace_from_gauss(chunk)
    elif spec.kind == "gauss_ar2":
        for chunk in _gauss_ar2_stream(p["theta1"], p["theta2"], spec.n, rng):
            yield _laplace_from_gauss(chunk)
    else:
        for chunk in _inv_logistic_stream(p["gamma"], spec.n, rng):
            yield _laplace_from_exponential(chunk)


def generate(spec):
    """Realize a reference process as a single-segment Laplace-scale series."""
    rng = np.random.default_rng(np.random.Philox(key=spec.seed))
    values = np.concatenate(list(_chunks(spec, rng)))
    return LaplaceSeries(values=values, segments=((0, spec.n),))


# ---------------------------------------------------------------------------
# direct-simulation oracles
# ---------------------------------------------------------------------------

def _window_max(x, w):
    """out[t] = max(x[t], ..., x[t + w - 1]) for t = 0..len(x)-w."""
    if w == 1:
        return x
    out = x[: x.size - w + 1].copy()
    for s in range(1, w):
        np.maximum(out, x[s : x.size - w + 1 + s], out)
    return out


def oracle_conditional_probability(spec, functional, n_direct, v, d, r=None):
    """Empirical conditional probability from one long realization.

    ``functional`` is one of ``theta``, ``chi``, ``p``: the probability,
    given an exceedance of ``v`` at a time point, that respectively no
    further exceedance occurs in the next d - 1 steps, that time point
    + d exceeds ``v``, or that the window of length d starting at the
    exceedance contains exactly ``r`` exceedances.  Streams the series in
    chunks; the standard error is binomial.
    """
    if functional not in ("theta", "chi", "p"):
        raise InputError(f"unsupported oracle functional {functional!r}")
    if functional == "p" and r is None:
        raise InputError("functional 'p' needs the exceedance count r")
    if d < 1 or (functional == "theta" and d < 2):
        raise InputError(f"window length {d} too short for functional {functional!r}")
    spec = GeneratorSpec(spec.kind, int(n_direct), spec.seed, spec.params)
    rng = np.random.default_rng(np.random.Philox(key=spec.seed))
    w = d + 1 if functional == "chi" else d
    carry = np.empty(0)
    n_cond = 0
    n_hit = 0
    for chunk in _chunks(spec, rng):
        x = np.concatenate((carry, chunk))
        if x.size >= w:
            exceed = x > v
            cond = exceed[: x.size - w + 1]
            if functional == "theta":
                inner = _window_max(x[1:], w - 1) > v
                hits = cond & ~inner[: cond.size]
            elif functional == "chi":
                hits = cond & exceed[w - 1 :]
            else:
                counts = np.convolve(exceed.astype(np.int64), np.ones(w, dtype=np.int64), "valid")
                hits = cond & (counts == int(r))
            n_cond += int(cond.sum())
            n_hit += int(hits.sum())
            carry = x[x.size - w + 1 :]
        else:
            carry = x
    if n_cond == 0:
        raise InputError(f"no exceedances of {v} in {n_direct} simulated values")
    p_hat = n_hit / n_cond
    se = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-300) / n_cond)
    return EstimateReport.from_moments(p_hat, se, n_cond, seed=spec.seed)


def oracle_union_probability(spec, n_direct, v, d):
    """Empirical P(max of a window of length d exceeds v) over all sliding
    windows of one long realization, with binomial standard error."""
    spec = GeneratorSpec(spec.kind, int(n_direct), spec.seed, spec.params)
    rng = np.random.default_rng(np.random.Philox(key=spec.seed))
    carry = np.empty(0)
    n_win = 0
    n_hit = 0
    for chunk in _chunks(spec, rng):
        x = np.concatenate((carry, chunk))
        if x.size >= d:
            wmax = _window_max(x, d)
            n_win += wmax.size
            n_hit += int((wmax > v).sum())
            carry = x[x.size - d + 1 :]
        else:
            carry = x
    p_hat = n_hit / n_win
    se = math.sqrt(max(p_hat * (1.0 - p_hat), 1e-300) / n_win)
    return EstimateReport.from_moments(p_hat, se, n_win, seed=spec.seed)
