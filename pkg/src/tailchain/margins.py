"""Semi-parametric marginal model and the Laplace-scale transform.

The marginal distribution of a series is modelled empirically below a high
threshold u* (plotting positions with averaged ranks for ties, linear
interpolation between order statistics) and by a generalized Pareto tail
above u*.  The two pieces are glued continuously: both equal 1 - p_u at
u*, where p_u is the empirical exceedance probability.

Observed series are mapped to standard Laplace margins,

    x = log(2 F(y))        if F(y) <  1/2
    x = -log(2 (1 - F(y))) if F(y) >= 1/2,

under which the upper tail is unit exponential, P(X > x) = exp(-x)/2 for
x > 0.  Series may consist of several contiguous segments recorded
independently; segment boundaries are preserved by every transformation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .errors import FitError, InputError

__all__ = [
    "RawSeries",
    "LaplaceSeries",
    "MarginalModel",
    "fit_gpd",
    "fit_marginal",
    "threshold_stability_scan",
    "to_laplace",
    "from_laplace",
    "laplace_cdf",
    "laplace_quantile",
    "read_series_csv",
    "write_series_csv",
]

_XI_ZERO = 1e-6


def _validate_series(values, segments):
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise InputError("series values must form a nonempty 1-d array")
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise InputError(f"series contains a non-finite value at index {bad}")
    segments = tuple((int(a), int(b)) for a, b in segments)
    if not segments:
        raise InputError("series needs at least one segment")
    pos = 0
    for a, b in segments:
        if a != pos or b <= a:
            raise InputError(
                f"segments must be contiguous, ordered and nonempty; got {segments}"
            )
        pos = b
    if pos != values.size:
        raise InputError(
            f"segments cover {pos} values but the series has {values.size}"
        )
    return values, segments


@dataclass(frozen=True)
class RawSeries:
    """Observed values on their original scale, split into segments.

    ``segments`` is a tuple of half-open index ranges (start, end) that
    partition ``values`` in order.
    """

    values: np.ndarray
    segments: tuple

    def __post_init__(self):
        values, segments = _validate_series(self.values, self.segments)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segments", segments)

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(values=values, segments=((0, values.size),))

    @property
    def n(self):
        return self.values.size

    def segment_values(self):
        return [self.values[a:b] for a, b in self.segments]


@dataclass(frozen=True)
class LaplaceSeries(RawSeries):
    """A series already on the standard Laplace scale."""


def laplace_cdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.0, 0.5 * np.exp(np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(x, 0.0)))


def laplace_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise InputError("probability levels must lie strictly inside (0, 1)")
    return np.where(p < 0.5, np.log(2.0 * p), -np.log(2.0 * (1.0 - p)))


# ---------------------------------------------------------------------------
# generalized Pareto tail
# ---------------------------------------------------------------------------

def _gpd_nll(theta, y):
    log_sigma, xi = theta
    if not np.isfinite(log_sigma) or abs(log_sigma) > 40.0:
        return np.inf
    if xi <= -1.0 + 1e-8 or xi > 20.0:
        return np.inf
    sigma = np.exp(log_sigma)
    n = y.size
    if abs(xi) < _XI_ZERO:
        return n * log_sigma + np.sum(y) / sigma
    t = 1.0 + xi * y / sigma
    if np.any(t <= 0.0):
        return np.inf
    return n * log_sigma + (1.0 + 1.0 / xi) * np.sum(np.log(t))


def fit_gpd(excesses, n_restarts=5, seed=0):
    """Fit a generalized Pareto distribution to positive excesses.

    Maximizes the likelihood over (log sigma, xi) with a derivative-free
    simplex started from a moment-based point plus ``n_restarts`` jittered
    restarts; xi is constrained to (-1, inf).  Returns
    ``(sigma, xi, (se_sigma, se_xi))`` with standard errors from the
    inverse observed information.
    """
    y = np.asarray(excesses, dtype=float)
    if y.size < 10:
        raise InputError(f"need at least 10 excesses to fit a tail, got {y.size}")
    if np.any(y <= 0.0):
        raise InputError("excesses must be strictly positive")
    rng = np.random.default_rng(seed)
    start = np.array([np.log(np.mean(y)), 0.1])
    starts = [start]
    for _ in range(n_restarts):
        starts.append(start + rng.normal(0.0, [0.5, 0.25]))
    best = None
    # inadmissible candidates score inf; keep the resulting nan compares quiet
    with np.errstate(invalid="ignore"):
        for s in starts:
            res = minimize(
                _gpd_nll,
                s,
                args=(y,),
                method="Nelder-Mead",
                options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 5000, "maxfev": 5000},
            )
            if best is None or res.fun < best.fun:
                best = res
    sigma = float(np.exp(best.x[0]))
    xi = float(best.x[1])
    if not np.isfinite(best.fun):
        raise FitError(
            "tail fit failed: objective not finite at the best point",
            best=(sigma, xi),
            best_value=float(best.fun),
        )
    se = _gpd_std_errors(y, sigma, xi)
    return sigma, xi, se


def _gpd_std_errors(y, sigma, xi):
    def nll_nat(p):
        s, x = p
        if s <= 0:
            return np.inf
        return _gpd_nll(np.array([np.log(s), x]), y)

    h = np.array([max(1e-5 * sigma, 1e-8), 1e-5])
    hess = np.empty((2, 2))
    p0 = np.array([sigma, xi])
    f0 = nll_nat(p0)
    # perturbed points may leave the support (nll = inf); the resulting nan
    # entries are caught below and reported as nan standard errors
    with np.errstate(invalid="ignore"):
        for i in range(2):
            for j in range(2):
                ei = np.zeros(2)
                ej = np.zeros(2)
                ei[i] = h[i]
                ej[j] = h[j]
                if i == j:
                    hess[i, i] = (nll_nat(p0 + ei) - 2.0 * f0 + nll_nat(p0 - ei)) / h[i] ** 2
                else:
                    hess[i, j] = (
                        nll_nat(p0 + ei + ej)
                        - nll_nat(p0 + ei - ej)
                        - nll_nat(p0 - ei + ej)
                        + nll_nat(p0 - ei - ej)
                    ) / (4.0 * h[i] * h[j])
    try:
        cov = np.linalg.inv(hess)
        ses = np.sqrt(np.maximum(np.diag(cov), 0.0))
        if not np.all(np.isfinite(ses)):
            raise np.linalg.LinAlgError
        return float(ses[0]), float(ses[1])
    except np.linalg.LinAlgError:
        return float("nan"), float("nan")


# ---------------------------------------------------------------------------
# marginal model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginalModel:
    """Empirical body below ``threshold`` with a generalized Pareto tail.

    ``body`` holds the sorted observations <= threshold (the threshold
    itself is the top order statistic of the body); ``exceed_prob`` is the
    empirical exceedance probability of the threshold.
    """

    threshold: float
    scale: float
    shape: float
    exceed_prob: float
    body: np.ndarray
    n_total: int
    se_scale: float = float("nan")
    se_shape: float = float("nan")
    source_hash: str | None = None
    _nodes: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        body = np.asarray(self.body, dtype=float)
        if body.size == 0:
            raise InputError("marginal body must be nonempty")
        if np.any(np.diff(body) < 0):
            body = np.sort(body)
        object.__setattr__(self, "body", body)
        if not (0.0 < self.exceed_prob < 1.0):
            raise InputError(f"exceedance probability must be in (0, 1), got {self.exceed_prob}")
        if self.scale <= 0.0:
            raise InputError(f"tail scale must be positive, got {self.scale}")
        if self.shape <= -1.0:
            raise InputError(f"tail shape must exceed -1, got {self.shape}")
        if body[-1] > self.threshold:
            raise InputError("marginal body contains values above the threshold")
        object.__setattr__(self, "_nodes", self._build_nodes())

    def _build_nodes(self):
        """Unique body values with tie-averaged plotting positions, rescaled
        so the threshold maps exactly to 1 - exceed_prob."""
        body = self.body
        n_tot = self.n_total
        uniq, start = np.unique(body, return_index=True)
        counts = np.diff(np.append(start, body.size))
        # averaged rank of each distinct value (1-based)
        avg_rank = start + 0.5 * (counts - 1) + 1.0
        probs = avg_rank / (n_tot + 1.0)
        top = 1.0 - self.exceed_prob
        if uniq[-1] < self.threshold:
            uniq = np.append(uniq, self.threshold)
            probs = np.append(probs, top)
        else:
            probs = probs * (top / probs[-1])
        probs = np.minimum(probs, top)
        if np.any(np.diff(probs) <= 0):
            # enforce strict monotonicity for invertibility
            for i in range(1, probs.size):
                if probs[i] <= probs[i - 1]:
                    probs[i] = np.nextafter(probs[i - 1], 1.0)
        return (uniq, probs)

    @property
    def upper_endpoint(self):
        if self.shape < 0.0:
            return self.threshold - self.scale / self.shape
        return np.inf

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        vals, probs = self._nodes
        out = np.interp(y, vals, probs, left=probs[0], right=probs[-1])
        tail = y > self.threshold
        if np.any(tail):
            out = np.where(tail, 1.0 - self.sf(y), out)
        return out if out.ndim else float(out)

    def sf(self, y):
        """Survival function; exact in the tail (no 1 - cdf cancellation)."""
        y = np.asarray(y, dtype=float)
        z = np.maximum(y - self.threshold, 0.0)
        if abs(self.shape) < _XI_ZERO:
            tail_sf = self.exceed_prob * np.exp(-z / self.scale)
        else:
            t = np.maximum(1.0 + self.shape * z / self.scale, 0.0)
            tail_sf = self.exceed_prob * t ** (-1.0 / self.shape)
        out = np.where(y > self.threshold, tail_sf, 1.0 - self.cdf_body(y))
        return out if out.ndim else float(out)

    def cdf_body(self, y):
        vals, probs = self._nodes
        out = np.interp(np.asarray(y, dtype=float), vals, probs, left=probs[0], right=probs[-1])
        return out

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise InputError("probability levels must lie strictly inside (0, 1)")
        vals, probs = self._nodes
        body_q = np.interp(p, probs, vals, left=vals[0], right=vals[-1])
        sf = 1.0 - p
        if abs(self.shape) < _XI_ZERO:
            tail_q = self.threshold + self.scale * np.log(self.exceed_prob / sf)
        else:
            tail_q = self.threshold + self.scale / self.shape * (
                (self.exceed_prob / sf) ** self.shape - 1.0
            )
        out = np.where(p > 1.0 - self.exceed_prob, tail_q, body_q)
        return out if out.ndim else float(out)

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "scale": self.scale,
            "shape": self.shape,
            "exceed_prob": self.exceed_prob,
            "n_total": self.n_total,
            "se_scale": self.se_scale,
            "se_shape": self.se_shape,
            "source_hash": self.source_hash,
            "body": self.body.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            threshold=float(d["threshold"]),
            scale=float(d["scale"]),
            shape=float(d["shape"]),
            exceed_prob=float(d["exceed_prob"]),
            body=np.asarray(d["body"], dtype=float),
            n_total=int(d["n_total"]),
            se_scale=float(d.get("se_scale", float("nan"))),
            se_shape=float(d.get("se_shape", float("nan"))),
            source_hash=d.get("source_hash"),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_marginal(series, threshold_quantile, seed=0):
    """Fit the semi-parametric marginal model to a series.

    The threshold is the empirical ``threshold_quantile`` order statistic;
    the tail is fitted to the excesses above it.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise InputError(
            f"threshold quantile must be in (0, 1), got {threshold_quantile}"
        )
    values = series.values
    n = values.size
    srt = np.sort(values)
    idx = min(max(int(np.ceil(threshold_quantile * n)) - 1, 0), n - 1)
    u_star = float(srt[idx])
    excesses = values[values > u_star] - u_star
    if excesses.size < 10:
        raise InputError(
            f"only {excesses.size} exceedances above the threshold; need at least 10"
        )
    p_u = excesses.size / n
    sigma, xi, (se_s, se_x) = fit_gpd(excesses, seed=seed)
    body = srt[srt <= u_star]
    return MarginalModel(
        threshold=u_star,
        scale=sigma,
        shape=xi,
        exceed_prob=p_u,
        body=body,
        n_total=n,
        se_scale=se_s,
        se_shape=se_x,
    )


def threshold_stability_scan(series, quantile_grid, seed=0):
    """Tail fits across a grid of candidate thresholds.

    Returns a data frame with one row per candidate quantile: threshold,
    number of exceedances, fitted scale and shape with standard errors,
    and a failure flag with message for candidates that could not be fit.
    """
    rows = []
    for q in quantile_grid:
        row = {"quantile": float(q)}
        try:
            model = fit_marginal(series, float(q), seed=seed)
            row.update(
                threshold=model.threshold,
                n_exceed=int(round(model.exceed_prob * model.n_total)),
                scale=model.scale,
                shape=model.shape,
                se_scale=model.se_scale,
                se_shape=model.se_shape,
                failed=False,
                message="",
            )
        except (InputError, FitError) as exc:
            row.update(
                threshold=float("nan"),
                n_exceed=0,
                scale=float("nan"),
                shape=float("nan"),
                se_scale=float("nan"),
                se_shape=float("nan"),
                failed=True,
                message=str(exc),
            )
        rows.append(row)
    return pd.DataFrame(rows)


def to_laplace(series, model):
    """Transform a raw series to standard Laplace margins."""
    y = series.values
    if model.shape < 0.0:
        guard = model.upper_endpoint * (1.0 + 1e-12)
        if np.any(y > guard):
            bad = float(y[y > guard][0])
            raise InputError(
                f"value {bad} lies beyond the fitted upper endpoint "
                f"{model.upper_endpoint}"
            )
    sf = np.asarray(model.sf(y), dtype=float)
    x = np.where(sf <= 0.5, -np.log(2.0 * sf), np.log(2.0 * (1.0 - sf)))
    return LaplaceSeries(values=x, segments=series.segments)


def from_laplace(x, model):
    """Map Laplace-scale values back to the data scale.

    Values that fall below the lowest plotting position are clamped to the
    smallest observation.
    """
    x = np.asarray(x, dtype=float)
    sf = np.where(x > 0.0, 0.5 * np.exp(-x), 1.0 - 0.5 * np.exp(np.minimum(x, 0.0)))
    tail = sf < model.exceed_prob
    if abs(model.shape) < _XI_ZERO:
        tail_y = model.threshold + model.scale * np.log(model.exceed_prob / np.maximum(sf, 1e-300))
    else:
        tail_y = model.threshold + model.scale / model.shape * (
            (model.exceed_prob / np.maximum(sf, 1e-300)) ** model.shape - 1.0
        )
    vals, probs = model._nodes
    body_y = np.interp(1.0 - sf, probs, vals, left=vals[0], right=vals[-1])
    out = np.where(tail, tail_y, body_y)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# CSV input and output
# ---------------------------------------------------------------------------

def read_series_csv(path, laplace=False):
    """Read a two-column CSV (segment_id, value) into a series.

    Rows are taken in file order; a change of segment_id starts a new
    segment.  Header row required.
    """
    seg_ids = []
    values = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0].strip() != "segment_id":
            raise InputError(
                f"{path}: expected header 'segment_id,value', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise InputError(f"{path}:{lineno}: expected two columns, got {row}")
            try:
                v = float(row[1])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad value {row[1]!r}") from exc
            if not np.isfinite(v):
                raise InputError(f"{path}:{lineno}: non-finite value {row[1]!r}")
            seg_ids.append(row[0])
            values.append(v)
    if not values:
        raise InputError(f"{path}: no data rows")
    values = np.asarray(values, dtype=float)
    segments = []
    start = 0
    for i in range(1, len(seg_ids)):
        if seg_ids[i] != seg_ids[i - 1]:
            segments.append((start, i))
            start = i
    segments.append((start, len(seg_ids)))
    cls = LaplaceSeries if laplace else RawSeries
    return cls(values=values, segments=tuple(segments))


def write_series_csv(path, series):
    """Write a series as a two-column CSV (segment_id, value)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "value"])
        for sid, (a, b) in enumerate(series.segments):
            for v in series.values[a:b]:
                writer.writerow([sid, repr(float(v))])
