"""Extremal block functionals: definition, evaluation, and estimation.

A functional is a scalar summary of a block X_{1:d} around an extreme
event, expressed as E{g(X_{1:d}) | X_1 > v} (or, for ``pstar``,
conditional on at least one exceedance anywhere in the block).  The
built-in catalogue:

======================  =====================================================
``theta(v, d)``         P(X_2 <= v, ..., X_d <= v | X_1 > v)
``chi(v, d)``           P(X_{1+d} > v | X_1 > v)
``e1(v, d)``            E(max X_{1:d} | X_1 > v)
``e2(v, d)``            E(mean X_{1:d} | X_1 > v)
``e3(v, d)``            E(#{i : X_i > v} | X_1 > v)
``p(v, d, r)``          P(#exceedances = r | X_1 > v)
``pstar(v, d, r)``      P(#exceedances = r | max X_{1:d} > v)
``max_exceed(s)``       P(max X_{1:d} > s | X_1 > v)
``total_exceed(s)``     P(#exceedances >= s | X_1 > v)
``consec_exceed(s)``    P(>= s consecutive exceedances in the block | X_1 > v)
======================  =====================================================

``v`` and the blocks live on the Laplace scale.  Kinds whose value
depends on the measurement scale (``e1``, ``e2``, ``max_exceed``) accept
``scale="data"``, in which case whole blocks are mapped back to the data
scale through a fitted marginal model before evaluation; count- and
probability-of-count kinds are invariant under the monotone marginal
transform and only accept ``scale="laplace"``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError
from .margins import from_laplace
from .report import EstimateReport
from .resample import BootstrapScheme, bootstrap_estimate
from .simulate import aloe_conditional_expectation, estimate_conditional

__all__ = [
    "FunctionalSpec",
    "Cluster",
    "evaluate_functional",
    "estimate_functional",
    "empirical_functional",
    "extract_clusters",
]

_KINDS = (
    "theta", "chi", "e1", "e2", "e3", "p", "pstar",
    "max_exceed", "total_exceed", "consec_exceed",
)
_DATA_SCALE_OK = ("e1", "e2", "max_exceed")
_NEEDS_R = ("p", "pstar")
_NEEDS_S = ("max_exceed", "total_exceed", "consec_exceed")


@dataclass(frozen=True)
class FunctionalSpec:
    """A block functional from the built-in catalogue.

    ``v`` is the conditioning threshold (Laplace scale), ``d`` the block
    length, ``r`` an exceedance count for ``p``/``pstar``, ``s`` the
    level (``max_exceed``) or run/count length (``total_exceed``,
    ``consec_exceed``).
    """

    kind: str
    v: float
    d: int
    r: int | None = None
    s: float | None = None
    scale: str = "laplace"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InputError(f"unknown functional kind {self.kind!r}")
        if not np.isfinite(self.v):
            raise InputError(f"threshold must be finite, got {self.v}")
        dmin = 2 if self.kind == "theta" else 1
        if self.d < dmin:
            raise InputError(f"{self.kind} needs block length >= {dmin}, got {self.d}")
        if self.kind in _NEEDS_R:
            if self.r is None or not (1 <= self.r <= self.d):
                raise InputError(f"{self.kind} needs a count r in 1..{self.d}, got {self.r}")
        elif self.r is not None:
            raise InputError(f"{self.kind} takes no count parameter r")
        if self.kind in _NEEDS_S:
            if self.s is None:
                raise InputError(f"{self.kind} needs a level parameter s")
            if self.kind != "max_exceed":
                if self.s != int(self.s) or not (1 <= self.s <= self.d):
                    raise InputError(
                        f"{self.kind} needs an integer run length in 1..{self.d}, got {self.s}"
                    )
        elif self.s is not None:
            raise InputError(f"{self.kind} takes no level parameter s")
        if self.scale not in ("laplace", "data"):
            raise InputError(f"unknown scale {self.scale!r}")
        if self.scale == "data" and self.kind not in _DATA_SCALE_OK:
            raise InputError(
                f"{self.kind} is invariant under the marginal transform; use scale='laplace'"
            )

    @property
    def window_length(self):
        """Block length the kernel consumes (d + 1 for chi, which reads lag d)."""
        return self.d + 1 if self.kind == "chi" else self.d

    def label(self):
        bits = [f"v={self.v:.6g}", f"d={self.d}"]
        if self.r is not None:
            bits.append(f"r={self.r}")
        if self.s is not None:
            bits.append(f"s={self.s:.6g}")
        if self.scale != "laplace":
            bits.append("scale=data")
        return f"{self.kind}({', '.join(bits)})"


def _longest_run(exceed):
    """Longest run of consecutive True values per row of a boolean matrix."""
    run = np.zeros(exceed.shape[0])
    best = np.zeros(exceed.shape[0])
    for col in range(exceed.shape[1]):
        run = (run + 1.0) * exceed[:, col]
        np.maximum(best, run, out=best)
    return best


def _kernel_matrix(x, spec, marginal=None):
    """Evaluate the kernel g on a matrix of blocks (one value per row)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.window_length:
        raise InputError(
            f"{spec.kind} expects blocks of length {spec.window_length}, "
            f"got shape {x.shape}"
        )
    v = spec.v
    if spec.scale == "data":
        if marginal is None:
            raise InputError(f"scale='data' needs a fitted marginal model for {spec.kind}")
        y = from_laplace(x, marginal)
    kind = spec.kind
    if kind == "theta":
        return np.all(x[:, 1:] <= v, axis=1).astype(float)
    if kind == "chi":
        return (x[:, -1] > v).astype(float)
    if kind == "e1":
        return (y if spec.scale == "data" else x).max(axis=1)
    if kind == "e2":
        return (y if spec.scale == "data" else x).mean(axis=1)
    if kind == "e3":
        return (x > v).sum(axis=1).astype(float)
    if kind in ("p", "pstar"):
        return ((x > v).sum(axis=1) == spec.r).astype(float)
    if kind == "max_exceed":
        vals = y if spec.scale == "data" else x
        return (vals.max(axis=1) > spec.s).astype(float)
    if kind == "total_exceed":
        return ((x > v).sum(axis=1) >= spec.s).astype(float)
    # consec_exceed
    return (_longest_run(x > v) >= spec.s).astype(float)


def evaluate_functional(block, spec, marginal=None):
    """Evaluate the kernel of ``spec`` on a single block (pure, no MC).

    The block must have length ``spec.window_length`` (``d``, or ``d + 1``
    for ``chi``).
    """
    block = np.asarray(block, dtype=float)
    if block.ndim != 1:
        raise InputError(f"expected a single block vector, got shape {block.shape}")
    return float(_kernel_matrix(block[None, :], spec, marginal)[0])


def estimate_functional(fit, spec, config, marginal=None, rng=None):
    """Monte Carlo estimate of a functional under a fitted model.

    ``config`` supplies the sample count, seed, and residual source; the
    threshold and block length are taken from ``spec`` (``chi`` simulates
    one extra step).  Conditional-on-first kinds use forward simulation;
    ``pstar`` conditions on an exceedance anywhere and uses the
    union-mixture ratio estimator, which requires a backward-forward (or
    symmetric parametric) fit.
    """
    cfg = replace(config, v=spec.v, d=spec.window_length)
    kern = lambda blocks: _kernel_matrix(blocks, spec, marginal)
    if spec.kind == "pstar":
        report = aloe_conditional_expectation(fit, cfg, kern, rng=rng)
    else:
        report = estimate_conditional(fit, cfg, kern, rng=rng)
    return replace(report, extra={**report.extra, "functional": spec.label()})


def _segment_window_values(series, spec, marginal):
    """Kernel values and eligibility over all in-segment windows."""
    w = spec.window_length
    vals = []
    for y in series.segment_values():
        if y.size < w:
            continue
        windows = sliding_window_view(y, w)
        if spec.kind == "pstar":
            keep = (windows > spec.v).any(axis=1)
        else:
            keep = windows[:, 0] > spec.v
        if not np.any(keep):
            continue
        vals.append(_kernel_matrix(windows[keep], spec, marginal))
    if not vals:
        return np.empty(0)
    return np.concatenate(vals)


def _empirical_point(series, spec, marginal):
    vals = _segment_window_values(series, spec, marginal)
    if vals.size == 0:
        cond = "window with an exceedance" if spec.kind == "pstar" else "exceedance window"
        raise InputError(
            f"no eligible {cond} above v={spec.v:.6g} "
            f"(window length {spec.window_length})"
        )
    return float(vals.mean()), int(vals.size)


def empirical_functional(series, spec, marginal=None, scheme=None,
                         replications=200, seed=0):
    """Sample-average estimate of a functional from an observed series.

    Windows never cross segment boundaries; windows that do not fit are
    dropped.  The standard error comes from a block bootstrap of the
    series (moving blocks of length 20 unless ``scheme`` says otherwise);
    ``replications=0`` skips it.
    """
    point, n_used = _empirical_point(series, spec, marginal)
    if n_used < 20:
        warnings.warn(
            f"only {n_used} eligible windows for {spec.label()}; "
            "the estimate may be unstable",
            stacklevel=2,
        )
    if replications == 0:
        return EstimateReport.from_moments(point, float("nan"), n_used, seed=seed,
                                           extra={"functional": spec.label()})
    scheme = scheme or BootstrapScheme()
    boot = bootstrap_estimate(
        series,
        lambda s: _empirical_point(s, spec, marginal)[0],
        scheme=scheme,
        replications=replications,
        seed=seed,
    )
    report = boot.to_report(point, seed=seed)
    return replace(report, n=n_used,
                   extra={**report.extra, "functional": spec.label()})


# ---------------------------------------------------------------------------
# runs-method clusters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cluster:
    """A runs-method cluster from one simulated block.

    ``values`` runs from the initial exceedance up to the last exceedance
    before ``run_length`` consecutive non-exceedances; ``terminated`` is
    False when the block ended first (enlarge the horizon k if that
    happens often).
    """

    index: int
    values: np.ndarray
    run_length: int
    terminated: bool

    @property
    def length(self):
        return int(self.values.size)


def extract_clusters(blocks, v, run_length):
    """Cut forward-simulated blocks into runs-method clusters.

    Each block must start with an exceedance of ``v`` (forward simulation
    guarantees this).  A cluster ends at the last exceedance before the
    first run of ``run_length`` consecutive values at or below ``v``.
    """
    if run_length < 1:
        raise InputError(f"run length must be >= 1, got {run_length}")
    x = np.atleast_2d(np.asarray(blocks, dtype=float))
    n, d = x.shape
    if np.any(x[:, 0] <= v):
        raise InputError("every block must start with an exceedance of v")
    exceed = x > v
    if run_length <= d:
        calm = sliding_window_view(~exceed, run_length, axis=1).all(axis=2)
        has_run = calm.any(axis=1)
        first_run = np.argmax(calm, axis=1)
    else:
        has_run = np.zeros(n, dtype=bool)
        first_run = np.zeros(n, dtype=int)
    last_exceed = d - 1 - np.argmax(exceed[:, ::-1], axis=1)
    out = []
    for i in range(n):
        if has_run[i]:
            # by minimality of the run start, the preceding value exceeds
            out.append(Cluster(i, x[i, : first_run[i]].copy(), run_length, True))
        else:
            out.append(Cluster(i, x[i, : last_exceed[i] + 1].copy(), run_length, False))
    return out
