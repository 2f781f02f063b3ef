"""Block resampling for dependent series.

Three schemes are provided, each applied independently within every
segment of a series so that resampled values never cross segment
boundaries:

* ``block``: sample with replacement from the non-overlapping blocks of
  length b; the last sampled block is truncated to match the segment
  length.
* ``moving_block``: sample with replacement from all overlapping blocks
  of length b, truncating the last block likewise.
* ``stationary``: blocks with geometric lengths of mean b and uniform
  start positions, wrapping circularly within the segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FitError, InputError
from .report import EstimateReport

__all__ = ["BootstrapScheme", "resample_series", "bootstrap_estimate", "BootstrapResult"]


@dataclass(frozen=True)
class BootstrapScheme:
    """Resampling scheme: ``kind`` in {block, moving_block, stationary},
    block length ``block_length`` (default 20)."""

    kind: str = "moving_block"
    block_length: int = 20

    def __post_init__(self):
        if self.kind not in ("block", "moving_block", "stationary"):
            raise InputError(f"unknown bootstrap scheme {self.kind!r}")
        if self.block_length < 1:
            raise InputError(f"block length must be >= 1, got {self.block_length}")


def _segment_indices(scheme, length, rng):
    b = scheme.block_length
    if b > length:
        raise InputError(
            f"block length {b} exceeds segment length {length}"
        )
    if scheme.kind == "block":
        n_starts = length // b
        n_blocks = -(-length // b)
        starts = rng.integers(0, n_starts, size=n_blocks) * b
        idx = (starts[:, None] + np.arange(b)[None, :]).ravel()[:length]
        return idx
    if scheme.kind == "moving_block":
        n_blocks = -(-length // b)
        starts = rng.integers(0, length - b + 1, size=n_blocks)
        idx = (starts[:, None] + np.arange(b)[None, :]).ravel()[:length]
        return idx
    # stationary: geometric lengths, circular wrap
    pieces = []
    total = 0
    while total < length:
        start = int(rng.integers(0, length))
        ell = int(rng.geometric(1.0 / b))
        ell = min(ell, length - total)
        pieces.append((start + np.arange(ell)) % length)
        total += ell
    return np.concatenate(pieces)


def resample_series(series, scheme, rng=None, seed=None):
    """Resample a series segment by segment, returning the same type."""
    if rng is None:
        rng = np.random.default_rng(np.random.Philox(key=0 if seed is None else seed))
    out = np.empty_like(series.values)
    for a, b in series.segments:
        idx = _segment_indices(scheme, b - a, rng)
        out[a:b] = series.values[a + idx]
    return type(series)(values=out, segments=series.segments)


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate summary: standard error, 2.5%/97.5% percentile interval,
    the replicate values themselves, and how many replicates failed."""

    std_error: float
    ci_low: float
    ci_high: float
    replicates: np.ndarray
    n_failed: int

    def to_report(self, estimate, seed=None):
        return EstimateReport(
            estimate=float(estimate),
            std_error=self.std_error,
            ci_low=self.ci_low,
            ci_high=self.ci_high,
            n=int(self.replicates.shape[0]),
            seed=seed,
            extra={"n_failed": self.n_failed},
        )


def bootstrap_estimate(series, estimator, scheme=None, replications=200, seed=0):
    """Bootstrap an estimator of a series functional.

    ``estimator`` maps a series to a float (or a 1-d vector, in which case
    summaries are per coordinate).  Replicates where the estimator raises
    are dropped; more than 20% failures is an error.
    """
    if replications < 2:
        raise InputError(f"need at least 2 replications, got {replications}")
    scheme = scheme or BootstrapScheme()
    rng = np.random.default_rng(np.random.Philox(key=seed))
    reps = []
    failures = 0
    for _ in range(replications):
        rep = resample_series(series, scheme, rng=rng)
        try:
            reps.append(np.atleast_1d(np.asarray(estimator(rep), dtype=float)))
        except (InputError, FitError, FloatingPointError, np.linalg.LinAlgError):
            failures += 1
    if failures > 0.2 * replications:
        raise InputError(
            f"{failures} of {replications} bootstrap replicates failed"
        )
    reps = np.vstack(reps)
    std = np.std(reps, axis=0, ddof=1)
    lo = np.percentile(reps, 2.5, axis=0)
    hi = np.percentile(reps, 97.5, axis=0)
    scalar = reps.shape[1] == 1
    return BootstrapResult(
        std_error=float(std[0]) if scalar else std,
        ci_low=float(lo[0]) if scalar else lo,
        ci_high=float(hi[0]) if scalar else hi,
        replicates=reps[:, 0] if scalar else reps,
        n_failed=failures,
    )
