"""Container for Monte Carlo estimates."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class EstimateReport:
    """A point estimate with its Monte Carlo uncertainty.

    Attributes
    ----------
    estimate : float
        The point estimate.
    std_error : float
        Monte Carlo standard error of ``estimate``.
    ci_low, ci_high : float
        Normal-approximation 95% interval, ``estimate +- 1.96 * std_error``
        unless the producing routine documents otherwise.
    n : int
        Number of Monte Carlo samples behind the estimate.
    seed : int | None
        Seed used to produce the samples, when applicable.
    extra : dict
        Estimator-specific extras (diagnostics, partition tables, ...).
    """

    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    n: int
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_moments(cls, estimate, std_error, n, seed=None, extra=None):
        half = 1.959963984540054 * std_error
        return cls(
            estimate=float(estimate),
            std_error=float(std_error),
            ci_low=float(estimate - half),
            ci_high=float(estimate + half),
            n=int(n),
            seed=seed,
            extra=extra or {},
        )
