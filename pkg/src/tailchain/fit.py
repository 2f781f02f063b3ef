"""Composite-likelihood fitting of conditional tail models.

For every exceedance x_t > u of a Laplace-scale series, the values at lags
1..k (and, for backward-forward fits, lags -1..-k) form a block.  Under the
working assumption that the standardized residuals

    z_{t,i} = (x_{t+i} - a_i(x_t)) / b_i(x_t)

are independent draws from per-lag delta-Laplace distributions, the
composite negative log likelihood over all blocks and lags is minimized.

Two estimation modes are provided:

* semi-parametric: derivative-free search over the norming parameters
  (lag structure and beta), with the per-lag nuisance parameters profiled
  out by inner delta-Laplace maximum likelihood (or closed-form Gaussian
  moments when ``working_margin="gaussian"``).  Keeps the matrix of fitted
  residuals for later resampling.
* parametric: the per-lag nuisance parameters are replaced by smooth
  exponential-decay curves in the lag, fitted jointly with the norming
  parameters in a first stage; a second stage estimates a single
  dependence parameter rho of a Gaussian copula across lags, holding the
  first-stage parameters fixed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, logit, ndtri
from scipy.stats import kendalltau

from .dists import (
    DeltaLaplaceParams,
    build_conditional_precision,
    correlation_from_precision,
    dl_cdf,
    dl_log_density,
    dl_quantile,
    _dl_mle_core,
    _dl_start,
)
from .errors import FitError, InputError
from .norming import (
    NormingSpec,
    BackwardForwardSpec,
    StructureTransform,
    spec_from_dict,
    spec_to_dict,
)

__all__ = [
    "ExceedanceBlockSet",
    "extract_blocks",
    "composite_nll",
    "SemiParamFit",
    "fit_semiparametric",
    "BackwardForwardFit",
    "fit_backward_forward",
    "ParamFit",
    "fit_parametric",
    "residual_diagnostics",
    "parameter_stability_scan",
    "save_fit",
    "load_fit",
]

_MIN_LAG_POINTS = 5


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExceedanceBlockSet:
    """Exceedances of ``u`` with their surrounding values.

    ``trailing[j, i-1]`` holds the value at lag +i of the j-th exceedance
    (NaN where the segment ends first); ``leading`` likewise for lag -i
    and is None for forward-only extraction.
    """

    u: float
    k: int
    direction: str
    x0: np.ndarray
    trailing: np.ndarray
    leading: np.ndarray | None
    t_index: np.ndarray

    @property
    def n_blocks(self):
        return self.x0.size


def extract_blocks(series, u, k, direction="forward"):
    """Collect one block per exceedance of ``u``, truncated at segment ends.

    Forward blocks need at least one trailing value; backward-forward
    blocks need at least one value on either side.  Raises InputError when
    no usable blocks remain.
    """
    if direction not in ("forward", "both"):
        raise InputError(f"direction must be 'forward' or 'both', got {direction!r}")
    if k < 1:
        raise InputError(f"horizon k must be >= 1, got {k}")
    if not np.isfinite(u) or u <= 0.0:
        raise InputError(f"threshold must be positive on the Laplace scale, got {u}")
    offs = np.arange(1, k + 1)
    x0_parts, trail_parts, lead_parts, t_parts = [], [], [], []
    n_exceed = 0
    for a, b in series.segments:
        xs = series.values[a:b]
        idx = np.flatnonzero(xs > u)
        n_exceed += idx.size
        if idx.size == 0:
            continue
        pos = idx[:, None] + offs[None, :]
        valid = pos < xs.size
        trail = np.where(valid, xs[np.minimum(pos, xs.size - 1)], np.nan)
        neg = idx[:, None] - offs[None, :]
        nvalid = neg >= 0
        lead = np.where(nvalid, xs[np.maximum(neg, 0)], np.nan)
        if direction == "forward":
            keep = valid[:, 0]
        else:
            keep = valid[:, 0] | nvalid[:, 0]
        x0_parts.append(xs[idx[keep]])
        trail_parts.append(trail[keep])
        lead_parts.append(lead[keep])
        t_parts.append(a + idx[keep])
    if n_exceed == 0 or not x0_parts or sum(p.size for p in x0_parts) == 0:
        raise InputError(
            f"no usable exceedance blocks above u={u} "
            f"({n_exceed} exceedances in the series)"
        )
    x0 = np.concatenate(x0_parts)
    return ExceedanceBlockSet(
        u=float(u),
        k=int(k),
        direction=direction,
        x0=x0,
        trailing=np.vstack(trail_parts),
        leading=np.vstack(lead_parts) if direction == "both" else None,
        t_index=np.concatenate(t_parts),
    )


# ---------------------------------------------------------------------------
# composite likelihood
# ---------------------------------------------------------------------------

def _lag_arrays(blocks, side):
    if side == "forward":
        return blocks.trailing
    if blocks.leading is None:
        raise InputError("block set has no backward lags")
    return blocks.leading


def _residual_columns(blocks, spec, side="forward"):
    """Per lag: (mask, z, log_b) under the given norming spec."""
    lagmat = _lag_arrays(blocks, side)
    k = min(spec.k, lagmat.shape[1])
    alphas = spec.alphas(k)
    x0 = blocks.x0
    out = []
    for i in range(k):
        col = lagmat[:, i]
        mask = ~np.isnan(col)
        x = x0[mask]
        a = alphas[i] * x
        if spec.model == "model1":
            b = x**spec.beta
        else:
            b = 1.0 + (alphas[i] * x) ** spec.beta
        z = (col[mask] - a) / b
        out.append((mask, z, np.log(b)))
    return out


def composite_nll(blocks, spec, nuisance, side="forward"):
    """Negative composite log likelihood of the blocks under ``spec`` with
    per-lag delta-Laplace residual parameters ``nuisance``."""
    cols = _residual_columns(blocks, spec, side)
    if len(nuisance) < len(cols):
        raise InputError(
            f"{len(nuisance)} nuisance parameter sets for {len(cols)} lags"
        )
    total = 0.0
    for (mask, z, log_b), params in zip(cols, nuisance):
        if z.size == 0:
            continue
        total += float(np.sum(log_b) - np.sum(dl_log_density(z, params)))
    return total


def _gaussian_nuisance(z):
    mu = float(np.mean(z))
    sd = float(np.std(z))
    if sd == 0.0:
        raise InputError("degenerate residual sample: zero variance")
    return DeltaLaplaceParams(mu, sd * np.sqrt(2.0), 2.0)


def _profile_pass(blocks, spec, working_margin, cache, side="forward", final=False):
    """Profile out the per-lag nuisance; returns (nll, nuisance list)."""
    cols = _residual_columns(blocks, spec, side)
    total = 0.0
    nuisance = []
    for i, (mask, z, log_b) in enumerate(cols):
        if z.size < _MIN_LAG_POINTS:
            raise InputError(
                f"lag {i + 1}: only {z.size} residuals available "
                f"(need {_MIN_LAG_POINTS})"
            )
        if working_margin == "gaussian":
            params = _gaussian_nuisance(z)
        else:
            key = (side, i)
            if final:
                res = _dl_mle_core(z)
            else:
                start = cache.get(key)
                if start is None:
                    start = _dl_start(z)
                res = _dl_mle_core(z, start=start, xatol=1e-5, fatol=1e-9, maxiter=400)
                cache[key] = res.x
            params = DeltaLaplaceParams(
                float(res.x[0]), float(np.exp(res.x[1])), float(np.exp(res.x[2]))
            )
        nuisance.append(params)
        total += float(np.sum(log_b) - np.sum(dl_log_density(z, params)))
    return total, nuisance


def _residual_store(blocks, spec, side="forward"):
    lagmat = _lag_arrays(blocks, side)
    k = min(spec.k, lagmat.shape[1])
    store = np.full((blocks.n_blocks, k), np.nan)
    for i, (mask, z, _) in enumerate(_residual_columns(blocks, spec, side)):
        store[mask, i] = z
    return store


def _normal_scores(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    ranks[order] = np.arange(1, v.size + 1)
    return ndtri(ranks / (v.size + 1.0))


def _lag1_corr(blocks):
    col = blocks.trailing[:, 0] if blocks.trailing.shape[1] else np.empty(0)
    mask = ~np.isnan(col)
    if mask.sum() < 10:
        return 0.3
    a = _normal_scores(blocks.x0[mask])
    b = _normal_scores(col[mask])
    return float(np.clip(np.corrcoef(a, b)[0, 1], -0.95, 0.95))


def _start_vector(transform, blocks):
    c = _lag1_corr(blocks)
    if transform.model == "model2":
        c = max(abs(c), 0.05)
    beta0 = 0.2
    kind = transform.kind
    if kind == "free":
        ks = np.arange(1, transform.k + 1)
        vals = np.sign(c) ** ks * np.abs(c) ** ks if c != 0 else np.full(transform.k, 0.1)
        from .norming import FreeAlpha

        structure = FreeAlpha(tuple(np.clip(vals, -0.95, 0.95)))
    elif kind == "geometric":
        from .norming import GeometricAlpha

        structure = GeometricAlpha(c)
    elif kind in ("ar2", "ar3"):
        from .norming import ARCorrAlpha

        pacf = [c, 0.05] if kind == "ar2" else [c, 0.05, 0.02]
        structure = ARCorrAlpha(tuple(pacf))
    else:
        from .norming import PTAlpha

        m = transform.order - 1
        init = tuple(np.clip([c ** (j + 1) for j in range(m)], 0.01, 0.95))
        structure = PTAlpha(
            order=transform.order,
            init=init,
            big_gamma=(0.0,) * m,
            c=float(np.clip(abs(c), 0.05, 0.9)),
            delta=1.0,
        )
    return transform.to_vector(structure, beta0)


def _run_simplex(objective, start, seed, restarts, scale=0.3, xatol=1e-4, fatol=1e-6, maxiter=None):
    rng = np.random.default_rng(np.random.Philox(key=seed))
    starts = [np.asarray(start, dtype=float)]
    for _ in range(max(restarts - 1, 0)):
        starts.append(starts[0] + rng.normal(0.0, scale, size=starts[0].size))
    best = None
    n = starts[0].size
    maxiter = maxiter or 400 * n
    # inadmissible candidates score inf; keep the resulting nan compares quiet
    with np.errstate(invalid="ignore"):
        for s in starts:
            res = minimize(
                objective,
                s,
                method="Nelder-Mead",
                options={
                    "xatol": xatol,
                    "fatol": fatol,
                    "maxiter": maxiter,
                    "maxfev": maxiter,
                },
            )
            if best is None or res.fun < best.fun:
                best = res
    return best


# ---------------------------------------------------------------------------
# semi-parametric fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiParamFit:
    """Result of a semi-parametric forward fit."""

    spec: NormingSpec
    nuisance: tuple
    working_margin: str
    u: float
    k: int
    n_blocks: int
    nll: float
    residual_store: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    converged: bool = True
    n_outer_evals: int = 0
    marginal_ref: str | None = None

    def eligible_rows(self, lags):
        """Row indices whose residuals are present at every requested lag."""
        lags = np.asarray(lags, dtype=int)
        if lags.size == 0:
            return np.arange(self.residual_store.shape[0])
        if np.any(lags < 1) or np.any(lags > self.residual_store.shape[1]):
            raise InputError(
                f"requested lags {lags.tolist()} outside the fitted horizon "
                f"1..{self.residual_store.shape[1]}"
            )
        ok = ~np.isnan(self.residual_store[:, lags - 1]).any(axis=1)
        return np.flatnonzero(ok)


def _check_blocks_count(blocks):
    if blocks.n_blocks < 20:
        warnings.warn(
            f"only {blocks.n_blocks} exceedance blocks; estimates may be unstable",
            stacklevel=3,
        )


def fit_semiparametric(
    blocks,
    model="model1",
    structure="geometric",
    order=None,
    working_margin="dlaplace",
    seed=0,
    restarts=3,
):
    """Fit norming parameters by profile composite likelihood.

    Parameters
    ----------
    blocks : ExceedanceBlockSet
    model : str
        'model1' (scale x**beta) or 'model2' (scale 1 + (alpha_i x)**beta).
    structure : str
        Lag structure: 'free', 'geometric', 'ar2', 'ar3' or 'pt'.
    order : int, optional
        Recurrence order for structure 'pt' (default 2).
    working_margin : str
        'dlaplace' for per-lag delta-Laplace nuisance (profiled by inner
        maximum likelihood) or 'gaussian' for closed-form moments.
    seed : int
        Seed for the jittered simplex restarts.
    restarts : int
        Total simplex starts.
    """
    if working_margin not in ("dlaplace", "gaussian"):
        raise InputError(f"unknown working margin {working_margin!r}")
    _check_blocks_count(blocks)
    transform = StructureTransform(structure, blocks.k, order=order, model=model)
    cache = {}
    evals = [0]

    def objective(vec):
        evals[0] += 1
        try:
            struct, beta = transform.from_vector(vec)
            spec = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
            nll, _ = _profile_pass(blocks, spec, working_margin, cache)
        except (InputError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf
        return nll / max(blocks.n_blocks, 1)

    start = _start_vector(transform, blocks)
    best = _run_simplex(objective, start, seed, restarts)
    if not np.isfinite(best.fun):
        raise FitError(
            "semi-parametric fit failed: no admissible parameters found",
            best=None,
            best_value=float(best.fun),
        )
    struct, beta = transform.from_vector(best.x)
    spec = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
    nll, nuisance = _profile_pass(blocks, spec, working_margin, {}, final=True)
    return SemiParamFit(
        spec=spec,
        nuisance=tuple(nuisance),
        working_margin=working_margin,
        u=blocks.u,
        k=blocks.k,
        n_blocks=blocks.n_blocks,
        nll=float(nll),
        residual_store=_residual_store(blocks, spec),
        x0=blocks.x0.copy(),
        converged=bool(best.success),
        n_outer_evals=evals[0],
    )


# ---------------------------------------------------------------------------
# backward-forward fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackwardForwardFit:
    """Norming fits for both directions around each exceedance, with a
    joint residual store (one row per exceedance, both directions)."""

    spec: BackwardForwardSpec
    nuisance_forward: tuple
    nuisance_backward: tuple
    working_margin: str
    u: float
    k: int
    n_blocks: int
    nll: float
    residual_forward: np.ndarray = field(repr=False)
    residual_backward: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    converged: bool = True
    marginal_ref: str | None = None

    def eligible_rows(self, back_lags, fwd_lags):
        back_lags = np.asarray(back_lags, dtype=int)
        fwd_lags = np.asarray(fwd_lags, dtype=int)
        n = self.residual_forward.shape[0]
        ok = np.ones(n, dtype=bool)
        if back_lags.size:
            if np.any(back_lags < 1) or np.any(back_lags > self.k):
                raise InputError(f"backward lags outside 1..{self.k}")
            ok &= ~np.isnan(self.residual_backward[:, back_lags - 1]).any(axis=1)
        if fwd_lags.size:
            if np.any(fwd_lags < 1) or np.any(fwd_lags > self.k):
                raise InputError(f"forward lags outside 1..{self.k}")
            ok &= ~np.isnan(self.residual_forward[:, fwd_lags - 1]).any(axis=1)
        return np.flatnonzero(ok)


def fit_backward_forward(
    blocks,
    model="model1",
    structure="geometric",
    order=None,
    working_margin="dlaplace",
    symmetric=True,
    seed=0,
    restarts=3,
):
    """Fit norming models in both directions around each exceedance.

    With ``symmetric=True`` a single (structure, beta) is shared by both
    directions and estimated from the pooled composite likelihood;
    otherwise the two directions are fitted independently.
    """
    if blocks.direction != "both":
        raise InputError("backward-forward fitting needs blocks extracted with direction='both'")
    if working_margin not in ("dlaplace", "gaussian"):
        raise InputError(f"unknown working margin {working_margin!r}")
    _check_blocks_count(blocks)
    transform = StructureTransform(structure, blocks.k, order=order, model=model)

    if symmetric:
        cache = {}

        def objective(vec):
            try:
                struct, beta = transform.from_vector(vec)
                spec = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
                nf, _ = _profile_pass(blocks, spec, working_margin, cache, side="forward")
                nb, _ = _profile_pass(blocks, spec, working_margin, cache, side="backward")
            except (InputError, FloatingPointError, np.linalg.LinAlgError):
                return np.inf
            return (nf + nb) / max(blocks.n_blocks, 1)

        start = _start_vector(transform, blocks)
        best = _run_simplex(objective, start, seed, restarts)
        if not np.isfinite(best.fun):
            raise FitError("backward-forward fit failed: no admissible parameters found")
        struct, beta = transform.from_vector(best.x)
        spec_f = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
        spec_b = spec_f
        converged = bool(best.success)
    else:
        fwd = fit_semiparametric(
            blocks, model=model, structure=structure, order=order,
            working_margin=working_margin, seed=seed, restarts=restarts,
        )
        back_blocks = ExceedanceBlockSet(
            u=blocks.u, k=blocks.k, direction="forward",
            x0=blocks.x0, trailing=blocks.leading, leading=None,
            t_index=blocks.t_index,
        )
        bwd = fit_semiparametric(
            back_blocks, model=model, structure=structure, order=order,
            working_margin=working_margin, seed=seed, restarts=restarts,
        )
        spec_f, spec_b = fwd.spec, bwd.spec
        converged = fwd.converged and bwd.converged

    nll_f, nuis_f = _profile_pass(blocks, spec_f, working_margin, {}, side="forward", final=True)
    nll_b, nuis_b = _profile_pass(blocks, spec_b, working_margin, {}, side="backward", final=True)
    return BackwardForwardFit(
        spec=BackwardForwardSpec(forward=spec_f, backward=spec_b, symmetric=symmetric),
        nuisance_forward=tuple(nuis_f),
        nuisance_backward=tuple(nuis_b),
        working_margin=working_margin,
        u=blocks.u,
        k=blocks.k,
        n_blocks=blocks.n_blocks,
        nll=float(nll_f + nll_b),
        residual_forward=_residual_store(blocks, spec_f, side="forward"),
        residual_backward=_residual_store(blocks, spec_b, side="backward"),
        x0=blocks.x0.copy(),
        converged=converged,
    )


# ---------------------------------------------------------------------------
# parametric fit
# ---------------------------------------------------------------------------

_CURVE_NAMES = ("A", "B", "C", "D", "E", "F")


def _curve_bounds(parameterization):
    if parameterization == 1:
        return {"A": (0.0, 1.0), "B": (0.0, 5.0), "C": (0.0, 3.0),
                "D": (0.0, 5.0), "E": (0.0, 1.0), "F": (0.0, 5.0)}
    return {"A": (0.0, 1.0), "B": (0.0, 5.0), "C": (-1.0, 0.0),
            "D": (0.0, 5.0), "E": (0.0, 1.0), "F": (0.0, 5.0)}


def _curve_params(curves, u, beta, parameterization, lags):
    """Per-lag delta-Laplace parameters implied by the decay curves."""
    lags = np.asarray(lags, dtype=float)
    i0 = lags - 1.0
    mu = curves["A"] * np.exp(-curves["B"] * i0)
    delta = 1.0 + curves["E"] * np.exp(-curves["F"] * i0)
    sig = 1.0 + curves["C"] * np.exp(-curves["D"] * i0)
    if parameterization == 1:
        sig = (1.0 + u) ** (-beta) * sig
    return mu, sig, delta


@dataclass(frozen=True)
class ParamFit:
    """Result of the two-stage parametric fit."""

    spec: NormingSpec
    curves: dict
    parameterization: int
    rho: float
    u: float
    k: int
    n_blocks: int
    nll_stage1: float
    stage2_value: float
    converged: bool = True
    marginal_ref: str | None = None

    def residual_params(self, lags):
        mu, sig, delta = _curve_params(
            self.curves, self.u, self.spec.beta, self.parameterization, lags
        )
        return [
            DeltaLaplaceParams(float(m), float(s), float(d))
            for m, s, d in zip(np.atleast_1d(mu), np.atleast_1d(sig), np.atleast_1d(delta))
        ]


def fit_parametric(
    blocks,
    model="model1",
    structure="geometric",
    order=None,
    parameterization=None,
    seed=0,
    restarts=3,
):
    """Two-stage parametric fit.

    Stage 1 maximizes the independence-copula composite likelihood over
    the norming parameters and the six curve parameters (A..F).  Stage 2
    fixes those and maximizes the Gaussian-copula correction over the
    dependence parameter rho, handling truncated blocks by marginalizing
    the copula correlation to the observed lags.
    """
    if parameterization is None:
        parameterization = 1 if model == "model1" else 2
    if parameterization not in (1, 2):
        raise InputError(f"parameterization must be 1 or 2, got {parameterization}")
    _check_blocks_count(blocks)
    transform = StructureTransform(structure, blocks.k, order=order, model=model)
    bounds = _curve_bounds(parameterization)
    ns = transform.n_params

    def curves_from_tail(tail):
        return {
            name: float(lo + (hi - lo) * np.clip(expit(t), 1e-12, 1 - 1e-12))
            for (name, (lo, hi)), t in zip(bounds.items(), tail)
        }

    def stage1_objective(vec):
        try:
            struct, beta = transform.from_vector(vec[:ns])
            spec = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
            curves = curves_from_tail(vec[ns:])
            cols = _residual_columns(blocks, spec)
            total = 0.0
            for i, (mask, z, log_b) in enumerate(cols):
                if z.size == 0:
                    continue
                mu, sig, delta = _curve_params(
                    curves, blocks.u, beta, parameterization, [i + 1]
                )
                params = DeltaLaplaceParams(float(mu[0]), float(sig[0]), float(delta[0]))
                total += float(np.sum(log_b) - np.sum(dl_log_density(z, params)))
        except (InputError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf
        return total / max(blocks.n_blocks, 1)

    start_struct = _start_vector(transform, blocks)
    tail0 = np.array([logit(0.3), logit(0.2), 0.0, logit(0.2), 0.0, logit(0.2)])
    start = np.concatenate([start_struct, tail0])
    best = _run_simplex(stage1_objective, start, seed, restarts, maxiter=800 * start.size)
    if not np.isfinite(best.fun):
        raise FitError("parametric fit failed: no admissible parameters found")
    struct, beta = transform.from_vector(best.x[:ns])
    spec = NormingSpec(model=model, structure=struct, beta=beta, k=blocks.k)
    curves = curves_from_tail(best.x[ns:])
    nll1 = best.fun * max(blocks.n_blocks, 1)

    rho, stage2_value = _fit_stage2_rho(blocks, spec, curves, parameterization)
    return ParamFit(
        spec=spec,
        curves=curves,
        parameterization=parameterization,
        rho=float(rho),
        u=blocks.u,
        k=blocks.k,
        n_blocks=blocks.n_blocks,
        nll_stage1=float(nll1),
        stage2_value=float(stage2_value),
        converged=bool(best.success),
    )


def _fit_stage2_rho(blocks, spec, curves, parameterization):
    """Maximize the copula part of the composite likelihood over rho."""
    k = blocks.k
    if k < 2:
        return 0.0, 0.0
    cols = _residual_columns(blocks, spec)
    # normal scores of every observed residual under the curve margins
    w = np.full((blocks.n_blocks, k), np.nan)
    for i, (mask, z, _) in enumerate(cols):
        mu, sig, delta = _curve_params(curves, blocks.u, spec.beta, parameterization, [i + 1])
        params = DeltaLaplaceParams(float(mu[0]), float(sig[0]), float(delta[0]))
        cdf = np.clip(dl_cdf(z, params), 1e-12, 1.0 - 1e-12)
        w[mask, i] = ndtri(cdf)
    observed = ~np.isnan(w)
    patterns = {}
    for row in range(blocks.n_blocks):
        key = observed[row].tobytes()
        patterns.setdefault(key, []).append(row)
    groups = []
    for key, rows in patterns.items():
        obs = np.frombuffer(key, dtype=bool)
        if obs.sum() == 0:
            continue
        wm = w[np.asarray(rows)][:, obs]
        groups.append((np.flatnonzero(obs), wm))

    def neg_copula_loglik(rho):
        if abs(rho) >= 0.995:
            return np.inf
        p_full = correlation_from_precision(build_conditional_precision(rho, k))
        total = 0.0
        for obs_idx, wm in groups:
            ps = p_full[np.ix_(obs_idx, obs_idx)]
            try:
                cf = cho_factor(ps)
            except np.linalg.LinAlgError:
                return np.inf
            logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
            qw = cho_solve(cf, wm.T).T
            quad = float(np.sum(wm * qw))
            total += -0.5 * wm.shape[0] * logdet - 0.5 * quad + 0.5 * float(np.sum(wm**2))
        return -total

    res = minimize_scalar(
        neg_copula_loglik, bounds=(-0.985, 0.985), method="bounded",
        options={"xatol": 1e-6},
    )
    return float(res.x), -float(res.fun)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def residual_diagnostics(fit, n_qq=101):
    """Residual independence and distribution diagnostics.

    Returns ``(tau, qq)`` data frames: per-lag Kendall tau between the
    conditioning value and the fitted residual (with a 5% significance
    flag), and per-lag model-vs-empirical quantiles on a grid.  For
    backward-forward fits the forward residuals are examined.
    """
    if isinstance(fit, SemiParamFit):
        store, x0, nuisance = fit.residual_store, fit.x0, fit.nuisance
    elif isinstance(fit, BackwardForwardFit):
        store, x0, nuisance = fit.residual_forward, fit.x0, fit.nuisance_forward
    else:
        raise InputError(
            "residual diagnostics need a fit with an empirical residual store"
        )
    tau_rows = []
    qq_rows = []
    probs = (np.arange(n_qq) + 0.5) / n_qq
    for i in range(store.shape[1]):
        col = store[:, i]
        mask = ~np.isnan(col)
        n = int(mask.sum())
        if n < _MIN_LAG_POINTS:
            continue
        tau, pval = kendalltau(x0[mask], col[mask])
        tau_rows.append(
            {"lag": i + 1, "tau": float(tau), "p_value": float(pval),
             "n": n, "dependent_at_5pct": bool(pval < 0.05)}
        )
        emp = np.quantile(col[mask], probs)
        mod = dl_quantile(probs, nuisance[i])
        for p, e, m in zip(probs, emp, mod):
            qq_rows.append({"lag": i + 1, "prob": float(p), "empirical": float(e), "model": float(m)})
    return pd.DataFrame(tau_rows), pd.DataFrame(qq_rows)


def parameter_stability_scan(series, u_quantiles, k, model="model1",
                             structure="geometric", order=None,
                             working_margin="dlaplace", seed=0):
    """Refit across a grid of thresholds (given as Laplace-scale quantile
    levels) and tabulate the fitted parameters."""
    from .margins import laplace_quantile

    rows = []
    for q in u_quantiles:
        u = float(laplace_quantile(float(q)))
        row = {"quantile": float(q), "u": u}
        try:
            blocks = extract_blocks(series, u, k)
            f = fit_semiparametric(
                blocks, model=model, structure=structure, order=order,
                working_margin=working_margin, seed=seed,
            )
            alphas = f.spec.alphas()
            row.update(
                n_blocks=f.n_blocks, beta=f.spec.beta,
                alpha1=float(alphas[0]), nll=f.nll,
                converged=f.converged, failed=False, message="",
            )
        except (InputError, FitError) as exc:
            row.update(
                n_blocks=0, beta=float("nan"), alpha1=float("nan"),
                nll=float("nan"), converged=False, failed=True, message=str(exc),
            )
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _nuisance_to_list(nuisance):
    return [[p.mu, p.sigma, p.delta] for p in nuisance]


def _nuisance_from_list(rows):
    return tuple(DeltaLaplaceParams(*row) for row in rows)


def _matrix_to_json(m):
    return [[None if np.isnan(v) else v for v in row] for row in m]


def _matrix_from_json(rows):
    return np.array(
        [[np.nan if v is None else v for v in row] for row in rows], dtype=float
    )


def save_fit(fit, path):
    """Serialize a fit (semi-parametric, backward-forward or parametric)."""
    if isinstance(fit, SemiParamFit):
        payload = {
            "type": "semiparametric",
            "spec": spec_to_dict(fit.spec),
            "nuisance": _nuisance_to_list(fit.nuisance),
            "working_margin": fit.working_margin,
            "u": fit.u,
            "k": fit.k,
            "n_blocks": fit.n_blocks,
            "nll": fit.nll,
            "converged": fit.converged,
            "marginal_ref": fit.marginal_ref,
            "residual_store": _matrix_to_json(fit.residual_store),
            "x0": fit.x0.tolist(),
        }
    elif isinstance(fit, BackwardForwardFit):
        payload = {
            "type": "backward_forward",
            "spec_forward": spec_to_dict(fit.spec.forward),
            "spec_backward": spec_to_dict(fit.spec.backward),
            "symmetric": fit.spec.symmetric,
            "nuisance_forward": _nuisance_to_list(fit.nuisance_forward),
            "nuisance_backward": _nuisance_to_list(fit.nuisance_backward),
            "working_margin": fit.working_margin,
            "u": fit.u,
            "k": fit.k,
            "n_blocks": fit.n_blocks,
            "nll": fit.nll,
            "converged": fit.converged,
            "marginal_ref": fit.marginal_ref,
            "residual_forward": _matrix_to_json(fit.residual_forward),
            "residual_backward": _matrix_to_json(fit.residual_backward),
            "x0": fit.x0.tolist(),
        }
    elif isinstance(fit, ParamFit):
        payload = {
            "type": "parametric",
            "spec": spec_to_dict(fit.spec),
            "curves": fit.curves,
            "parameterization": fit.parameterization,
            "rho": fit.rho,
            "u": fit.u,
            "k": fit.k,
            "n_blocks": fit.n_blocks,
            "nll_stage1": fit.nll_stage1,
            "stage2_value": fit.stage2_value,
            "converged": fit.converged,
            "marginal_ref": fit.marginal_ref,
        }
    else:
        raise InputError(f"cannot serialize object of type {type(fit).__name__}")
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_fit(path):
    with open(path) as fh:
        d = json.load(fh)
    kind = d.get("type")
    if kind == "semiparametric":
        return SemiParamFit(
            spec=spec_from_dict(d["spec"]),
            nuisance=_nuisance_from_list(d["nuisance"]),
            working_margin=d["working_margin"],
            u=float(d["u"]),
            k=int(d["k"]),
            n_blocks=int(d["n_blocks"]),
            nll=float(d["nll"]),
            residual_store=_matrix_from_json(d["residual_store"]),
            x0=np.asarray(d["x0"], dtype=float),
            converged=bool(d["converged"]),
            marginal_ref=d.get("marginal_ref"),
        )
    if kind == "backward_forward":
        return BackwardForwardFit(
            spec=BackwardForwardSpec(
                forward=spec_from_dict(d["spec_forward"]),
                backward=spec_from_dict(d["spec_backward"]),
                symmetric=bool(d["symmetric"]),
            ),
            nuisance_forward=_nuisance_from_list(d["nuisance_forward"]),
            nuisance_backward=_nuisance_from_list(d["nuisance_backward"]),
            working_margin=d["working_margin"],
            u=float(d["u"]),
            k=int(d["k"]),
            n_blocks=int(d["n_blocks"]),
            nll=float(d["nll"]),
            residual_forward=_matrix_from_json(d["residual_forward"]),
            residual_backward=_matrix_from_json(d["residual_backward"]),
            x0=np.asarray(d["x0"], dtype=float),
            converged=bool(d["converged"]),
            marginal_ref=d.get("marginal_ref"),
        )
    if kind == "parametric":
        return ParamFit(
            spec=spec_from_dict(d["spec"]),
            curves={k_: float(v) for k_, v in d["curves"].items()},
            parameterization=int(d["parameterization"]),
            rho=float(d["rho"]),
            u=float(d["u"]),
            k=int(d["k"]),
            n_blocks=int(d["n_blocks"]),
            nll_stage1=float(d["nll_stage1"]),
            stage2_value=float(d["stage2_value"]),
            converged=bool(d["converged"]),
            marginal_ref=d.get("marginal_ref"),
        )
    raise InputError(f"unknown fit type {kind!r} in {path}")
