"""Norming functions for conditional tail models of stationary series.

Given a large value x at the conditioning time, the value at lag i is
modelled as a_i(x) + b_i(x) * Z_i with location a_i(x) = alpha_i * x and
one of two scale forms:

* model 1: b_i(x) = x**beta
* model 2: b_i(x) = 1 + (alpha_i * x)**beta  (requires alpha_i >= 0)

with alpha_i in [-1, 1] and beta in [0, 1).  The lag profile alpha_1,
alpha_2, ... is either free or generated by a parametric structure:
geometric decay, the autocorrelation sequence of a stationary AR(2) or
AR(3) process (parameterized by partial autocorrelations so that
admissibility is automatic), or a power-mean recurrence that nests the
AR(2) autocorrelation sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, logsumexp

from .errors import InputError

__all__ = [
    "FreeAlpha",
    "GeometricAlpha",
    "ARCorrAlpha",
    "PTAlpha",
    "alpha_sequence",
    "theta_from_pacf",
    "pt_from_ar2",
    "NormingSpec",
    "BackwardForwardSpec",
    "norm_location",
    "norm_scale",
    "StructureTransform",
]

_ALPHA_TOL = 1e-12


def _check_unit_interval(name, value, low=-1.0, high=1.0):
    if not (np.isfinite(value) and low <= value <= high):
        raise InputError(f"{name} must lie in [{low}, {high}], got {value}")


@dataclass(frozen=True)
class FreeAlpha:
    """Unstructured lag coefficients alpha_1..alpha_k, each in [-1, 1]."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) == 0:
            raise InputError("free alpha structure needs at least one coefficient")
        for i, v in enumerate(vals):
            _check_unit_interval(f"alpha_{i + 1}", v)


@dataclass(frozen=True)
class GeometricAlpha:
    """alpha_i = alpha**i."""

    alpha: float

    def __post_init__(self):
        _check_unit_interval("alpha", self.alpha)


@dataclass(frozen=True)
class ARCorrAlpha:
    """Autocorrelation sequence of a stationary AR(p), p = 2 or 3.

    Parameterized by the partial autocorrelations ``pacf`` (each in
    (-1, 1)), which map bijectively onto the stationary region of the
    autoregression coefficients.
    """

    pacf: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.pacf)
        object.__setattr__(self, "pacf", vals)
        if len(vals) not in (2, 3):
            raise InputError(f"supported autoregression orders are 2 and 3, got {len(vals)}")
        for i, r in enumerate(vals):
            if not (np.isfinite(r) and -1.0 < r < 1.0):
                raise InputError(f"partial autocorrelation {i + 1} must be in (-1, 1), got {r}")

    @property
    def order(self):
        return len(self.pacf)


def _power_mean_rate(gammas, delta):
    """(sum_i gamma_i**(1 + delta))**(1/delta), evaluated in log space.

    Direct evaluation underflows for large delta; the log-space form stays
    finite for any weights on the simplex and any positive exponent.
    """
    with np.errstate(divide="ignore"):
        log_g = np.log(np.asarray(gammas, dtype=float))
    return float(np.exp(logsumexp((1.0 + delta) * log_g) / delta))


@dataclass(frozen=True)
class PTAlpha:
    """Power-mean recurrence for the lag coefficients.

    With alpha_0 = 1 and initial values alpha_1..alpha_{l-1} supplied, later
    coefficients follow

        alpha_t = c * (sum_i gamma_i * (gamma_i * alpha_{t-i})**delta)**(1/delta)

    over lags i = 1..l.  The weights gamma live on the simplex and are
    stored through the unconstrained vector ``big_gamma`` of length l - 1
    (softmax with an implied last coordinate equal to minus the sum, which
    keeps the map one-to-one).  Decay of the sequence requires

        c * (sum_i gamma_i**(1 + delta))**(1/delta) < 1.
    """

    order: int
    init: tuple
    big_gamma: tuple
    c: float
    delta: float

    def __post_init__(self):
        if self.order < 2:
            raise InputError(f"recurrence order must be >= 2, got {self.order}")
        init = tuple(float(v) for v in self.init)
        bg = tuple(float(v) for v in self.big_gamma)
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "big_gamma", bg)
        if len(init) != self.order - 1:
            raise InputError(
                f"recurrence of order {self.order} needs {self.order - 1} initial "
                f"coefficients, got {len(init)}"
            )
        if len(bg) != self.order - 1:
            raise InputError(
                f"recurrence of order {self.order} needs {self.order - 1} weight "
                f"parameters, got {len(bg)}"
            )
        for i, v in enumerate(init):
            _check_unit_interval(f"alpha_{i + 1}", v)
        if not (np.isfinite(self.delta) and self.delta != 0.0):
            raise InputError(f"recurrence exponent must be finite and nonzero, got {self.delta}")
        if not (np.isfinite(self.c) and self.c > 0):
            raise InputError(f"recurrence constant must be positive, got {self.c}")
        m = self.decay_rate()
        if not m < 1.0 + _ALPHA_TOL:
            raise InputError(
                "recurrence constant too large: "
                f"c * (sum gamma^(1+delta))^(1/delta) = {m} >= 1"
            )

    @property
    def gammas(self):
        bg = np.asarray(self.big_gamma)
        full = np.append(bg, -bg.sum())
        e = np.exp(full - full.max())
        return e / e.sum()

    def decay_rate(self):
        return self.c * _power_mean_rate(self.gammas, self.delta)


def theta_from_pacf(pacf):
    """Map partial autocorrelations to AR coefficients (orders 2 and 3)."""
    pacf = tuple(float(r) for r in pacf)
    if len(pacf) == 2:
        r1, r2 = pacf
        return np.array([r1 * (1.0 - r2), r2])
    if len(pacf) == 3:
        r1, r2, r3 = pacf
        t1 = r1 - r1 * r2 - r2 * r3
        t2 = r2 - r1 * r3 + r1 * r2 * r3
        return np.array([t1, t2, r3])
    raise InputError(f"supported autoregression orders are 2 and 3, got {len(pacf)}")


def _arcorr_sequence(structure, k):
    # Levinson-Durbin: build the autocorrelations and autoregression
    # coefficients jointly from the partial autocorrelations.  Division-free,
    # so it stays stable arbitrarily close to the unit boundary.
    kappa = np.asarray(structure.pacf, dtype=float)
    p = structure.order
    rho = np.empty(p + 1)
    rho[0] = 1.0
    phi = np.empty(p)
    for m in range(1, p + 1):
        km = kappa[m - 1]
        prev = phi[: m - 1].copy()
        rho[m] = km * (1.0 - np.dot(prev, rho[1:m])) + np.dot(
            prev, rho[m - 1 : 0 : -1]
        )
        phi[: m - 1] = prev - km * prev[::-1]
        phi[m - 1] = km
    alpha = np.empty(k + 1)
    m = min(k, p)
    alpha[: m + 1] = rho[: m + 1]
    for t in range(p + 1, k + 1):
        alpha[t] = float(np.dot(phi, alpha[t - p : t][::-1]))
    return alpha[1:]


def _pt_sequence(structure, k):
    g = structure.gammas
    delta = structure.delta
    c = structure.c
    p = structure.order
    alpha = np.empty(k + 1)
    alpha[0] = 1.0
    m = min(k, p - 1)
    alpha[1 : m + 1] = structure.init[:m]
    w = g ** (1.0 + delta)
    for t in range(p, k + 1):
        prev = alpha[t - p : t][::-1]
        if np.any(prev < 0.0):
            if float(delta) != round(delta):
                raise InputError(
                    "power-mean recurrence undefined: negative coefficient with "
                    f"non-integer exponent {delta}"
                )
        alpha[t] = c * float(np.sum(w * prev**delta)) ** (1.0 / delta)
    return alpha[1:]


def alpha_sequence(structure, k):
    """Lag coefficients alpha_1..alpha_k implied by ``structure``.

    Free structures cannot extrapolate: requesting more lags than they
    store is an input error.  Parametric structures extend to any k.
    """
    if k < 1:
        raise InputError(f"number of lags must be >= 1, got {k}")
    if isinstance(structure, FreeAlpha):
        if k > len(structure.values):
            raise InputError(
                f"free alpha structure has {len(structure.values)} coefficients, "
                f"cannot produce lag {k}"
            )
        return np.asarray(structure.values[:k], dtype=float)
    if isinstance(structure, GeometricAlpha):
        return structure.alpha ** np.arange(1, k + 1, dtype=float)
    if isinstance(structure, ARCorrAlpha):
        return _arcorr_sequence(structure, k)
    if isinstance(structure, PTAlpha):
        return _pt_sequence(structure, k)
    raise InputError(f"unknown alpha structure {type(structure).__name__}")


def pt_from_ar2(theta1, theta2):
    """Power-mean structure reproducing the AR(2) autocorrelation sequence.

    Requires theta1, theta2 > 0, theta1 != theta2, and (theta1, theta2)
    inside the stationarity region.  Returns a :class:`PTAlpha` with
    delta = 1 whose sequence matches :class:`ARCorrAlpha` exactly.
    """
    for name, t in (("theta1", theta1), ("theta2", theta2)):
        if not (np.isfinite(t) and t > 0):
            raise InputError(f"{name} must be positive, got {t}")
    if theta1 == theta2:
        raise InputError("theta1 and theta2 must differ")
    if not (theta1 + theta2 < 1.0 and theta2 - theta1 < 1.0 and abs(theta2) < 1.0):
        raise InputError(f"({theta1}, {theta2}) is outside the stationarity region")
    root = np.sqrt(theta1 * theta2)
    gamma1 = (theta1 - root) / (theta1 - theta2)
    c = (theta1 - theta2) ** 2 / (theta1 - 2.0 * root + theta2)
    alpha1 = theta1 / (1.0 - theta2)
    big_gamma1 = 0.5 * (np.log(gamma1) - np.log1p(-gamma1))
    return PTAlpha(order=2, init=(alpha1,), big_gamma=(big_gamma1,), c=c, delta=1.0)


@dataclass(frozen=True)
class NormingSpec:
    """A norming model: scale form, lag structure, beta, and horizon k."""

    model: str
    structure: object
    beta: float
    k: int

    def __post_init__(self):
        if self.model not in ("model1", "model2"):
            raise InputError(f"model must be 'model1' or 'model2', got {self.model!r}")
        if not (np.isfinite(self.beta) and 0.0 <= self.beta < 1.0):
            raise InputError(f"beta must lie in [0, 1), got {self.beta}")
        if self.k < 1:
            raise InputError(f"horizon k must be >= 1, got {self.k}")
        alphas = alpha_sequence(self.structure, self.k)
        if self.model == "model2" and np.any(alphas < 0.0):
            raise InputError(
                "model 2 requires nonnegative lag coefficients; "
                f"smallest is {alphas.min()}"
            )

    def alphas(self, k=None):
        return alpha_sequence(self.structure, self.k if k is None else k)


@dataclass(frozen=True)
class BackwardForwardSpec:
    """Norming models for both time directions around a conditioning point."""

    forward: NormingSpec
    backward: NormingSpec
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric:
            same = (
                self.forward.model == self.backward.model
                and self.forward.beta == self.backward.beta
                and self.forward.structure == self.backward.structure
            )
            if not same:
                raise InputError("symmetric spec requires identical forward and backward parts")


def _check_positive(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise InputError("norming functions require a positive conditioning value")
    return x if x.ndim else float(x)


def _alphas_at(spec, i):
    if i is None:
        return spec.alphas()
    i = np.asarray(i, dtype=int)
    if np.any(i < 1):
        raise InputError("lags must be >= 1")
    seq = alpha_sequence(spec.structure, int(i.max()))
    out = seq[i - 1]
    return out if i.ndim else float(out)


def norm_location(spec, x, i=None):
    """Location a_i(x) = alpha_i * x for lag(s) ``i`` (all lags up to k if None)."""
    x = _check_positive(x)
    return _alphas_at(spec, i) * x


def norm_scale(spec, x, i=None):
    """Scale b_i(x) for lag(s) ``i`` (all lags up to k if None)."""
    x = _check_positive(x)
    a = _alphas_at(spec, i)
    if spec.model == "model1":
        shape = np.broadcast_shapes(np.shape(a), np.shape(x))
        out = np.broadcast_to(np.asarray(x, dtype=float) ** spec.beta, shape)
        return float(out) if shape == () else np.array(out)
    return 1.0 + (a * x) ** spec.beta


# ---------------------------------------------------------------------------
# unconstrained <-> natural parameter transforms used by the fitting code
# ---------------------------------------------------------------------------

_SQUASH_EPS = 1e-12
_BETA_EPS = 1e-6


def _to_interval(t, low, high):
    p = np.clip(expit(np.asarray(t, dtype=float)), _SQUASH_EPS, 1.0 - _SQUASH_EPS)
    return low + (high - low) * p


def _from_interval(v, low, high):
    p = (np.asarray(v, dtype=float) - low) / (high - low)
    p = np.clip(p, _SQUASH_EPS, 1.0 - _SQUASH_EPS)
    return logit(p)


class StructureTransform:
    """Bijection between an unconstrained vector and (structure, beta).

    Layout: structure parameters first, beta last.  Interval-valued
    parameters go through scaled logits that saturate strictly inside
    their intervals; free reals pass through unchanged; positive reals go
    through log.  ``kind`` is one of ``free``, ``geometric``, ``ar2``,
    ``ar3``, ``pt``.
    """

    def __init__(self, kind, k, order=None, model="model1"):
        if kind not in ("free", "geometric", "ar2", "ar3", "pt"):
            raise InputError(f"unknown structure kind {kind!r}")
        self.kind = kind
        self.k = int(k)
        self.model = model
        if kind == "pt":
            self.order = 2 if order is None else int(order)
            if self.order < 2:
                raise InputError(f"recurrence order must be >= 2, got {order}")
        elif kind in ("ar2", "ar3"):
            self.order = int(kind[-1])
        else:
            self.order = None
        # alpha-type coefficients live in (0, 1) under model 2, (-1, 1) otherwise
        self._alpha_low = 0.0 if model == "model2" else -1.0

    @property
    def n_params(self):
        base = {
            "free": self.k,
            "geometric": 1,
            "ar2": 2,
            "ar3": 3,
        }
        if self.kind == "pt":
            return 2 * (self.order - 1) + 2 + 1
        return base[self.kind] + 1

    def to_vector(self, structure, beta):
        lo = self._alpha_low
        if self.kind == "free":
            head = [_from_interval(v, lo, 1.0) for v in structure.values]
        elif self.kind == "geometric":
            head = [_from_interval(structure.alpha, lo, 1.0)]
        elif self.kind in ("ar2", "ar3"):
            head = [_from_interval(r, -1.0, 1.0) for r in structure.pacf]
        else:
            # power-mean recurrences need nonnegative seed coefficients
            head = [_from_interval(v, 0.0, 1.0) for v in structure.init]
            head += list(structure.big_gamma)
            head.append(np.log(structure.delta))
            head.append(_from_interval(structure.decay_rate(), 0.0, 1.0))
        head.append(_from_interval(beta, _BETA_EPS, 1.0 - _BETA_EPS))
        return np.asarray(head, dtype=float)

    def from_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {vec.size}")
        lo = self._alpha_low
        beta = float(_to_interval(vec[-1], _BETA_EPS, 1.0 - _BETA_EPS))
        body = vec[:-1]
        if self.kind == "free":
            structure = FreeAlpha(tuple(_to_interval(body, lo, 1.0)))
        elif self.kind == "geometric":
            structure = GeometricAlpha(float(_to_interval(body[0], lo, 1.0)))
        elif self.kind in ("ar2", "ar3"):
            structure = ARCorrAlpha(tuple(_to_interval(body, -1.0, 1.0)))
        else:
            m = self.order - 1
            init = tuple(_to_interval(body[:m], 0.0, 1.0))
            big_gamma = tuple(body[m : 2 * m])
            delta = float(np.exp(np.clip(body[2 * m], -12.0, 12.0)))
            rate = float(_to_interval(body[2 * m + 1], 0.0, 1.0))
            g = np.append(big_gamma, -np.sum(big_gamma))
            e = np.exp(g - g.max())
            gammas = e / e.sum()
            c = rate / _power_mean_rate(gammas, delta)
            structure = PTAlpha(
                order=self.order, init=init, big_gamma=big_gamma, c=c, delta=delta
            )
        return structure, beta


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------

def structure_to_dict(structure):
    if isinstance(structure, FreeAlpha):
        return {"kind": "free", "values": list(structure.values)}
    if isinstance(structure, GeometricAlpha):
        return {"kind": "geometric", "alpha": structure.alpha}
    if isinstance(structure, ARCorrAlpha):
        return {"kind": f"ar{structure.order}", "pacf": list(structure.pacf)}
    if isinstance(structure, PTAlpha):
        return {
            "kind": "pt",
            "order": structure.order,
            "init": list(structure.init),
            "big_gamma": list(structure.big_gamma),
            "c": structure.c,
            "delta": structure.delta,
        }
    raise InputError(f"unknown alpha structure {type(structure).__name__}")


def structure_from_dict(d):
    kind = d.get("kind")
    if kind == "free":
        return FreeAlpha(tuple(d["values"]))
    if kind == "geometric":
        return GeometricAlpha(float(d["alpha"]))
    if kind in ("ar2", "ar3"):
        return ARCorrAlpha(tuple(d["pacf"]))
    if kind == "pt":
        return PTAlpha(
            order=int(d["order"]),
            init=tuple(d["init"]),
            big_gamma=tuple(d["big_gamma"]),
            c=float(d["c"]),
            delta=float(d["delta"]),
        )
    raise InputError(f"unknown alpha structure kind {kind!r}")


def spec_to_dict(spec):
    return {
        "model": spec.model,
        "structure": structure_to_dict(spec.structure),
        "beta": spec.beta,
        "k": spec.k,
    }


def spec_from_dict(d):
    return NormingSpec(
        model=d["model"],
        structure=structure_from_dict(d["structure"]),
        beta=float(d["beta"]),
        k=int(d["k"]),
    )
