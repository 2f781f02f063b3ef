import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtri

from tailchain.errors import InputError
from tailchain.margins import laplace_cdf, laplace_quantile
from tailchain.generators import (
    GeneratorSpec,
    generate,
    inv_logistic_conditional_sample,
    inv_logistic_conditional_survival,
    inv_logistic_joint_survival,
    oracle_conditional_probability,
    oracle_union_probability,
)


def test_spec_validation():
    with pytest.raises(InputError):
        GeneratorSpec("gauss_ar1", 1, 0, {"rho": 0.5})
    with pytest.raises(InputError):
        GeneratorSpec("gauss_ar1", 100, 0, {"rho": 1.0})
    with pytest.raises(InputError):
        GeneratorSpec("gauss_ar1", 100, 0, {})
    with pytest.raises(InputError):
        GeneratorSpec("gauss_ar2", 100, 0, {"theta1": 0.8, "theta2": 0.3})
    with pytest.raises(InputError):
        GeneratorSpec("inv_logistic", 100, 0, {"gamma": 0.0})
    with pytest.raises(InputError):
        GeneratorSpec("white_noise", 100, 0, {})
    GeneratorSpec("inv_logistic", 100, 0, {"gamma": 1.0})


def test_generate_shape_and_determinism():
    spec = GeneratorSpec("gauss_ar1", 5000, 11, {"rho": 0.7})
    s1 = generate(spec)
    s2 = generate(spec)
    assert s1.values.size == 5000 and s1.segments == ((0, 5000),)
    np.testing.assert_array_equal(s1.values, s2.values)


@pytest.mark.parametrize("kind,params", [
    ("gauss_ar1", {"rho": 0.7}),
    ("gauss_ar2", {"theta1": 0.6, "theta2": 0.3}),
    ("inv_logistic", {"gamma": 0.5}),
])
def test_prefix_determinism(kind, params):
    short = generate(GeneratorSpec(kind, 1000, 3, params)).values
    long = generate(GeneratorSpec(kind, 250_000, 3, params)).values
    np.testing.assert_array_equal(short, long[:1000])


def test_gauss_to_laplace_map_is_exact():
    from tailchain.generators import _laplace_from_gauss
    from scipy.special import ndtr

    y = np.linspace(-8.5, 8.5, 2001)
    got = _laplace_from_gauss(y)
    # reference through the cdf composition, stable on the inner range
    inner = np.abs(y) < 5.0
    np.testing.assert_allclose(
        got[inner], laplace_quantile(ndtr(y[inner])), atol=1e-12
    )
    # deep tails: the exponent relation x = -log(2 * (1 - Phi(y))) must hold
    assert np.all(np.isfinite(got))
    assert np.all(np.diff(got) > 0.0)


def test_exponential_to_laplace_map_is_exact():
    from tailchain.generators import _laplace_from_exponential

    y = np.unique(
        np.concatenate([np.geomspace(1e-12, 0.5, 200), np.linspace(0.5, 40.0, 200)])
    )
    got = _laplace_from_exponential(y)
    inner = (y > 1e-8) & (y < 13.0)
    np.testing.assert_allclose(
        got[inner], laplace_quantile(-np.expm1(-y[inner])), atol=1e-10
    )
    assert np.all(np.diff(got) > 0.0)
    # above log(2) the map is an exact shift (the reference loses precision
    # there, the direct form does not)
    high = y >= np.log(2.0)
    np.testing.assert_array_equal(got[high], y[high] - np.log(2.0))


def test_margins_are_exactly_laplace_iid_case():
    # gamma = 1 gives an iid chain, so the KS p-value is valid
    x = generate(GeneratorSpec("inv_logistic", 100_000, 17, {"gamma": 1.0})).values
    res = stats.kstest(x, laplace_cdf)
    assert res.pvalue > 1e-3


@pytest.mark.parametrize("kind,params", [
    ("gauss_ar1", {"rho": 0.7}),
    ("gauss_ar2", {"theta1": 0.6, "theta2": 0.3}),
    ("inv_logistic", {"gamma": 0.5}),
])
def test_margins_dependent_cases_moments(kind, params):
    # dependent series: probability-integral values have exact uniform
    # margins; check moments with dependence-tolerant bands
    x = generate(GeneratorSpec(kind, 200_000, 17, params)).values
    u = laplace_cdf(x)
    assert abs(np.mean(u) - 0.5) < 0.01
    assert abs(np.var(u) - 1.0 / 12.0) < 0.005
    assert abs(np.mean(x > laplace_quantile(0.95)) - 0.05) < 0.005


def test_gauss_ar1_lag_correlations():
    x = generate(GeneratorSpec("gauss_ar1", 400_000, 23, {"rho": 0.7})).values
    g = ndtri(laplace_cdf(x))
    for lag, target in ((1, 0.7), (2, 0.49), (3, 0.343)):
        c = np.corrcoef(g[:-lag], g[lag:])[0, 1]
        assert abs(c - target) < 0.01
    # unit variance of the recovered Gaussian (dependence widens the band)
    assert abs(np.var(g) - 1.0) < 0.02


def test_gauss_ar2_yule_walker_correlations():
    x = generate(
        GeneratorSpec("gauss_ar2", 400_000, 29, {"theta1": 0.6, "theta2": 0.3})
    ).values
    g = ndtri(laplace_cdf(x))
    rho1 = 6.0 / 7.0
    rho2 = 0.6 * rho1 + 0.3
    rho3 = 0.6 * rho2 + 0.3 * rho1
    for lag, target in ((1, rho1), (2, rho2), (3, rho3)):
        c = np.corrcoef(g[:-lag], g[lag:])[0, 1]
        assert abs(c - target) < 0.01
    # slow-decaying autocorrelation: effective sample is ~n/25
    assert abs(np.var(g) - 1.0) < 0.04


def test_inv_logistic_gamma_one_is_independence():
    x = generate(GeneratorSpec("inv_logistic", 200_000, 31, {"gamma": 1.0})).values
    c = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(c) < 0.01
    assert abs(inv_logistic_joint_survival(1.0, 2.0, 1.0) - np.exp(-3.0)) < 1e-14


def test_inv_logistic_conditional_survival_matches_derivative():
    # S(y | x) = exp(x) * (-d/dx) joint survival, checked by central difference
    gamma, x = 0.5, 3.0
    ys = np.array([0.5, 1.0, 2.0, 4.0, 8.0])
    h = 1e-6
    fd = -(inv_logistic_joint_survival(x + h, ys, gamma)
           - inv_logistic_joint_survival(x - h, ys, gamma)) / (2.0 * h)
    np.testing.assert_allclose(
        inv_logistic_conditional_survival(ys, x, gamma), np.exp(x) * fd, rtol=1e-6
    )


def test_inv_logistic_conditional_survival_is_proper():
    s = inv_logistic_conditional_survival(np.array([1e-12, 1e3]), 2.0, 0.5)
    assert abs(s[0] - 1.0) < 1e-6 and s[1] < 1e-200


def test_inv_logistic_conditional_sampler_ks():
    rng = np.random.default_rng(np.random.Philox(key=44))
    x, gamma = 3.0, 0.5
    draws = inv_logistic_conditional_sample(x, gamma, rng, 20_000)
    cdf = lambda y: 1.0 - inv_logistic_conditional_survival(y, x, gamma)
    res = stats.kstest(draws, cdf)
    assert res.pvalue > 1e-3


def test_inv_logistic_chain_matches_conditional_law():
    # one long chain: values following an exceedance of t should follow the
    # conditional law at roughly that conditioning level
    x = generate(GeneratorSpec("inv_logistic", 200_000, 37, {"gamma": 0.5})).values
    v = float(laplace_quantile(0.98))
    c = np.corrcoef(x[:-1] > v, x[1:] > v)[0, 1]
    assert c > 0.0  # positive serial extremal association for gamma < 1


# ---------------------------------------------------------------------------
# direct-simulation oracles, checked against closed forms for independence
# ---------------------------------------------------------------------------

def test_oracles_match_iid_closed_forms():
    spec = GeneratorSpec("inv_logistic", 2, 53, {"gamma": 1.0})
    v = float(laplace_quantile(0.9))
    p = 0.1
    n = 2_000_000

    theta = oracle_conditional_probability(spec, "theta", n, v, 3)
    assert abs(theta.estimate - (1.0 - p) ** 2) < 4.0 * theta.std_error + 1e-12

    chi = oracle_conditional_probability(spec, "chi", n, v, 2)
    assert abs(chi.estimate - p) < 4.0 * chi.std_error + 1e-12

    pr = oracle_conditional_probability(spec, "p", n, v, 4, r=2)
    # exactly 2 exceedances in the window of 4 given the first exceeds
    target = 3 * p * (1.0 - p) ** 2
    assert abs(pr.estimate - target) < 4.0 * pr.std_error + 1e-12

    un = oracle_union_probability(spec, n, v, 5)
    assert abs(un.estimate - (1.0 - (1.0 - p) ** 5)) < 4.0 * un.std_error + 1e-12


def test_oracle_chi_against_gaussian_orthant():
    # bivariate-normal orthant probability gives chi(v, 1) exactly
    spec = GeneratorSpec("gauss_ar1", 2, 59, {"rho": 0.7})
    v = float(laplace_quantile(0.95))
    z = ndtri(laplace_cdf(v))
    joint = stats.multivariate_normal(
        mean=[0.0, 0.0], cov=[[1.0, 0.7], [0.7, 1.0]]
    ).cdf([-z, -z])  # P(Z1 > z, Z2 > z) by symmetry
    target = joint / 0.05
    rep = oracle_conditional_probability(spec, "chi", 2_000_000, v, 1)
    assert abs(rep.estimate - target) < 4.0 * rep.std_error


def test_oracle_chi_decreasing_in_level():
    # asymptotic independence: serial chi falls as the level rises
    spec = GeneratorSpec("gauss_ar1", 2, 61, {"rho": 0.7})
    chis = [
        oracle_conditional_probability(
            spec, "chi", 2_000_000, float(laplace_quantile(q)), 1
        ).estimate
        for q in (0.9, 0.95, 0.99)
    ]
    assert chis[0] > chis[1] > chis[2]


def test_oracle_validation():
    spec = GeneratorSpec("gauss_ar1", 2, 0, {"rho": 0.7})
    with pytest.raises(InputError):
        oracle_conditional_probability(spec, "max", 1000, 2.0, 3)
    with pytest.raises(InputError):
        oracle_conditional_probability(spec, "theta", 1000, 2.0, 1)
    with pytest.raises(InputError):
        oracle_conditional_probability(spec, "p", 1000, 2.0, 3)
    with pytest.raises(InputError):
        oracle_conditional_probability(spec, "theta", 1000, 50.0, 3)
