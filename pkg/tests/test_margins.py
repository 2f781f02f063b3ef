import numpy as np
import pytest
from scipy import stats

from tailchain.errors import InputError
from tailchain.margins import (
    LaplaceSeries,
    MarginalModel,
    RawSeries,
    fit_gpd,
    fit_marginal,
    from_laplace,
    laplace_cdf,
    laplace_quantile,
    read_series_csv,
    threshold_stability_scan,
    to_laplace,
    write_series_csv,
)


# ---------------------------------------------------------------------------
# standard Laplace helpers
# ---------------------------------------------------------------------------

def test_laplace_hand_values():
    assert abs(laplace_quantile(0.95) - 2.302585092994045) < 1e-14
    assert abs(laplace_quantile(0.99) - 3.912023005428145) < 1e-14
    assert abs(laplace_quantile(0.25) - np.log(0.5)) < 1e-14
    assert laplace_cdf(0.0) == 0.5
    assert abs(laplace_cdf(2.302585092994045) - 0.95) < 1e-14


def test_laplace_round_trip_and_domain():
    p = np.linspace(0.001, 0.999, 101)
    np.testing.assert_allclose(laplace_cdf(laplace_quantile(p)), p, atol=1e-12)
    x = np.linspace(-10.0, 10.0, 101)
    np.testing.assert_allclose(laplace_quantile(laplace_cdf(x)), x, atol=1e-9)
    with pytest.raises(InputError):
        laplace_quantile(0.0)
    with pytest.raises(InputError):
        laplace_quantile(np.array([0.5, 1.0]))


# ---------------------------------------------------------------------------
# series containers
# ---------------------------------------------------------------------------

def test_series_validation():
    RawSeries(values=np.arange(4.0), segments=((0, 2), (2, 4)))
    with pytest.raises(InputError):
        RawSeries(values=np.array([1.0, np.nan]), segments=((0, 2),))
    with pytest.raises(InputError):
        RawSeries(values=np.arange(4.0), segments=((0, 2), (3, 4)))  # gap
    with pytest.raises(InputError):
        RawSeries(values=np.arange(4.0), segments=((0, 2),))  # short cover
    with pytest.raises(InputError):
        RawSeries(values=np.empty(0), segments=())
    s = RawSeries.from_values([1.0, 2.0, 3.0])
    assert s.segments == ((0, 3),) and s.n == 3


# ---------------------------------------------------------------------------
# generalized Pareto tail fitting
# ---------------------------------------------------------------------------

def _gpd_sample(sigma, xi, n, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n)
    if xi == 0.0:
        return -sigma * np.log(u)
    return sigma / xi * (u**-xi - 1.0)


@pytest.mark.parametrize("sigma,xi", [(2.0, 0.2), (2.0, 0.0), (1.0, -0.2)])
def test_gpd_recovery(sigma, xi):
    y = _gpd_sample(sigma, xi, 20_000, seed=7)
    s_hat, x_hat, (se_s, se_x) = fit_gpd(y)
    assert abs(s_hat - sigma) < 0.1
    assert abs(x_hat - xi) < 0.05
    # standard errors should be finite and roughly 1/sqrt(n) sized
    assert 0.0 < se_s < 0.1 and 0.0 < se_x < 0.05


def test_gpd_errors():
    with pytest.raises(InputError):
        fit_gpd(np.ones(9))
    with pytest.raises(InputError):
        fit_gpd(np.array([1.0, -1.0] + [1.0] * 10))


# ---------------------------------------------------------------------------
# marginal model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gauss_series():
    rng = np.random.default_rng(314)
    return RawSeries.from_values(rng.normal(size=20_000))


@pytest.fixture(scope="module")
def gauss_marginal(gauss_series):
    return fit_marginal(gauss_series, 0.95)


def test_threshold_is_ceil_order_statistic():
    vals = np.arange(1.0, 201.0)
    rng = np.random.default_rng(0)
    series = RawSeries.from_values(rng.permutation(vals))
    m = fit_marginal(series, 0.9)
    assert m.threshold == 180.0
    assert abs(m.exceed_prob - 0.1) < 1e-12
    assert m.body[-1] == 180.0 and m.n_total == 200


def test_marginal_cdf_continuity_at_threshold(gauss_marginal):
    m = gauss_marginal
    eps = 1e-9
    below = m.cdf(m.threshold - eps)
    at = m.cdf(m.threshold)
    above = m.cdf(m.threshold + eps)
    assert abs(at - (1.0 - m.exceed_prob)) < 1e-12
    assert abs(below - at) < 1e-6 and abs(above - at) < 1e-6
    assert abs(m.sf(m.threshold) - m.exceed_prob) < 1e-12
    assert abs(m.quantile(1.0 - m.exceed_prob) - m.threshold) < 1e-9


def test_marginal_cdf_quantile_round_trip(gauss_marginal):
    p = np.linspace(0.001, 0.9999, 257)
    np.testing.assert_allclose(gauss_marginal.cdf(gauss_marginal.quantile(p)), p, atol=1e-9)


def test_transform_round_trip_from_laplace_grid(gauss_marginal):
    x = np.linspace(-8.0, 8.0, 401)
    y = from_laplace(x, gauss_marginal)
    back = to_laplace(LaplaceSeries.from_values(y), gauss_marginal).values
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_transform_round_trip_data_side(gauss_series, gauss_marginal):
    y = np.sort(gauss_series.values)[1:-1]
    lap = to_laplace(RawSeries.from_values(y), gauss_marginal)
    back = from_laplace(lap.values, gauss_marginal)
    np.testing.assert_allclose(back, y, rtol=1e-9, atol=1e-12)


def test_transform_gives_laplace_margins(gauss_series, gauss_marginal):
    lap = to_laplace(gauss_series, gauss_marginal)
    res = stats.kstest(lap.values, laplace_cdf)
    assert res.pvalue > 0.2


def test_transform_preserves_segments(gauss_marginal):
    raw = RawSeries(values=np.array([0.1, 0.5, -0.3, 0.2]), segments=((0, 2), (2, 4)))
    lap = to_laplace(raw, gauss_marginal)
    assert isinstance(lap, LaplaceSeries)
    assert lap.segments == ((0, 2), (2, 4))


def test_upper_endpoint_guard():
    rng = np.random.default_rng(5)
    y = rng.uniform(size=5000)  # bounded support -> negative fitted shape
    m = fit_marginal(RawSeries.from_values(y), 0.9)
    assert m.shape < 0.0 and np.isfinite(m.upper_endpoint)
    with pytest.raises(InputError):
        to_laplace(RawSeries.from_values(np.array([m.upper_endpoint + 1.0])), m)


def test_fit_marginal_errors(gauss_series):
    with pytest.raises(InputError):
        fit_marginal(gauss_series, 1.5)
    with pytest.raises(InputError):
        fit_marginal(RawSeries.from_values(np.arange(20.0)), 0.8)  # 4 excesses


def test_marginal_serialization_round_trip(gauss_marginal, tmp_path):
    path = tmp_path / "marginal.json"
    gauss_marginal.to_json(path)
    m2 = MarginalModel.from_json(path)
    assert m2.threshold == gauss_marginal.threshold
    assert m2.scale == gauss_marginal.scale and m2.shape == gauss_marginal.shape
    x = np.linspace(-6.0, 6.0, 41)
    np.testing.assert_allclose(from_laplace(x, m2), from_laplace(x, gauss_marginal))


def test_threshold_stability_scan(gauss_series):
    short = RawSeries.from_values(gauss_series.values[:300])
    df = threshold_stability_scan(short, [0.5, 0.8, 0.99])
    assert list(df["quantile"]) == [0.5, 0.8, 0.99]
    assert not df.loc[0, "failed"] and not df.loc[1, "failed"]
    # 0.99 quantile of 300 points leaves 3 excesses: too few
    assert bool(df.loc[2, "failed"]) and "10" in df.loc[2, "message"]


# ---------------------------------------------------------------------------
# CSV round trips
# ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    series = RawSeries(values=rng.normal(size=10), segments=((0, 4), (4, 10)))
    path = tmp_path / "series.csv"
    write_series_csv(path, series)
    back = read_series_csv(path)
    np.testing.assert_array_equal(back.values, series.values)
    assert back.segments == series.segments
    lap = read_series_csv(path, laplace=True)
    assert isinstance(lap, LaplaceSeries)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("wrong,header\n0,1.0\n")
    with pytest.raises(InputError):
        read_series_csv(p)
    p.write_text("segment_id,value\n0,1.0\n0,oops\n")
    with pytest.raises(InputError, match=r":3:"):
        read_series_csv(p)
    p.write_text("segment_id,value\n0,1.0\n0,inf\n")
    with pytest.raises(InputError, match=r":3:"):
        read_series_csv(p)
    p.write_text("segment_id,value\n")
    with pytest.raises(InputError, match="no data rows"):
        read_series_csv(p)
