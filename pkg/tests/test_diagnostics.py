import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pathloss_lab.diagnostics import (
    anova_type2,
    coefficient_t_tests,
    durbin_watson,
    jarque_bera,
    omnibus_k2,
    residual_diagnostics,
    skewness_kurtosis,
)
from pathloss_lab.features import DesignMatrix
from pathloss_lab.regression import ols_fit
from pathloss_lab.synth import moment_oracle


def random_design(rng, n=400, p=5, zero=()):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(0, 2, p)
    for j in zero:
        beta[j] = 0.0
    y = X @ beta + rng.normal(0, 1.5, n)
    return DesignMatrix(tuple(["intercept"] + [f"x{j}" for j in range(1, p)]), X, y)


class TestSignificance:
    def test_t_and_p_match_reference(self, rng):
        d = random_design(rng)
        res = ols_fit(d)
        tt = coefficient_t_tests(res)
        for label, b, se in zip(res.labels, res.coefficients, res.standard_errors):
            t, p = tt[label]
            assert t == pytest.approx(b / se)
            assert p == pytest.approx(2 * stats.t.sf(abs(t), res.df_resid), rel=1e-9, abs=1e-300)

    def test_zero_se_warns(self, rng):
        res = ols_fit(random_design(rng))
        res.standard_errors = res.standard_errors.copy()
        res.standard_errors[1] = 0.0
        with pytest.warns(RuntimeWarning):
            t, p = coefficient_t_tests(res)["x1"]
        assert math.isinf(t) and p == 0.0

    def test_true_zero_coefficient(self):
        hits = 0
        for seed in range(100):
            r = np.random.default_rng(seed)
            d = random_design(r, n=10_000, p=4, zero=(2,))
            hits += abs(coefficient_t_tests(ols_fit(d))["x2"][0]) < 3
        assert hits >= 99

    def test_f_equals_t_squared(self, rng):
        for _ in range(10):
            d = random_design(rng, n=int(rng.integers(30, 500)), p=int(rng.integers(2, 8)))
            table = anova_type2(d)
            for row in table.rows:
                assert row.F_statistic == pytest.approx(row.t_value**2, rel=1e-6)
                assert 0 <= row.p_value_F <= 1 and 0 <= row.p_value_t <= 1

    def test_grouped_term(self, rng):
        d = random_design(rng, p=5)
        table = anova_type2(d, {"pair": ("x1", "x2"), "x3": ("x3",)})
        row = table["pair"]
        assert row.df_num == 2 and math.isnan(row.t_value)
        reduced = ols_fit(d.drop(("x1", "x2")))
        full = ols_fit(d)
        F = ((reduced.rss - full.rss) / 2) / (full.rss / full.df_resid)
        assert row.F_statistic == pytest.approx(F)
        assert row.p_value_F == pytest.approx(stats.f.sf(F, 2, full.df_resid), rel=1e-9, abs=1e-300)

    def test_unknown_term_column(self, rng):
        with pytest.raises(ValueError):
            anova_type2(random_design(rng), {"t": ("nope",)})

    def test_noise_column_not_significant(self):
        hits = 0
        for seed in range(100):
            r = np.random.default_rng(1000 + seed)
            d = random_design(r, n=500).with_column("noise", r.normal(size=500))
            hits += anova_type2(d)["noise"].p_value_F > 0.05
        assert hits >= 90

    def test_json(self, rng):
        js = anova_type2(random_design(rng)).to_json()
        assert js["type"] == "II" and len(js["rows"]) == 4


class TestResidualDiagnostics:
    def test_symmetric_three_points(self):
        assert skewness_kurtosis([-1.0, 0.0, 1.0])[0] == 0.0

    def test_jb_zero_at_normal_moments(self):
        # +-(1 + sqrt 2), +-1 and four zeros have S = 0 and K = 3 exactly
        u = 1 + math.sqrt(2)
        x = np.array([u, -u, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0])
        s, k = skewness_kurtosis(x)
        assert s == 0.0 and k == pytest.approx(3.0, abs=1e-14)
        assert jarque_bera(x)[0] == pytest.approx(0.0, abs=1e-13)

    def test_dw_extremes(self):
        alt = np.array([1.0, -1.0] * 5000)
        assert durbin_watson(alt) == pytest.approx(4.0, abs=1e-3)
        assert durbin_watson(np.full(100, 2.5)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=60))
    def test_bounds(self, values):
        r = np.array(values)
        if np.ptp(r) == 0 or r @ r == 0:
            return
        assert 0.0 <= durbin_watson(r) <= 4.0 + 1e-12
        assert jarque_bera(r)[0] >= 0

    def test_against_scipy_and_oracle(self, rng):
        r = rng.standard_t(5, 5000)
        d = residual_diagnostics(r)
        mean, var, skew, kurt = moment_oracle(r)
        assert d.skewness == pytest.approx(skew, rel=1e-10)
        assert d.kurtosis == pytest.approx(kurt, rel=1e-10)
        assert d.omnibus_k2[0] == pytest.approx(stats.normaltest(r).statistic, rel=1e-9)
        assert d.jarque_bera[0] == pytest.approx(stats.jarque_bera(r).statistic, rel=1e-9)
        assert d.excess_kurtosis == pytest.approx(kurt - 3)

    def test_large_normal_sample(self, rng):
        d = residual_diagnostics(rng.standard_normal(1_000_000))
        assert abs(d.skewness) < 0.01
        assert abs(d.kurtosis - 3) < 0.03
        assert abs(d.durbin_watson - 2) < 0.01

    def test_errors(self):
        with pytest.raises(ValueError):
            residual_diagnostics(np.arange(7.0))
        with pytest.raises(ValueError):
            residual_diagnostics(np.ones(20))
        with pytest.raises(ValueError):
            omnibus_k2(np.arange(5.0))
