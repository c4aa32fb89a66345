import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import EX2, PROJECT_GMM
from entrisk.distributions import STD_FLOOR, Gmm, gmm_fit_em, gmm_sample
from entrisk.errors import InputError
from entrisk.estimators import (EstimatorConfig, EstimatorKind, bias_correct, bootstrap_classic, estimate, loocv,
                                mle_estimate, mom, oic, saa)
from entrisk.fitting import RiskMatchConfig
from entrisk.risk import empirical_risk, gmm_risk

FAST = EstimatorConfig(reps=100, risk_match=RiskMatchConfig(max_iter=50))
losses = arrays(np.float64, st.integers(2, 30), elements=st.floats(-10, 10))


def naive_loocv(x, a):
    mp.mp.dps = 30
    total = mp.mpf(0)
    for i in range(len(x)):
        rest = [mp.mpf(v) for j, v in enumerate(x) if j != i]
        t = mp.log(sum(mp.e ** (a * v) for v in rest) / len(rest)) / a
        total += t + (mp.e ** (a * (mp.mpf(x[i]) - t)) - 1) / a
    return float(total / len(x))


class TestSimpleEstimators:
    def test_saa(self):
        assert saa([2.0, 2.0], 1.0) == pytest.approx(2.0)
        assert saa([0.0, 1.0], 1.0) == pytest.approx(0.620115, abs=1e-6)
        assert saa([1.0, 3.0], 0.0) == 2.0

    def test_loocv_constant(self):
        assert loocv([3.0] * 5, 2.0) == pytest.approx(3.0)

    def test_loocv_two_points(self):
        assert loocv([0.0, 1.0], 1.0) == pytest.approx(naive_loocv([0.0, 1.0], 1.0), abs=1e-12)
        assert loocv([0.0, 1.0], 1.0) == pytest.approx((math.exp(-1) + math.e - 1) / 2, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(losses, st.floats(0.1, 3))
    def test_loocv_matches_direct(self, x, a):
        assert loocv(x, a) == pytest.approx(naive_loocv(list(x), a), rel=1e-9, abs=1e-9)

    def test_loocv_needs_two(self):
        with pytest.raises(InputError):
            loocv([1.0], 1.0)

    def test_loocv_above_saa_on_projects(self):
        above = 0
        for s in range(40):
            x = 0.8 * gmm_sample(PROJECT_GMM, 1000, seed=s)
            above += loocv(x, 3.0) >= saa(x, 3.0)
        assert above >= 30

    def test_oic(self):
        assert oic([1.0] * 4, 2.0) == pytest.approx(1.0, abs=1e-15)
        e = np.array([1.0, math.e])
        expected = saa([0.0, 1.0], 1.0) + e.var() / (2 * e.mean() ** 2)
        assert oic([0.0, 1.0], 1.0) == pytest.approx(expected, abs=1e-14)

    @given(losses, st.floats(0.1, 3))
    def test_oic_above_saa(self, x, a):
        assert oic(x, a) >= saa(x, a)

    def test_mom(self):
        assert mom([2.0] * 9, 1.0) == pytest.approx(2.0)
        assert mom([0.0, 0.0, 1.0, 1.0], 1.0) == pytest.approx(0.5)
        assert mom([4.2], 3.0) == pytest.approx(4.2)

    def test_bootstrap(self):
        assert bootstrap_classic([1.5] * 7, 2.0, 50, seed=1) == pytest.approx(1.5)
        assert bootstrap_classic([0.0, 1.0, 5.0], 1.0, 20, seed=3) == bootstrap_classic([0.0, 1.0, 5.0], 1.0, 20,
                                                                                        seed=3)

    def test_bootstrap_two_point_expectation(self):
        reps = 10**4
        exact = 0.25 * (0 + 2 * math.log((1 + math.e) / 2) + 1)
        # per-resample risks are 0, r, r, 1 with equal probability
        r = math.log((1 + math.e) / 2)
        sd = math.sqrt(np.var([0, r, r, 1]))
        est = bootstrap_classic([0.0, 1.0], 1.0, reps, seed=7)
        assert abs(est - exact) < 3 * sd / math.sqrt(reps)


class TestBiasCorrection:
    def test_point_mass(self):
        bc = bias_correct(np.zeros(30), 2.0, Gmm([1.0], [1.3], [0.0]), 20, seed=0)
        assert bc.delta_hat == 0.0 and bc.reps == 20

    def test_deterministic(self):
        x = gmm_sample(EX2, 300, seed=0)
        a = bias_correct(x, 1.0, EX2, 50, seed=5).delta_hat
        assert a == bias_correct(x, 1.0, EX2, 50, seed=5).delta_hat

    def test_jensen_gap_positive(self):
        positive = sum(bias_correct(np.zeros(1000), 1.0, EX2, 500, seed=s).delta_hat > 0 for s in range(50))
        assert positive >= 48

    def test_bad_reps(self):
        with pytest.raises(InputError):
            bias_correct([1.0, 2.0], 1.0, EX2, 0)


class TestDispatch:
    def test_saa_kind(self):
        x = gmm_sample(EX2, 200, seed=1)
        assert estimate("saa", x, 1.0) == empirical_risk(x, 1.0)

    def test_parse(self):
        assert EstimatorKind.parse("BS-MATCH") is EstimatorKind.BS_MATCH
        with pytest.raises(InputError):
            EstimatorKind.parse("nope")

    def test_bs_mle_on_constant_data(self):
        # EM fits a spike whose std sits at the floor; the bootstrap median of
        # resample means then scatters by about 1.25 * floor / sqrt(N * reps)
        x = np.full(50, 2.0)
        se = 1.2533 * STD_FLOOR / math.sqrt(50 * FAST.reps)
        assert estimate(EstimatorKind.BS_MLE, x, 1.0, FAST, seed=0) == pytest.approx(2.0, abs=5 * se)

    def test_mle(self):
        x = gmm_sample(EX2, 500, seed=2)
        assert mle_estimate(x, 1.0, seed=3) == pytest.approx(gmm_risk(gmm_fit_em(x, seed=3), 1.0))

    @pytest.mark.parametrize("kind", list(EstimatorKind))
    def test_all_kinds_run(self, kind):
        x = gmm_sample(EX2, 100, seed=4)
        assert math.isfinite(estimate(kind, x, 1.0, FAST, seed=0))

    @pytest.mark.parametrize("kind", ["saa", "loocv", "mom", "bs", "oic"])
    def test_exact_translation(self, kind):
        x = gmm_sample(EX2, 64, seed=5)
        assert estimate(kind, x + 3.5, 1.0, FAST, seed=1) == pytest.approx(estimate(kind, x, 1.0, FAST, seed=1) + 3.5,
                                                                          abs=1e-10)

    @pytest.mark.parametrize("kind", ["bs_mle", "bs_match", "bs_evt", "mle"])
    def test_seeded_translation(self, kind):
        x = gmm_sample(EX2, 64, seed=6)
        shifted = estimate(kind, x + 3.5, 1.0, FAST, seed=2)
        assert shifted == pytest.approx(estimate(kind, x, 1.0, FAST, seed=2) + 3.5, abs=1e-6)

    @pytest.mark.slow
    def test_projects_mle_under_evt_over(self):
        alpha, scale = 3.0, 0.8
        truth = gmm_risk(PROJECT_GMM.scaled(scale), alpha)
        cfg = EstimatorConfig(reps=500)
        mle, evt = [], []
        for s in range(100):
            x = scale * gmm_sample(PROJECT_GMM, 1000, seed=s)
            mle.append(estimate("bs_mle", x, alpha, cfg, seed=s))
            evt.append(estimate("bs_evt", x, alpha, cfg, seed=s))
        assert np.median(mle) < truth < np.median(evt)
