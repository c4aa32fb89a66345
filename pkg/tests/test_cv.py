import numpy as np
import pytest

from entrisk.cv import (CV_COLUMNS, BiasMethod, CvConfig, cv_sweep, fold_indices, kfold_cv, select_radius,
                        tune_radius, write_cv_csv)
from entrisk.dro import AmbiguityBall, dro_solve_linear
from entrisk.errors import InputError
from entrisk.fitting import RiskMatchConfig
from entrisk.risk import empirical_risk


def constant(train, eps):
    return 0.0


def as_loss(decision, rows):
    return rows[:, 0] + decision


class TestFolds:
    def test_partition(self):
        parts = fold_indices(23, 5)
        assert sorted(np.concatenate(parts).tolist()) == list(range(23))
        assert [len(p) for p in parts] == [5, 5, 5, 4, 4]

    def test_shuffled_partition(self):
        parts = fold_indices(20, 4, shuffle=True, seed=1)
        assert sorted(np.concatenate(parts).tolist()) == list(range(20))

    def test_too_few_rows(self):
        with pytest.raises(InputError):
            fold_indices(3, 5)


class TestKfold:
    def test_constant_decision_example(self):
        data = np.arange(1.0, 11.0)[:, None]
        res = kfold_cv(data, 5, 0.0, constant, as_loss, 1.0)
        folds = [data[k::5, 0] for k in range(5)]
        risks = [empirical_risk(f, 1.0) for f in folds]
        assert res.fold_risks == pytest.approx(risks)
        assert res.rho_raw == pytest.approx(np.log(np.mean(np.exp(risks))))
        assert sorted(res.pooled) == list(range(1, 11))
        assert res.rho_pooled(1.0) == pytest.approx(empirical_risk(data[:, 0], 1.0))

    def test_leave_one_out(self):
        data = np.array([[1.0], [2.0], [4.0]])
        res = kfold_cv(data, 3, 0.0, lambda tr, e: -tr.mean(), as_loss, 0.5)
        # each held-out loss is the point minus the mean of the others
        expected = np.array([1 - 3.0, 2 - 2.5, 4 - 1.5])
        assert np.sort(res.pooled) == pytest.approx(np.sort(expected))

    def test_zero_alpha_aggregates_by_mean(self):
        data = np.arange(6.0)[:, None]
        res = kfold_cv(data, 3, 0.0, constant, as_loss, 0.0)
        assert res.rho_raw == pytest.approx(2.5)


class TestSelection:
    def test_config_validation(self):
        with pytest.raises(InputError):
            CvConfig(folds=1)
        with pytest.raises(InputError):
            CvConfig(radii=(1.0, 0.5))
        with pytest.raises(InputError):
            CvConfig(radii=())
        with pytest.raises(InputError):
            CvConfig(method="jackknife")

    def test_flat_curve_picks_largest(self):
        data = np.random.default_rng(0).normal(size=(20, 1))
        cfg = CvConfig(radii=(0.0, 0.5, 1.0))
        res = tune_radius(data, cfg, constant, as_loss, 1.0)
        assert res.epsilon_star == 1.0
        assert all(r.delta == 0 for r in res.records)

    def test_single_radius(self):
        data = np.random.default_rng(0).normal(size=(20, 1))
        res = tune_radius(data, CvConfig(radii=(0.7,)), constant, as_loss, 1.0)
        assert res.epsilon_star == 0.7

    def test_corrected_adds_delta(self):
        rng = np.random.default_rng(1)
        data = rng.gamma(4.0, 0.5, size=(40, 1))
        cfg = CvConfig(radii=(0.0, 1.0), reps=50, method="bs_evt", seed=3)
        sweep = cv_sweep(data, cfg, constant, as_loss, 1.0)
        res = select_radius(sweep, cfg.method, 1.0, cfg)
        for r in res.records:
            assert r.rho_corrected == pytest.approx(r.rho_raw + r.delta)
            assert r.delta != 0
        again = select_radius(sweep, "bs-evt", 1.0, cfg)
        assert again.corrected() == pytest.approx(res.corrected())

    def test_methods_share_sweep(self):
        rng = np.random.default_rng(2)
        data = rng.normal(1.0, 1.0, size=(60, 2))

        def solver(train, eps):
            return dro_solve_linear(train, 1.0, AmbiguityBall(eps), 0.0, 1.0)[0]

        def loss(z, rows):
            return rows @ z

        cfg = CvConfig(radii=(0.0, 0.5, 2.0), reps=30, risk_match=RiskMatchConfig(max_iter=30))
        sweep = cv_sweep(data, cfg, solver, loss, 1.0)
        for m in BiasMethod:
            res = select_radius(sweep, m, 1.0, cfg)
            assert res.epsilon_star in cfg.radii
            assert [r.rho_raw for r in res.records] == [f.rho_raw for f in sweep]

    def test_csv(self, tmp_path):
        data = np.random.default_rng(0).normal(size=(10, 1))
        res = tune_radius(data, CvConfig(radii=(0.0, 1.0)), constant, as_loss, 1.0)
        path = tmp_path / "cv.csv"
        write_cv_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == CV_COLUMNS
        assert [ln.split(",")[-1] for ln in lines[1:]] == ["0", "1"]
