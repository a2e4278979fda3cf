"""Tests for the recursive multi-fidelity GP: fitting, prediction, sampling, build."""

import time

import numpy as np
import pytest

from mfdb import gp, mfgp
from mfdb.benchmarks import high_fidelity, low_fidelity

LF_GRID = np.linspace(0.0, 1.0, 21)[:, None]
HF_POINTS = np.array([[0.0], [0.4], [0.6], [1.0]])


def dataset(x, y, sd=0.0):
    return gp.Dataset(x, y, np.broadcast_to(np.asarray(sd, float), np.shape(y)))


def lf_spec(x=LF_GRID, sd=0.0, seed=0):
    return mfgp.LevelSpec(
        dataset(x, low_fidelity(x[:, 0]), sd), optimizer=gp.OptimizerConfig(seed=seed)
    )


@pytest.fixture(scope="module")
def base_model():
    return mfgp.fit_level(None, lf_spec())


class TestFitLevel:
    def test_identity_correction_recovers_unit_trend(self, base_model):
        x2 = np.linspace(0.05, 0.95, 8)[:, None]
        y2 = base_model.mean_at(x2, 1)
        spec = mfgp.LevelSpec(
            dataset(x2, y2),
            level_basis=gp.BasisSpec(0),
            trend_basis=gp.BasisSpec(0),
        )
        model = mfgp.fit_level(base_model, spec)
        level = model.upper[0]
        assert abs(level.beta_rho[0] - 1.0) < 1e-3
        assert abs(level.beta_level[0]) < 1e-3

    def test_scaled_data_recovers_trend_coefficient(self, base_model):
        x2 = np.linspace(0.0, 1.0, 9)[:, None]
        y2 = 2.0 * low_fidelity(x2[:, 0])
        spec = mfgp.LevelSpec(
            dataset(x2, y2),
            level_basis=gp.BasisSpec(0),
            trend_basis=gp.BasisSpec(0),
        )
        model = mfgp.fit_level(base_model, spec)
        assert model.upper[0].beta_rho[0] == pytest.approx(2.0, rel=0.02)

    def test_multi_fidelity_beats_single_fidelity(self, base_model):
        y_hf = high_fidelity(HF_POINTS[:, 0])
        mf = mfgp.fit_level(
            base_model,
            mfgp.LevelSpec(dataset(HF_POINTS, y_hf), level_basis=gp.BasisSpec(0)),
        )
        sf = gp.fit(dataset(HF_POINTS, y_hf), gp.BasisSpec(1))
        grid = np.linspace(0, 1, 200)[:, None]
        truth = high_fidelity(grid[:, 0])
        mf_mean, _ = mf.predict(grid)
        sf_mean, _ = sf.predict(grid)
        mf_rmse = np.sqrt(np.mean((mf_mean - truth) ** 2))
        sf_rmse = np.sqrt(np.mean((sf_mean - truth) ** 2))
        assert mf_rmse < sf_rmse

    def test_degenerate_level_rejected(self, base_model):
        x2 = np.array([[0.5]])
        spec = mfgp.LevelSpec(dataset(x2, [1.0]), level_basis=gp.BasisSpec(1))
        with pytest.raises(gp.GPError, match="degenerate"):
            mfgp.fit_level(base_model, spec)


class TestPredict:
    def test_single_level_identical_to_plain_gp(self):
        data = dataset(LF_GRID, low_fidelity(LF_GRID[:, 0]), 0.01)
        model = mfgp.build([mfgp.LevelSpec(data)])
        plain = gp.fit(data, gp.BasisSpec(1), gp.OptimizerConfig())
        grid = np.linspace(-0.2, 1.2, 40)[:, None]
        m1, c1 = model.predict(grid)
        m2, c2 = plain.predict(grid)
        assert np.max(np.abs(m1 - m2)) < 1e-12
        assert np.max(np.abs(c1 - c2)) < 1e-12

    def test_zero_discrepancy_collapses_to_previous_level(self, base_model):
        x2 = np.linspace(0.1, 0.9, 10)[:, None]
        y2 = base_model.mean_at(x2, 1)
        model = mfgp.fit_level(
            base_model,
            mfgp.LevelSpec(
                dataset(x2, y2), level_basis=gp.BasisSpec(0), trend_basis=gp.BasisSpec(0)
            ),
        )
        grid = np.linspace(0, 1, 50)[:, None]
        m2, _ = model.predict(grid)
        m1, _ = model.predict(grid, level=1)
        assert np.max(np.abs(m2 - m1)) < 1e-6

    def test_high_fidelity_value_within_two_sigma(self, base_model):
        y_hf = high_fidelity(HF_POINTS[:, 0])
        model = mfgp.fit_level(
            base_model,
            mfgp.LevelSpec(dataset(HF_POINTS, y_hf), level_basis=gp.BasisSpec(0)),
        )
        mean, cov = model.predict([[0.0]])
        truth = high_fidelity(0.0)
        assert truth == pytest.approx(2.4832, abs=1e-4)
        # small absolute slack: at a noiseless training point 2*sigma is zero
        # and the mean recovers the observation only to solver precision
        assert abs(mean[0] - truth) <= 2.0 * np.sqrt(cov[0, 0]) + 1e-6

    def test_variance_finite_and_nonnegative(self, base_model):
        y_hf = high_fidelity(HF_POINTS[:, 0])
        model = mfgp.fit_level(base_model, mfgp.LevelSpec(dataset(HF_POINTS, y_hf)))
        grid = np.linspace(-0.5, 1.5, 60)[:, None]
        _, cov = model.predict(grid)
        var = np.diag(cov)
        assert np.all(np.isfinite(var))
        assert np.all(var >= 0)

    def test_unknown_level_rejected(self, base_model):
        with pytest.raises(gp.GPError):
            base_model.predict([[0.0]], level=2)

    def test_non_nested_designs_supported(self):
        # remove every HF location from the LF design to force non-nestedness
        lf_nested = LF_GRID
        keep = ~np.isin(np.round(lf_nested[:, 0], 12), np.round(HF_POINTS[:, 0], 12))
        lf_disjoint = lf_nested[keep]
        y_hf = high_fidelity(HF_POINTS[:, 0])

        def fit_with(lf_x):
            base = mfgp.fit_level(None, lf_spec(lf_x))
            return mfgp.fit_level(
                base, mfgp.LevelSpec(dataset(HF_POINTS, y_hf), level_basis=gp.BasisSpec(0))
            )

        grid = np.linspace(0, 1, 100)[:, None]
        nested_mean, _ = fit_with(lf_nested).predict(grid)
        disjoint_mean, _ = fit_with(lf_disjoint).predict(grid)
        rel = np.linalg.norm(disjoint_mean - nested_mean) / np.linalg.norm(nested_mean)
        assert rel < 0.10


class TestSample:
    @pytest.fixture(scope="class")
    def model(self):
        base = mfgp.fit_level(None, lf_spec(sd=0.05))
        y_hf = high_fidelity(HF_POINTS[:, 0])
        return mfgp.fit_level(
            base, mfgp.LevelSpec(dataset(HF_POINTS, y_hf, 0.05), level_basis=gp.BasisSpec(0))
        )

    def test_zero_covariance_returns_mean(self, base_model):
        x2 = np.linspace(0, 1, 6)[:, None]
        y2 = base_model.mean_at(x2, 1)
        model = mfgp.fit_level(
            base_model,
            mfgp.LevelSpec(
                dataset(x2, y2), level_basis=gp.BasisSpec(0), trend_basis=gp.BasisSpec(0)
            ),
        )
        draws = model.sample(x2, count=5, seed=9)
        mean, _ = model.predict(x2)
        assert np.allclose(draws, mean[None, :], atol=1e-3)

    def test_seed_reproducibility(self, model):
        q = np.linspace(0, 1, 7)[:, None]
        a = model.sample(q, count=4, seed=123)
        b = model.sample(q, count=4, seed=123)
        assert np.array_equal(a, b)

    def test_empirical_variance_matches_predictive(self, model):
        q = np.array([[0.2], [0.5], [0.8]])
        mean, cov = model.predict(q)
        draws = model.sample(q, count=10_000, seed=2)
        emp_var = draws.var(axis=0, ddof=1)
        assert np.allclose(emp_var, np.diag(cov), rtol=0.05)


class TestBuild:
    def test_single_level_build(self):
        data = dataset(LF_GRID, low_fidelity(LF_GRID[:, 0]), 0.0)
        model = mfgp.build([mfgp.LevelSpec(data)])
        assert model.n_levels == 1
        mean, _ = model.predict([[0.5]])
        plain_mean, _ = gp.fit(data).predict([[0.5]])
        assert mean[0] == pytest.approx(plain_mean[0], abs=1e-12)

    def test_empty_build_rejected(self):
        with pytest.raises(gp.GPError):
            mfgp.build([])

    def test_three_levels_complete_quickly(self):
        rng = np.random.default_rng(0)
        x1 = np.sort(rng.uniform(0, 1, 200))[:, None]
        x2 = np.sort(rng.uniform(0, 1, 50))[:, None]
        x3 = np.sort(rng.uniform(0, 1, 10))[:, None]
        start = time.perf_counter()
        model = mfgp.build(
            [
                mfgp.LevelSpec(dataset(x1, low_fidelity(x1[:, 0]), 0.1)),
                mfgp.LevelSpec(
                    dataset(x2, 1.5 * low_fidelity(x2[:, 0]) + 1.0, 0.05),
                    level_basis=gp.BasisSpec(0),
                ),
                mfgp.LevelSpec(
                    dataset(x3, high_fidelity(x3[:, 0]), 0.05), level_basis=gp.BasisSpec(0)
                ),
            ]
        )
        elapsed = time.perf_counter() - start
        assert model.n_levels == 3
        assert elapsed < 10.0
        mean, cov = model.predict(np.linspace(0, 1, 30)[:, None])
        assert np.all(np.isfinite(mean))
        assert np.all(np.diag(cov) >= 0)

    def test_out_of_order_stacking_rejected(self, base_model):
        two = mfgp.fit_level(
            base_model,
            mfgp.LevelSpec(
                dataset(HF_POINTS, high_fidelity(HF_POINTS[:, 0])),
                level_basis=gp.BasisSpec(0),
            ),
        )
        level = two.upper[0]
        with pytest.raises(gp.GPError, match="bottom-up"):
            mfgp.MFGPModel(base=base_model.base, upper=[level, level])
