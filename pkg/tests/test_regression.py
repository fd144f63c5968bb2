"""Tests for kernel regularized least squares and the small-gain certificate."""

import math

import numpy as np
import pytest
from scipy.linalg import LinAlgError

import fmkid.regression as regression
from fmkid.kernels import (
    BilinearKernel,
    LpvKernel,
    RbfKernel,
    WindowSet,
    eval_kernel,
    gram,
)
from fmkid.regression import (
    Dataset,
    FitError,
    dataset_sha256,
    fit,
    lipschitz_bound,
    load_model,
    read_dataset_csv,
    rkhs_norm,
    save_model,
    small_gain_check,
    write_dataset_csv,
)
from fmkid.signals import (
    ExpWeight,
    GridMismatchError,
    PastWindow,
    TimeGrid,
    weighted_norm,
)

GRID = TimeGrid(dt=0.01, n=201)
WEIGHT = ExpWeight(4.0)
RBF = RbfKernel(weight=WEIGHT, sigma=1.0)


def smooth_window(seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return PastWindow(grid=GRID, samples=np.cumsum(rng.normal(size=GRID.n)) * scale)


def random_dataset(seed, count=20):
    rng = np.random.default_rng(seed)
    wins = [smooth_window(seed * 1000 + i) for i in range(count)]
    return Dataset(windows=wins, targets=rng.normal(size=count))


class TestFit:
    def test_single_pair_closed_form(self):
        u = smooth_window(5)
        kuu = eval_kernel(RBF, u, u)
        gamma = 0.3
        m = fit(Dataset(windows=[u], targets=[2.0]), RBF, gamma)
        assert m.alpha[0] == pytest.approx(2.0 / (kuu + gamma), rel=1e-14)
        assert m.rkhs_norm() == pytest.approx(
            abs(2.0 / (kuu + gamma)) * math.sqrt(kuu), rel=1e-14
        )

    def test_two_point_fit_matches_explicit_inverse(self):
        # Oracle: alpha = (K + gamma I)^{-1} y written out for the 2x2 case.
        u0 = smooth_window(0)
        u1 = PastWindow(grid=GRID, samples=u0.samples + 0.3)
        k01 = eval_kernel(RBF, u0, u1)
        assert 0.05 < k01 < 0.999
        gamma = 0.1
        y = np.array([1.0, 0.0])
        det = (1 + gamma) ** 2 - k01**2
        alpha_oracle = np.array([(1 + gamma) * y[0] - k01 * y[1],
                                 -k01 * y[0] + (1 + gamma) * y[1]]) / det
        m = fit(Dataset(windows=[u0, u1], targets=y), RBF, gamma)
        assert np.allclose(m.alpha, alpha_oracle, rtol=1e-12, atol=1e-15)

    def test_residual_identity(self):
        # Kalpha = y - gamma alpha, so training predictions are y_i - gamma alpha_i.
        ds = random_dataset(1)
        gamma = 1e-3
        m = fit(ds, RBF, gamma)
        preds = np.array([m.predict(ds.windows.window(i)) for i in range(len(ds))])
        expected = ds.targets - gamma * m.alpha
        assert np.allclose(preds, expected, rtol=1e-8, atol=1e-12)

    def test_solver_residual_small(self):
        ds = random_dataset(2)
        gamma = 1e-4
        m = fit(ds, RBF, gamma)
        K = gram(RBF, ds.windows)
        resid = (K + gamma * np.eye(len(ds))) @ m.alpha - ds.targets
        assert np.max(np.abs(resid)) <= 1e-8 * np.max(np.abs(ds.targets))

    def test_interpolates_as_gamma_vanishes(self):
        ds = random_dataset(3, count=10)
        m = fit(ds, RBF, 1e-10)
        preds = np.array([m.predict(ds.windows.window(i)) for i in range(len(ds))])
        assert np.max(np.abs(preds - ds.targets)) < 1e-7

    def test_zero_targets_give_zero_model(self):
        wins = [smooth_window(i) for i in range(5)]
        m = fit(Dataset(windows=wins, targets=np.zeros(5)), RBF, 0.1)
        assert np.array_equal(m.alpha, np.zeros(5))
        assert m.rkhs_norm() == 0.0
        assert m.predict(smooth_window(99)) == 0.0

    def test_deterministic(self):
        ds = random_dataset(4)
        a = fit(ds, RBF, 1e-2).alpha
        b = fit(ds, RBF, 1e-2).alpha
        assert np.array_equal(a, b)

    def test_rejects_nonpositive_gamma(self):
        ds = random_dataset(5, count=3)
        with pytest.raises(ValueError):
            fit(ds, RBF, 0.0)
        with pytest.raises(ValueError):
            fit(ds, RBF, -1.0)

    def test_jitter_retry_is_recorded(self, monkeypatch):
        ds = random_dataset(6, count=6)
        real = regression.cho_factor
        calls = {"n": 0}

        def flaky(a, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                raise LinAlgError("forced")
            return real(a, **kw)

        monkeypatch.setattr(regression, "cho_factor", flaky)
        m = fit(ds, RBF, 1e-2)
        assert m.meta["jitter_applied"] is True
        assert calls["n"] == 2
        # The jittered solve still satisfies the residual identity loosely.
        preds = np.array([m.predict(ds.windows.window(i)) for i in range(len(ds))])
        assert np.allclose(preds, ds.targets - 1e-2 * m.alpha, rtol=1e-6, atol=1e-8)

    def test_fit_error_after_failed_jitter(self, monkeypatch):
        ds = random_dataset(7, count=4)

        def broken(a, **kw):
            raise LinAlgError("forced")

        monkeypatch.setattr(regression, "cho_factor", broken)
        with pytest.raises(FitError):
            fit(ds, RBF, 1e-2)


class TestDataset:
    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(windows=[smooth_window(1)], targets=[1.0, 2.0])

    def test_rejects_nonfinite_targets(self):
        with pytest.raises(ValueError):
            Dataset(windows=[smooth_window(1)], targets=[np.inf])

    def test_hash_is_content_addressed(self):
        wins = [smooth_window(i) for i in range(4)]
        y = [1.0, 2.0, 3.0, 4.0]
        a = dataset_sha256(Dataset(windows=wins, targets=y))
        b = dataset_sha256(Dataset(windows=wins, targets=y))
        assert a == b
        y2 = [1.0, 2.0, 3.0, 4.0 + 1e-12]
        c = dataset_sha256(Dataset(windows=wins, targets=y2))
        assert a != c


class TestRegularizationPath:
    GAMMAS = [1e-4, 1e-3, 1e-2, 1e-1, 1.0]

    def test_rkhs_norm_nonincreasing_in_gamma(self):
        for seed in range(20):
            ds = random_dataset(seed, count=12)
            norms = [fit(ds, RBF, g).rkhs_norm() for g in (1e-4, 1e-2, 1.0)]
            assert norms[0] >= norms[1] * (1 - 1e-12)
            assert norms[1] >= norms[2] * (1 - 1e-12)

    def test_training_rms_nondecreasing_in_gamma(self):
        ds = random_dataset(101)
        prev = -1.0
        for g in self.GAMMAS:
            m = fit(ds, RBF, g)
            preds = np.array(
                [m.predict(ds.windows.window(i)) for i in range(len(ds))]
            )
            rms = float(np.sqrt(np.mean((preds - ds.targets) ** 2)))
            assert rms >= prev * (1 - 1e-12)
            prev = rms


class TestLipschitzBound:
    def test_zero_model_zero_bound(self):
        m = fit(Dataset(windows=[smooth_window(1)], targets=[0.0]), RBF, 0.1)
        assert lipschitz_bound(m) == 0.0

    def test_r_defaults_from_kernel(self):
        ds = random_dataset(8, count=5)
        m = fit(ds, RbfKernel(weight=WEIGHT, sigma=0.5), 1e-2)
        assert lipschitz_bound(m) == pytest.approx(2.0 * m.rkhs_norm())
        assert lipschitz_bound(m, r=1.0) == pytest.approx(m.rkhs_norm())

    def test_lpv_requires_explicit_r(self):
        wins = [smooth_window(i) for i in range(4)]
        m = fit(
            Dataset(windows=wins, targets=[1.0, 2.0, 0.5, -1.0]),
            LpvKernel(weight=WEIGHT, sigma=1.0),
            1e-2,
        )
        with pytest.raises(ValueError):
            lipschitz_bound(m)
        assert lipschitz_bound(m, r=3.0) == pytest.approx(3.0 * m.rkhs_norm())

    def test_empirical_increments_never_exceed_bound(self):
        ds = random_dataset(9)
        m = fit(ds, RBF, 1e-2)
        beta = lipschitz_bound(m)
        worst = 0.0
        for s in range(500):
            a, b = smooth_window(5000 + s), smooth_window(9000 + s)
            dist = weighted_norm(
                PastWindow(grid=GRID, samples=a.samples - b.samples), WEIGHT
            )
            worst = max(worst, abs(m.predict(a) - m.predict(b)) / dist)
        assert worst <= beta * (1 + 1e-9)


class TestSmallGain:
    def test_zero_model_certified(self):
        m = fit(Dataset(windows=[smooth_window(1)], targets=[0.0]), RBF, 0.1)
        out = small_gain_check(m)
        assert out["beta"] == 0.0
        assert out["certified"] is True

    def test_lambda_four_threshold(self):
        # c = 1/2 at infinite horizon for rate 4, so certification means beta < 2.
        ds = random_dataset(10, count=8)
        m = fit(ds, RBF, 1e-2)
        out = small_gain_check(m, horizon=math.inf)
        assert out["c"] == 0.5
        assert out["certified"] == (out["beta"] < 2.0)

    def test_certified_flip_with_scaled_targets(self):
        wins = [smooth_window(i) for i in range(6)]
        y = np.array([0.5, -0.2, 0.1, 0.4, -0.3, 0.2])
        small = fit(Dataset(windows=wins, targets=1e-4 * y), RBF, 1e-2)
        big = fit(Dataset(windows=wins, targets=1e4 * y), RBF, 1e-2)
        assert small_gain_check(small, horizon=math.inf)["certified"] is True
        assert small_gain_check(big, horizon=math.inf)["certified"] is False

    def test_default_horizon_is_window_horizon(self):
        ds = random_dataset(11, count=4)
        m = fit(ds, RBF, 1e-2)
        out = small_gain_check(m)
        expected_c = math.sqrt(-math.expm1(-WEIGHT.rate * GRID.horizon) / WEIGHT.rate)
        assert out["c"] == pytest.approx(expected_c, rel=1e-14)


class TestPredict:
    def test_grid_mismatch_raises(self):
        ds = random_dataset(12, count=3)
        m = fit(ds, RBF, 1e-2)
        other = PastWindow(grid=TimeGrid(dt=0.02, n=101), samples=np.zeros(101))
        with pytest.raises(GridMismatchError):
            m.predict(other)

    def test_module_level_aliases(self):
        ds = random_dataset(13, count=3)
        m = fit(ds, RBF, 1e-2)
        u = smooth_window(77)
        assert regression.predict(m, u) == m.predict(u)
        assert rkhs_norm(m) == m.rkhs_norm()


class TestModelIO:
    def test_round_trip_bit_stable(self, tmp_path):
        ds = random_dataset(14, count=7)
        m = fit(ds, RbfKernel(weight=WEIGHT, sigma=0.7), 1e-3)
        path = tmp_path / "model.json"
        save_model(path, m)
        back = load_model(path)
        assert back.spec == m.spec
        assert back.gamma == m.gamma
        assert back.rkhs_norm_sq == m.rkhs_norm_sq
        assert np.array_equal(back.alpha, m.alpha)
        assert np.array_equal(back.windows.matrix, m.windows.matrix)
        probe = smooth_window(123)
        assert back.predict(probe) == m.predict(probe)
        assert back.meta["dataset_sha256"] == m.meta["dataset_sha256"]

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError, match="format"):
            load_model(path)


class TestDatasetIO:
    def test_round_trip_exact(self, tmp_path):
        ds = random_dataset(15, count=6)
        path = tmp_path / "dataset.csv"
        write_dataset_csv(path, ds, extra={"note": "unit"})
        back, meta = read_dataset_csv(path)
        assert np.array_equal(back.windows.matrix, ds.windows.matrix)
        assert np.array_equal(back.targets, ds.targets)
        assert back.grid.compatible(ds.grid)
        assert meta["rows"] == 6
        assert meta["extra"] == {"note": "unit"}
        assert meta["sha256"] == dataset_sha256(ds)

    def test_detects_tampered_rows(self, tmp_path):
        ds = random_dataset(16, count=3)
        path = tmp_path / "dataset.csv"
        write_dataset_csv(path, ds)
        lines = path.read_text().splitlines()
        cells = lines[1].split(",")
        cells[0] = "99.5"
        lines[1] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="hash"):
            read_dataset_csv(path)
