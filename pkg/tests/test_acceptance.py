"""Acceptance suite: one test (and one printed pass/fail line) per criterion.

Each test exercises the public API end to end, asserts the pinned
tolerances, and enforces its runtime budget.  Run with ``-s`` (or read
captured output) to see the measured numbers behind each verdict.
"""

import math
import time

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from fmkid.harness import load_config, run_experiment
from fmkid.kernels import (
    BilinearKernel,
    ConductanceLpvKernel,
    LpvKernel,
    RbfKernel,
    TwoScaleConductanceLpvKernel,
    WindowSet,
    eval_kernel,
    gram,
    lipschitz_defect,
)
from fmkid.plants import _LTI_A, _LTI_B, _LTI_C, LtiExample, simulate_plant
from fmkid.regression import Dataset, fit, predict, small_gain_check
from fmkid.signals import (
    ExpWeight,
    PastWindow,
    TimeGrid,
    Trajectory,
    weight_energy,
    weighted_inner,
)
from fmkid.simulate import ClosedLoopConfig, ExactChannel, simulate_closed_loop
from fmkid.plants import HhPotassium, HhSodium


def _verdict(criterion: int, ok: bool, detail: str) -> None:
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _budget(criterion: int, started: float, limit: float) -> None:
    elapsed = time.perf_counter() - started
    _verdict(criterion, elapsed < limit,
             f"runtime {elapsed:.1f}s within {limit:.0f}s budget")


_GRID = TimeGrid(dt=0.02, n=101)

_VARIANTS = (
    BilinearKernel(weight=ExpWeight(4.0)),
    RbfKernel(weight=ExpWeight(4.0), sigma=1.5),
    LpvKernel(weight=ExpWeight(5.0), sigma=1.0),
    ConductanceLpvKernel(weight=ExpWeight(0.2), sigma=10.0),
    TwoScaleConductanceLpvKernel(
        weight=ExpWeight(0.2), sigma=9.5,
        weight2=ExpWeight(1.7), sigma2=2.5,
    ),
)


def test_criterion_01_kernel_validity():
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    windows = WindowSet(_GRID, 2.0 * rng.standard_normal((50, _GRID.n)))
    worst_eig_ratio = math.inf
    for spec in _VARIANTS:
        k = gram(spec, windows)
        assert np.array_equal(k, k.T), f"{type(spec).__name__} Gram asymmetric"
        eigs = np.linalg.eigvalsh(k)
        ratio = eigs.min() / np.trace(k)
        worst_eig_ratio = min(worst_eig_ratio, ratio)
        assert eigs.min() >= -1e-8 * np.trace(k), type(spec).__name__

    rbf = _VARIANTS[1]
    bound = 1.0 / rbf.sigma**2 + 1e-9
    worst_defect = 0.0
    for _ in range(1000):
        u = PastWindow(grid=_GRID, samples=2.0 * rng.standard_normal(_GRID.n))
        v = PastWindow(grid=_GRID, samples=2.0 * rng.standard_normal(_GRID.n))
        worst_defect = max(worst_defect, lipschitz_defect(rbf, u, v, rbf.weight))
    assert worst_defect <= bound
    _verdict(1, True,
             f"5 variants PSD (min eig/trace ≥ {worst_eig_ratio:.2e}); "
             f"RBF defect max {worst_defect:.6f} ≤ 1/σ²+1e-9 = {bound:.6f}")
    _budget(1, started, 10.0)


def test_criterion_02_representer_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_res, worst_pred = 0.0, 0.0
    for trial in range(20):
        n = int(rng.integers(5, 201))
        spec = _VARIANTS[trial % len(_VARIANTS)]
        gamma = 10.0 ** rng.uniform(-6, -1)
        windows = WindowSet(_GRID, 2.0 * rng.standard_normal((n, _GRID.n)))
        y = rng.standard_normal(n)
        model = fit(Dataset(windows=windows, targets=y), spec, gamma)
        k = gram(spec, windows)
        res = np.linalg.norm(
            (k + gamma * np.eye(n)) @ model.alpha - y, ord=np.inf
        )
        worst_res = max(worst_res, res / np.linalg.norm(y, ord=np.inf))
        assert res <= 1e-8 * np.linalg.norm(y, ord=np.inf)
        preds = np.array([predict(model, windows.window(i)) for i in range(n)])
        expected = y - gamma * model.alpha
        err = np.abs(preds - expected) / np.maximum(np.abs(expected), 1e-12)
        worst_pred = max(worst_pred, float(err.max()))
        assert np.allclose(preds, expected, rtol=1e-8, atol=1e-12)
    _verdict(2, True,
             f"20 datasets: residual ≤ {worst_res:.2e}·‖Y‖∞; "
             f"training predictions match y−γα to {worst_pred:.2e} rel")
    _budget(2, started, 10.0)


def test_criterion_03_small_gain_machinery():
    started = time.perf_counter()
    c_inf = weight_energy(ExpWeight(4.0), math.inf)
    assert c_inf == 0.5  # exact closed form

    window = PastWindow(grid=_GRID, samples=np.ones(_GRID.n))
    model = fit(
        Dataset(windows=[window], targets=[1.0]),
        BilinearKernel(weight=ExpWeight(4.0)),
        1e-3,
    )
    norm = model.rkhs_norm()
    outcomes = {}
    for beta_target in (2.0 - 1e-3, 2.0, 2.0 + 1e-3):
        check = small_gain_check(model, r=beta_target / norm, horizon=math.inf)
        assert check["c"] == 0.5
        expected = check["beta"] ** 2 < 1.0 / check["c"] ** 2
        assert check["certified"] == expected
        outcomes[beta_target] = check["certified"]
    assert outcomes[2.0 - 1e-3] is True
    assert outcomes[2.0 + 1e-3] is False
    _verdict(3, True,
             "weight_energy(λ=4, ∞) = 0.5 exactly; borderline β = 2 ± 1e-3 "
             f"certifies {outcomes[2.0 - 1e-3]}/{outcomes[2.0 + 1e-3]}")
    _budget(3, started, 10.0)


def test_criterion_04_lti_regimes(tmp_path):
    started = time.perf_counter()
    report = run_experiment(load_config(experiment="lti"), tmp_path)
    errs = report["metrics"]["step_rel_l2"]
    slow, fast = errs["1"], errs["30"]
    _verdict(4, slow < 0.05 and fast > 0.20,
             f"step rel L2: λ=1 → {slow:.4f} (< 0.05); λ=30 → {fast:.4f} (> 0.20)")
    _budget(4, started, 30.0)


def test_criterion_05_satlag_lipschitz_figure(tmp_path):
    started = time.perf_counter()
    report = run_experiment(load_config(experiment="satlag-rbf"), tmp_path)
    betas = report["metrics"]["beta"]
    b_hi, b_lo = betas["0.01"], betas["0.0001"]
    _verdict(5, 5.5 <= b_hi <= 22.0 and b_lo > b_hi,
             f"β(γ=0.01) = {b_hi:.3f} ∈ [5.5, 22]; "
             f"β(γ=1e-4) = {b_lo:.3f} strictly larger")
    _budget(5, started, 60.0)


def test_criterion_06_lpv_generalization(tmp_path):
    started = time.perf_counter()
    report = run_experiment(load_config(experiment="lpv-compare"), tmp_path)
    errs = report["metrics"]["rel_l2"]
    lpv_s, rbf_s = errs["lpv_step_on_sine"], errs["rbf_step_on_sine"]
    lpv_t, rbf_t = errs["lpv_sine_on_step"], errs["rbf_sine_on_step"]
    _verdict(6, lpv_s < 0.10 and lpv_s < rbf_s and lpv_t < rbf_t,
             f"step→sine: LPV {lpv_s:.4f} < 0.10 and < RBF {rbf_s:.4f}; "
             f"sine→step: LPV {lpv_t:.4f} < RBF {rbf_t:.4f}")
    _budget(6, started, 60.0)


def test_criterion_07_hh_channels_open_loop(tmp_path):
    started = time.perf_counter()
    rep_k = run_experiment(load_config(experiment="hh-k"), tmp_path / "k")
    rep_na = run_experiment(load_config(experiment="hh-na"), tmp_path / "na")
    err_k = rep_k["metrics"]["open_loop_rel_l2"]
    err_na = rep_na["metrics"]["open_loop_rel_l2"]
    _verdict(7, err_k < 0.15 and err_na < 0.25,
             f"spiky-trace rel L2: potassium {err_k:.4f} < 0.15; "
             f"sodium {err_na:.4f} < 0.25")
    _budget(7, started, 90.0)


def test_criterion_08_closed_loop_spikes(tmp_path):
    started = time.perf_counter()
    report = run_experiment(load_config(experiment="hh-closed-loop"), tmp_path)
    m = report["metrics"]
    ok = (
        m["spike_count_diff"] <= 1
        and m["matched_spikes"] >= 1
        and m["max_matched_offset"] <= 2.0
        and m["oracle_mode_rms_vs_monolithic"] <= 1.0
    )
    _verdict(8, ok,
             f"spikes {m['spike_count_true']} true / {m['spike_count_model']} "
             f"model (diff {m['spike_count_diff']} ≤ 1); "
             f"{m['matched_spikes']} matched within "
             f"{m['max_matched_offset']:.2f} ≤ 2; oracle-mode loop RMS "
             f"{m['oracle_mode_rms_vs_monolithic']:.3f} mV ≤ 1 at dt=0.01")
    _budget(8, started, 90.0)


def _rk4_observed_order() -> float:
    spec = LtiExample()
    a = np.asarray(_LTI_A, dtype=float)
    b = np.asarray(_LTI_B, dtype=float)
    c = np.asarray(_LTI_C, dtype=float)
    horizon = 1.0
    x_exact = np.linalg.solve(a, (scipy.linalg.expm(a * horizon) - np.eye(2)) @ b)
    y_exact = float(c @ x_exact)
    errs = []
    for dt in (0.02, 0.01):
        n = int(round(horizon / dt)) + 1
        traj = Trajectory(t0=0.0, dt=dt, values=np.ones(n))
        out = simulate_plant(spec, traj)
        errs.append(abs(out.values[-1] - y_exact))
    return math.log2(errs[0] / errs[1])


def _quadrature_observed_order() -> float:
    weight = ExpWeight(4.0)

    def f(t):
        return math.sin(3.0 * t + 0.7)

    def g(t):
        return math.cos(2.0 * t)

    ref, ref_err = scipy.integrate.quad(
        lambda t: f(t) * g(t) * math.exp(4.0 * t), -1.0, 0.0,
        epsabs=1e-14, epsrel=1e-14,
    )
    assert ref_err < 1e-12
    errs = []
    for dt in (0.02, 0.01):
        n = int(round(1.0 / dt)) + 1
        grid = TimeGrid(dt=dt, n=n)
        t = grid.times()
        u = PastWindow(grid=grid, samples=np.vectorize(f)(t))
        v = PastWindow(grid=grid, samples=np.vectorize(g)(t))
        errs.append(abs(weighted_inner(u, v, weight) - ref))
    return math.log2(errs[0] / errs[1])


def _euler_observed_order() -> float:
    """Self-convergence of the closed-loop Euler stepper on a smooth run."""

    def run(dt):
        cfg = ClosedLoopConfig(
            dt=dt, duration=5.0, v0=-55.0, horizon=0.2, i_ext=None
        )
        return simulate_closed_loop(
            ExactChannel(HhPotassium(), v0=-55.0),
            ExactChannel(HhSodium(), v0=-55.0),
            cfg,
        )

    ref = run(0.000625)
    errs = []
    for dt in (0.02, 0.01):
        v = run(dt)
        stride = int(round(0.02 / dt))
        ref_stride = int(round(0.02 / 0.000625))
        coarse = v.values[::stride]
        fine = ref.values[::ref_stride]
        errs.append(float(np.sqrt(np.mean((coarse - fine) ** 2))))
    return math.log2(errs[0] / errs[1])


def test_criterion_09_numerics():
    started = time.perf_counter()
    rk4 = _rk4_observed_order()
    quad = _quadrature_observed_order()
    euler = _euler_observed_order()
    _verdict(9, rk4 >= 3.5 and quad >= 1.9 and euler >= 0.9,
             f"observed orders: RK4 {rk4:.2f} ≥ 3.5; "
             f"quadrature {quad:.2f} ≥ 1.9; closed-loop Euler {euler:.2f} ≥ 0.9")
    _budget(9, started, 60.0)
