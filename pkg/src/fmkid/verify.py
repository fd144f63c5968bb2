"""Self-contained invariant suites, runnable from the CLI.

Each suite is a list of named checks; running a suite executes every
check and reports one line per check. A check returns normally on
success and raises AssertionError (with a diagnostic) on violation.
All randomness is internally seeded, so the suites are deterministic.
"""

from __future__ import annotations

import numpy as np

from .kernels import (
    BilinearKernel,
    ConductanceLpvKernel,
    LpvKernel,
    RbfKernel,
    TwoScaleConductanceLpvKernel,
    WindowSet,
    eval_kernel,
    gram,
    kernel_matrix,
    lipschitz_defect,
)
from .plants import (
    HhCircuit,
    HhPotassium,
    HhSodium,
    LtiExample,
    V_REST,
    alpha_m,
    alpha_n,
    gate_steady_state,
    resting_state,
    simulate_plant,
)
from .regression import Dataset, fit, load_model, save_model, small_gain_check
from .signals import ExpWeight, PastWindow, TimeGrid, Trajectory, weight_energy
from .simulate import detect_spikes

__all__ = ["SUITES", "run_suite", "run_suites"]

_GRID = TimeGrid(dt=0.02, n=101)

_SPECS = {
    "bilinear": BilinearKernel(weight=ExpWeight(4.0)),
    "rbf": RbfKernel(weight=ExpWeight(4.0), sigma=1.5),
    "lpv": LpvKernel(weight=ExpWeight(4.0), sigma=1.5),
    "conductance-lpv": ConductanceLpvKernel(weight=ExpWeight(4.0), sigma=1.5),
    "two-scale-conductance-lpv": TwoScaleConductanceLpvKernel(
        weight=ExpWeight(4.0), sigma=1.5, weight2=ExpWeight(0.5), sigma2=2.5
    ),
}


def _random_windows(rng, count, scale=1.0):
    return [
        PastWindow(grid=_GRID, samples=scale * rng.standard_normal(_GRID.n))
        for _ in range(count)
    ]


# ---------------------------------------------------------------------------
# kernel suite

def _check_gram_symmetry():
    rng = np.random.default_rng(11)
    windows = _random_windows(rng, 40)
    for name, spec in _SPECS.items():
        g = gram(spec, windows)
        assert np.array_equal(g, g.T), f"{name}: Gram not bit-symmetric"


def _check_gram_psd():
    rng = np.random.default_rng(12)
    windows = _random_windows(rng, 40)
    for name, spec in _SPECS.items():
        g = gram(spec, windows)
        min_eig = float(np.linalg.eigvalsh(g).min())
        floor = -1e-8 * float(np.trace(g))
        assert min_eig >= floor, (
            f"{name}: min eigenvalue {min_eig:.3e} below {floor:.3e}"
        )


def _check_rbf_defect():
    rng = np.random.default_rng(13)
    spec = _SPECS["rbf"]
    bound = 1.0 / spec.sigma**2 + 1e-9
    for _ in range(200):
        u, v = _random_windows(rng, 2)
        d = lipschitz_defect(spec, u, v, spec.weight)
        assert d <= bound, f"rbf defect {d:.6g} exceeds {bound:.6g}"


def _check_rbf_unit_diagonal():
    rng = np.random.default_rng(14)
    for u in _random_windows(rng, 10, scale=3.0):
        val = eval_kernel(_SPECS["rbf"], u, u)
        assert val == 1.0, f"rbf k(u,u) = {val!r}, expected exactly 1.0"


def _check_batch_matches_scalar():
    rng = np.random.default_rng(15)
    windows = _random_windows(rng, 12)
    ws = WindowSet.from_windows(windows)
    for name, spec in _SPECS.items():
        batch = kernel_matrix(spec, ws, ws)
        for i in (0, 5, 11):
            for j in (0, 7):
                ref = eval_kernel(spec, windows[i], windows[j])
                err = abs(batch[i, j] - ref)
                tol = 1e-10 * max(1.0, abs(ref))
                assert err <= tol, (
                    f"{name}: batch[{i},{j}] differs from scalar by {err:.3e}"
                )


_KERNEL_CHECKS = [
    ("gram-bit-symmetry", _check_gram_symmetry),
    ("gram-positive-semidefinite", _check_gram_psd),
    ("rbf-lipschitz-defect-bound", _check_rbf_defect),
    ("rbf-unit-diagonal", _check_rbf_unit_diagonal),
    ("batch-matches-scalar-eval", _check_batch_matches_scalar),
]


# ---------------------------------------------------------------------------
# regression suite

def _random_dataset(rng, n, spec_scale=1.0):
    windows = _random_windows(rng, n, scale=spec_scale)
    targets = rng.standard_normal(n)
    return Dataset(windows=windows, targets=targets)


def _check_normal_equations():
    rng = np.random.default_rng(21)
    for trial in range(5):
        data = _random_dataset(rng, 40)
        gamma = 10.0 ** rng.uniform(-6, -1)
        model = fit(data, _SPECS["rbf"], gamma)
        k = kernel_matrix(_SPECS["rbf"], model.windows, model.windows)
        resid = k @ model.alpha + gamma * model.alpha - data.targets
        bound = 1e-8 * float(np.abs(data.targets).max())
        worst = float(np.abs(resid).max())
        assert worst <= bound, f"trial {trial}: residual {worst:.3e} > {bound:.3e}"


def _check_training_prediction_identity():
    rng = np.random.default_rng(22)
    data = _random_dataset(rng, 30)
    gamma = 1e-3
    model = fit(data, _SPECS["bilinear"], gamma)
    scale = float(np.abs(data.targets).max())
    for i in range(0, 30, 7):
        pred = model.predict(model.windows.window(i))
        expect = data.targets[i] - gamma * model.alpha[i]
        assert abs(pred - expect) <= 1e-8 * scale, (
            f"prediction {pred!r} != y - gamma*alpha = {expect!r} at row {i}"
        )


def _check_weight_energy_closed_form():
    val = weight_energy(ExpWeight(4.0))
    assert val == 0.5, f"weight_energy(lambda=4, T=inf) = {val!r}, expected 0.5"
    finite = weight_energy(ExpWeight(1.0), horizon=5.0)
    ref = np.sqrt((1.0 - np.exp(-5.0)) / 1.0)
    assert abs(finite - ref) <= 1e-15, f"finite-horizon energy {finite!r} != {ref!r}"


def _check_small_gain_boundary():
    rng = np.random.default_rng(23)
    data = _random_dataset(rng, 20)
    model = fit(data, _SPECS["bilinear"], 1e-4)
    out = small_gain_check(model)
    beta, c = out["beta"], out["c"]
    assert out["certified"] == (beta**2 < 1.0 / c**2), (
        f"certificate inconsistent: beta={beta!r}, c={c!r}, "
        f"certified={out['certified']!r}"
    )


def _check_model_roundtrip(tmp_base="/tmp/fmkid-verify-model.json"):
    rng = np.random.default_rng(24)
    data = _random_dataset(rng, 15)
    model = fit(data, _SPECS["lpv"], 1e-3)
    save_model(tmp_base, model)
    back = load_model(tmp_base)
    assert np.array_equal(back.alpha, model.alpha), "alpha changed in round trip"
    assert back.spec == model.spec, "kernel spec changed in round trip"
    assert back.gamma == model.gamma, "gamma changed in round trip"


_REGRESSION_CHECKS = [
    ("normal-equations-residual", _check_normal_equations),
    ("training-prediction-identity", _check_training_prediction_identity),
    ("weight-energy-closed-form", _check_weight_energy_closed_form),
    ("small-gain-certificate-consistency", _check_small_gain_boundary),
    ("model-save-load-roundtrip", _check_model_roundtrip),
]


# ---------------------------------------------------------------------------
# plants suite

def _check_rate_singularities():
    # alpha_n has a removable singularity where 1 - 0.1(u - V_r) = 0,
    # i.e. u = V_r + 10; alpha_m where 2.5 - 0.1 v = 0, i.e. u = V_r + 25.
    u_n = V_REST + 10.0
    assert np.isfinite(alpha_n(u_n)), "alpha_n not finite at its singular point"
    assert abs(alpha_n(u_n) - 0.1) <= 1e-12, f"alpha_n limit {alpha_n(u_n)!r} != 0.1"
    u_m = V_REST + 25.0
    assert abs(alpha_m(u_m) - 1.0) <= 1e-12, f"alpha_m limit {alpha_m(u_m)!r} != 1.0"
    for du in (-1e-6, 1e-6):
        assert abs(alpha_n(u_n + du) - 0.1) <= 1e-5, "alpha_n not continuous"
        assert abs(alpha_m(u_m + du) - 1.0) <= 1e-5, "alpha_m not continuous"


def _check_gate_ranges():
    for spec in (HhPotassium(), HhSodium()):
        for v in np.linspace(-100.0, 60.0, 33):
            gates = gate_steady_state(spec, v)
            assert np.all(gates >= 0.0) and np.all(gates <= 1.0), (
                f"steady-state gates {gates} out of [0,1] at V={v}"
            )


def _check_rk4_order():
    # Constant input, so the piecewise-linear stage interpolation is
    # exact and the integrator's own order shows; the reference is the
    # closed-form step response x(t) = A^-1 (e^{At} - I) B.
    from scipy.linalg import expm

    from .plants import _LTI_A, _LTI_B, _LTI_C

    spec = LtiExample()
    horizon = 1.0
    exact = float(
        _LTI_C @ np.linalg.solve(_LTI_A, (expm(_LTI_A * horizon) - np.eye(2)) @ _LTI_B)
    )

    def run(dt):
        n = int(round(horizon / dt)) + 1
        tr = Trajectory(t0=0.0, dt=dt, values=np.ones(n))
        return simulate_plant(spec, tr).values[-1]

    e1 = abs(run(0.02) - exact)
    e2 = abs(run(0.01) - exact)
    order = np.log2(e1 / e2)
    assert order >= 3.5, f"RK4 observed order {order:.2f} < 3.5"


def _check_rest_is_equilibrium():
    tr = Trajectory(t0=0.0, dt=0.05, values=np.zeros(1001))
    v = simulate_plant(HhCircuit(), tr)
    drift = float(np.abs(v.values - v.values[0]).max())
    assert drift <= 1.0, f"resting circuit drifts {drift:.3g} mV with zero input"
    assert detect_spikes(v, 0.0, 2.0).size == 0, "resting circuit spiked"


def _check_circuit_spikes_when_driven():
    tr = Trajectory(t0=0.0, dt=0.05, values=np.full(1001, 10.0))
    v = simulate_plant(HhCircuit(), tr)
    count = detect_spikes(v, 0.0, 2.0).size
    assert count >= 3, f"driven circuit produced only {count} spikes"


def _check_resting_state_values():
    x = resting_state(HhPotassium())
    ref = 0.1 / (0.1 + 0.125 * (np.e - 1.0))  # n_inf at V_r via alpha/(alpha+beta)
    assert abs(x[0] - ref) <= 1e-12, f"n_rest {x[0]!r} != {ref!r}"


_PLANT_CHECKS = [
    ("hh-rate-singularities", _check_rate_singularities),
    ("hh-gate-steady-state-ranges", _check_gate_ranges),
    ("rk4-observed-order", _check_rk4_order),
    ("hh-circuit-rest-equilibrium", _check_rest_is_equilibrium),
    ("hh-circuit-spikes-when-driven", _check_circuit_spikes_when_driven),
    ("hh-resting-gate-closed-form", _check_resting_state_values),
]


SUITES = {
    "kernels": _KERNEL_CHECKS,
    "regression": _REGRESSION_CHECKS,
    "plants": _PLANT_CHECKS,
}


def run_suite(name: str, out=print) -> bool:
    """Run one suite; prints one line per check; returns overall success."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    ok = True
    for check_name, check in SUITES[name]:
        try:
            check()
        except AssertionError as exc:
            ok = False
            out(f"FAIL {name}/{check_name}: {exc}")
        else:
            out(f"PASS {name}/{check_name}")
    return ok


def run_suites(names, out=print) -> bool:
    ok = True
    for name in names:
        ok = run_suite(name, out=out) and ok
    return ok
