"""Tests for the reference plants and the RK4 integrator."""

import numpy as np
import pytest
from scipy.signal import cont2discrete

from fmkid.plants import (
    V_K,
    V_NA,
    V_REST,
    HhCircuit,
    HhPotassium,
    HhSodium,
    IntegrationError,
    LtiExample,
    SatLag,
    alpha_h,
    alpha_m,
    alpha_n,
    beta_h,
    beta_m,
    beta_n,
    gate_steady_state,
    plant_from_dict,
    plant_output,
    plant_to_dict,
    resting_state,
    simulate_plant,
    state_dim,
)
from fmkid.signals import Trajectory

# Same transfer function as the plant, kept separate as the test oracle.
A_ORACLE = np.array([[0.0, 1.0], [-30.0, -13.0]])
B_ORACLE = np.array([[0.0], [1.0]])
C_ORACLE = np.array([[1.0, 1.0]])


def foh_reference(u, dt):
    """Exact sampled LTI response for piecewise-linear input (test oracle)."""
    ad, bd, cd, dd, _ = cont2discrete(
        (A_ORACLE, B_ORACLE, C_ORACLE, [[0.0]]), dt, method="foh"
    )
    x = np.zeros(2)
    y = np.empty(len(u))
    for k, uk in enumerate(u):
        y[k] = (cd @ x)[0] + dd[0, 0] * uk
        x = ad @ x + bd[:, 0] * uk
    return y


class TestRateFunctions:
    def test_alpha_n_removable_singularity(self):
        u_sing = V_REST + 10.0
        assert alpha_n(u_sing) == 0.1
        assert alpha_n(u_sing - 1e-6) == pytest.approx(0.1, abs=1e-7)
        assert alpha_n(u_sing + 1e-6) == pytest.approx(0.1, abs=1e-7)

    def test_alpha_m_removable_singularity(self):
        u_sing = V_REST + 25.0
        assert alpha_m(u_sing) == 1.0
        assert alpha_m(u_sing - 1e-6) == pytest.approx(1.0, abs=1e-6)
        assert alpha_m(u_sing + 1e-6) == pytest.approx(1.0, abs=1e-6)

    def test_rates_positive_on_physiological_range(self):
        v = np.arange(-100.0, 60.0 + 0.5, 1.0)
        for fn in (alpha_n, beta_n, alpha_m, beta_m, alpha_h, beta_h):
            assert np.all(fn(v) > 0)

    def test_resting_gate_values(self):
        # alpha_n(V_r) = 0.1/(e - 1), beta_n(V_r) = 0.125.
        a = 0.1 / (np.e - 1.0)
        assert alpha_n(V_REST) == pytest.approx(a, rel=1e-12)
        assert beta_n(V_REST) == 0.125
        n_inf = gate_steady_state(HhPotassium(), V_REST)[0]
        assert n_inf == pytest.approx(a / (a + 0.125), rel=1e-12)
        assert n_inf == pytest.approx(0.318, abs=1e-3)

    def test_steady_states_inside_unit_interval(self):
        for v in np.arange(-100.0, 60.0 + 0.5, 1.0):
            gates = gate_steady_state(HhCircuit(), float(v))
            assert np.all(gates >= 0.0) and np.all(gates <= 1.0)


class TestLtiExample:
    def test_step_settles_to_dc_gain(self):
        # H(0) = 1/30; slowest pole 3 means settled well before t = 5.
        tr = Trajectory(t0=0.0, dt=0.01, values=np.ones(801))
        out = simulate_plant(LtiExample(), tr)
        tail = out.values[out.index_of(5.0):]
        assert np.max(np.abs(tail - 1.0 / 30.0)) < 1e-3 * (1.0 / 30.0)

    def test_matches_exact_discretization(self):
        dt = 0.01
        t = np.arange(201) * dt
        u = np.sin(3.0 * t)
        got = simulate_plant(LtiExample(), Trajectory(t0=0.0, dt=dt, values=u)).values
        assert np.max(np.abs(got - foh_reference(u, dt))) < 1e-6

    def test_rk4_order_at_least_three_and_a_half(self):
        errs = []
        for dt in (0.02, 0.01):
            n = int(round(2.0 / dt)) + 1
            t = np.arange(n) * dt
            u = np.sin(3.0 * t)
            got = simulate_plant(
                LtiExample(), Trajectory(t0=0.0, dt=dt, values=u)
            ).values
            errs.append(np.max(np.abs(got - foh_reference(u, dt))))
        assert np.log2(errs[0] / errs[1]) >= 3.5

    def test_instability_detected_with_failure_time(self):
        tr = Trajectory(t0=0.0, dt=1.0, values=np.ones(30))
        with pytest.raises(IntegrationError) as err:
            simulate_plant(LtiExample(), tr)
        assert err.value.time > 0
        assert "t =" in str(err.value)


class TestSatLag:
    def test_fixed_point_below_threshold(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=10.0 * np.ones(501))
        out = simulate_plant(SatLag(threshold=5.0), tr)
        assert out.values[-1] == pytest.approx(2.0, abs=1e-6)

    def test_fixed_point_saturates(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=10.0 * np.ones(501))
        out = simulate_plant(SatLag(threshold=0.5), tr)
        assert out.values[-1] == 0.5

    def test_threshold_must_be_positive(self):
        with pytest.raises(ValueError):
            SatLag(threshold=0.0)


class TestPotassiumChannel:
    def test_held_at_rest_output_is_fixed_point_value(self):
        # n stays at its fixed point, so y = 36 n_inf^4 (V_r - V_K) throughout.
        tr = Trajectory(t0=0.0, dt=0.01, values=V_REST * np.ones(20001))
        out = simulate_plant(HhPotassium(), tr)
        n_inf = gate_steady_state(HhPotassium(), V_REST)[0]
        expected = 36.0 * n_inf**4 * (V_REST - V_K)
        assert np.max(np.abs(out.values - expected)) < 1e-9
        assert out.values[-1] == pytest.approx(4.3630690217, rel=1e-9)

    def test_step_converges_to_new_fixed_point(self):
        v_hi = -30.0
        tr = Trajectory(t0=0.0, dt=0.01, values=v_hi * np.ones(5001))
        out = simulate_plant(HhPotassium(), tr)
        n_inf = gate_steady_state(HhPotassium(), v_hi)[0]
        assert out.values[-1] == pytest.approx(
            36.0 * n_inf**4 * (v_hi - V_K), rel=1e-6
        )

    def test_gates_stay_in_unit_interval(self):
        rng = np.random.default_rng(0)
        v = V_REST + 80.0 * rng.standard_normal(2001).cumsum() * 0.05
        v = np.clip(v, -100.0, 60.0)
        tr = Trajectory(t0=0.0, dt=0.01, values=v)
        out = simulate_plant(HhPotassium(), tr)
        # Output sign equals sign of (u - V_K) since 36 n^4 >= 0.
        assert np.all(out.values * np.sign(v - V_K) >= 0)


class TestSodiumChannel:
    def test_resting_state_values(self):
        m_inf, h_inf = resting_state(HhSodium())
        assert m_inf == pytest.approx(0.0529, abs=1e-3)
        assert h_inf == pytest.approx(0.596, abs=1e-3)

    def test_clamping_counts_events_at_coarse_step(self):
        tr = Trajectory(t0=0.0, dt=3.0, values=np.array([30.0, -100.0] * 10))
        out = simulate_plant(HhSodium(), tr)
        assert out.meta["gate_clamp_events"] > 0

    def test_initial_gates_validated(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=V_REST * np.ones(10))
        with pytest.raises(ValueError):
            simulate_plant(HhSodium(), tr, x0=np.array([1.5, 0.5]))


class TestCircuit:
    def test_rest_is_quiet_for_100_units(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=np.zeros(10001))
        out = simulate_plant(HhCircuit(), tr)
        assert np.max(np.abs(out.values - V_REST)) < 1.0

    def test_sustained_current_spikes_repetitively(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=10.0 * np.ones(10001))
        out = simulate_plant(HhCircuit(), tr)
        ups = int(np.sum((out.values[:-1] < 0.0) & (out.values[1:] >= 0.0)))
        assert ups >= 3
        # Crossing count agrees with a tenfold-refined reference run.
        tr_fine = Trajectory(t0=0.0, dt=0.001, values=10.0 * np.ones(100001))
        fine = simulate_plant(HhCircuit(), tr_fine)
        ups_fine = int(np.sum((fine.values[:-1] < 0.0) & (fine.values[1:] >= 0.0)))
        assert ups == ups_fine

    def test_x0_dimension_checked(self):
        tr = Trajectory(t0=0.0, dt=0.01, values=np.zeros(10))
        with pytest.raises(ValueError):
            simulate_plant(HhCircuit(), tr, x0=np.zeros(3))


class TestStateHelpers:
    def test_dimensions(self):
        assert state_dim(LtiExample()) == 2
        assert state_dim(SatLag(1.0)) == 1
        assert state_dim(HhPotassium()) == 1
        assert state_dim(HhSodium()) == 2
        assert state_dim(HhCircuit()) == 4

    def test_resting_states(self):
        assert np.array_equal(resting_state(LtiExample()), np.zeros(2))
        circuit = resting_state(HhCircuit())
        assert circuit[0] == V_REST
        assert np.array_equal(
            circuit[1:],
            np.concatenate(
                [
                    gate_steady_state(HhPotassium(), V_REST),
                    gate_steady_state(HhSodium(), V_REST),
                ]
            ),
        )

    def test_output_forms(self):
        assert plant_output(LtiExample(), np.array([0.5, 0.25]), 0.0) == 0.75
        assert plant_output(SatLag(1.0), np.array([3.0]), 0.0) == 1.0
        assert plant_output(HhPotassium(), np.array([0.5]), -20.0) == pytest.approx(
            36.0 * 0.5**4 * (-20.0 - V_K)
        )
        assert plant_output(HhSodium(), np.array([0.2, 0.5]), 0.0) == pytest.approx(
            120.0 * 0.2**3 * 0.5 * (0.0 - V_NA)
        )

    def test_round_trip_dicts(self):
        for spec in (
            LtiExample(),
            SatLag(0.5),
            HhPotassium(),
            HhSodium(),
            HhCircuit(capacitance=2.0, g_leak=0.1, e_leak=-60.0),
        ):
            assert plant_from_dict(plant_to_dict(spec)) == spec
