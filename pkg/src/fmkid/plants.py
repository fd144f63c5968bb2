"""Reference continuous-time plants integrated by fixed-step RK4.

The plants serve as data-generating oracles and as ground truth for the
identified kernel models:

* ``LtiExample``    -- H(s) = (s+1)/((s+3)(s+10)) in controllable canonical form.
* ``SatLag``        -- first-order lag dx/dt = -5x + u with saturated output.
* ``HhPotassium``   -- Hodgkin-Huxley potassium channel, y = 36 n^4 (u - V_K).
* ``HhSodium``      -- Hodgkin-Huxley sodium channel, y = 120 m^3 h (u - V_Na).
* ``HhCircuit``     -- leaky capacitor in parallel with both channels,
  C dV/dt = I_ext - I_K - I_Na - g_L (V - E_L).

Integration is classic RK4 with the step equal to the input sample step;
the input is interpolated piecewise-linearly for the half-step stages.
Gate variables are clamped to [0, 1] after every step and clamp events
are counted into the output trajectory's metadata.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .signals import Trajectory

__all__ = [
    "V_REST",
    "V_K",
    "V_NA",
    "LtiExample",
    "SatLag",
    "HhPotassium",
    "HhSodium",
    "HhCircuit",
    "PlantSpec",
    "IntegrationError",
    "alpha_n",
    "beta_n",
    "alpha_m",
    "beta_m",
    "alpha_h",
    "beta_h",
    "gate_steady_state",
    "resting_state",
    "state_dim",
    "plant_output",
    "simulate_plant",
    "plant_to_dict",
    "plant_from_dict",
]

V_REST = -65.1
V_K = -77.0
V_NA = 50.0

_STATE_LIMIT = 1e8


class IntegrationError(RuntimeError):
    """Integration blew up; ``time`` is where the state first went bad."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t = {time:g}")
        self.time = time


@dataclass(frozen=True)
class LtiExample:
    """H(s) = (s+1)/((s+3)(s+10)); states in controllable canonical form."""


@dataclass(frozen=True)
class SatLag:
    threshold: float = 5.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class HhPotassium:
    """Single-gate potassium channel; state is the activation gate n."""


@dataclass(frozen=True)
class HhSodium:
    """Sodium channel; states are activation m and inactivation h."""


@dataclass(frozen=True)
class HhCircuit:
    """Membrane circuit; state is (V, n, m, h), input is external current."""

    capacitance: float = 1.0
    g_leak: float = 0.3
    e_leak: float = -54.4

    def __post_init__(self):
        if not self.capacitance > 0:
            raise ValueError("capacitance must be positive")
        if self.g_leak < 0:
            raise ValueError("leak conductance must be nonnegative")


PlantSpec = Union[LtiExample, SatLag, HhPotassium, HhSodium, HhCircuit]

# Controllable canonical realization of (s+1)/(s^2 + 13 s + 30).
_LTI_A = np.array([[0.0, 1.0], [-30.0, -13.0]])
_LTI_B = np.array([0.0, 1.0])
_LTI_C = np.array([1.0, 1.0])


# ---------------------------------------------------------------------------
# Hodgkin-Huxley rate functions

def _x_over_expm1(x):
    """``x / (e^x - 1)`` with the removable singularity at x = 0.

    Near the singularity the denominator underflows to noise, so values
    with |e^x - 1| < 1e-7 switch to the series 1 - x/2 + O(x^2).
    """
    x = np.asarray(x, dtype=float)
    den = np.expm1(x)
    small = np.abs(den) < 1e-7
    safe = np.where(small, 1.0, den)
    return np.where(small, 1.0 - 0.5 * x, x / safe)


def alpha_n(u):
    return 0.1 * _x_over_expm1(1.0 - 0.1 * (u - V_REST))


def beta_n(u):
    return 0.125 * np.exp(-0.0125 * (u - V_REST))


def alpha_m(u):
    return _x_over_expm1(2.5 - 0.1 * (u - V_REST))


def beta_m(u):
    return 4.0 * np.exp(-(u - V_REST) / 18.0)


def alpha_h(u):
    return 0.07 * np.exp(-0.05 * (u - V_REST))


def beta_h(u):
    return 1.0 / (np.exp(3.0 - 0.1 * (u - V_REST)) + 1.0)


def _n_inf(u):
    a, b = alpha_n(u), beta_n(u)
    return a / (a + b)


def _m_inf(u):
    a, b = alpha_m(u), beta_m(u)
    return a / (a + b)


def _h_inf(u):
    a, b = alpha_h(u), beta_h(u)
    return a / (a + b)


def gate_steady_state(spec: PlantSpec, v: float) -> np.ndarray:
    """Gate fixed points ``alpha/(alpha+beta)`` at a held voltage."""
    if isinstance(spec, HhPotassium):
        return np.array([_n_inf(v)])
    if isinstance(spec, HhSodium):
        return np.array([_m_inf(v), _h_inf(v)])
    if isinstance(spec, HhCircuit):
        return np.array([_n_inf(v), _m_inf(v), _h_inf(v)])
    raise TypeError(f"{type(spec).__name__} has no gates")


def state_dim(spec: PlantSpec) -> int:
    if isinstance(spec, LtiExample):
        return 2
    if isinstance(spec, SatLag):
        return 1
    if isinstance(spec, HhPotassium):
        return 1
    if isinstance(spec, HhSodium):
        return 2
    if isinstance(spec, HhCircuit):
        return 4
    raise TypeError(f"unknown plant {type(spec).__name__}")


def resting_state(spec: PlantSpec) -> np.ndarray:
    """Equilibrium initial condition: zero states, or gates at rest at V_r."""
    if isinstance(spec, (LtiExample, SatLag)):
        return np.zeros(state_dim(spec))
    if isinstance(spec, (HhPotassium, HhSodium)):
        return gate_steady_state(spec, V_REST)
    if isinstance(spec, HhCircuit):
        return np.concatenate([[V_REST], gate_steady_state(spec, V_REST)])
    raise TypeError(f"unknown plant {type(spec).__name__}")


def _gate_slice(spec: PlantSpec) -> slice | None:
    if isinstance(spec, (HhPotassium, HhSodium)):
        return slice(0, state_dim(spec))
    if isinstance(spec, HhCircuit):
        return slice(1, 4)
    return None


def _derivative(spec: PlantSpec, x: np.ndarray, u: float) -> np.ndarray:
    if isinstance(spec, LtiExample):
        return _LTI_A @ x + _LTI_B * u
    if isinstance(spec, SatLag):
        return np.array([-5.0 * x[0] + u])
    if isinstance(spec, HhPotassium):
        n = x[0]
        return np.array([alpha_n(u) * (1.0 - n) - beta_n(u) * n])
    if isinstance(spec, HhSodium):
        m, h = x
        return np.array(
            [
                alpha_m(u) * (1.0 - m) - beta_m(u) * m,
                alpha_h(u) * (1.0 - h) - beta_h(u) * h,
            ]
        )
    if isinstance(spec, HhCircuit):
        v, n, m, h = x
        i_k = 36.0 * n**4 * (v - V_K)
        i_na = 120.0 * m**3 * h * (v - V_NA)
        dv = (u - i_k - i_na - spec.g_leak * (v - spec.e_leak)) / spec.capacitance
        return np.array(
            [
                dv,
                alpha_n(v) * (1.0 - n) - beta_n(v) * n,
                alpha_m(v) * (1.0 - m) - beta_m(v) * m,
                alpha_h(v) * (1.0 - h) - beta_h(v) * h,
            ]
        )
    raise TypeError(f"unknown plant {type(spec).__name__}")


def plant_output(spec: PlantSpec, x: np.ndarray, u: float) -> float:
    if isinstance(spec, LtiExample):
        return float(_LTI_C @ x)
    if isinstance(spec, SatLag):
        return float(np.clip(x[0], -spec.threshold, spec.threshold))
    if isinstance(spec, HhPotassium):
        return float(36.0 * x[0] ** 4 * (u - V_K))
    if isinstance(spec, HhSodium):
        return float(120.0 * x[0] ** 3 * x[1] * (u - V_NA))
    if isinstance(spec, HhCircuit):
        return float(x[0])
    raise TypeError(f"unknown plant {type(spec).__name__}")


def simulate_plant(
    spec: PlantSpec, input_traj: Trajectory, x0: np.ndarray | None = None
) -> Trajectory:
    """Integrate the plant along an input trajectory; RK4, step = input.dt.

    Returns the output sampled at the input times.  The metadata carries
    the plant parameters and the count of steps where a gate had to be
    clamped back into [0, 1].
    """
    if x0 is None:
        x = resting_state(spec)
    else:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (state_dim(spec),):
            raise ValueError(
                f"x0 must have shape ({state_dim(spec)},), got {x.shape}"
            )
    gates = _gate_slice(spec)
    if gates is not None and (np.any(x[gates] < 0) or np.any(x[gates] > 1)):
        raise ValueError("initial gate values must lie in [0, 1]")
    u = input_traj.values
    dt = input_traj.dt
    n_steps = u.shape[0]
    y = np.empty(n_steps)
    clamp_events = 0
    y[0] = plant_output(spec, x, u[0])
    for k in range(n_steps - 1):
        u0, u1 = u[k], u[k + 1]
        um = 0.5 * (u0 + u1)
        k1 = _derivative(spec, x, u0)
        k2 = _derivative(spec, x + 0.5 * dt * k1, um)
        k3 = _derivative(spec, x + 0.5 * dt * k2, um)
        k4 = _derivative(spec, x + dt * k3, u1)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t_now = input_traj.t0 + (k + 1) * dt
        if not np.all(np.isfinite(x)):
            raise IntegrationError("state became non-finite", t_now)
        if np.max(np.abs(x)) > _STATE_LIMIT:
            raise IntegrationError("state magnitude exceeded 1e8", t_now)
        if gates is not None:
            g = x[gates]
            clipped = np.clip(g, 0.0, 1.0)
            if np.any(clipped != g):
                clamp_events += 1
                x[gates] = clipped
        y[k + 1] = plant_output(spec, x, u[k + 1])
    meta = {"plant": plant_to_dict(spec), "gate_clamp_events": clamp_events}
    return Trajectory(t0=input_traj.t0, dt=dt, values=y, meta=meta)


# ---------------------------------------------------------------------------
# parameter echo for config/metadata files

def plant_to_dict(spec: PlantSpec) -> dict:
    if isinstance(spec, LtiExample):
        return {"type": "lti-example"}
    if isinstance(spec, SatLag):
        return {"type": "sat-lag", "threshold": spec.threshold}
    if isinstance(spec, HhPotassium):
        return {"type": "hh-potassium"}
    if isinstance(spec, HhSodium):
        return {"type": "hh-sodium"}
    if isinstance(spec, HhCircuit):
        return {
            "type": "hh-circuit",
            "C": spec.capacitance,
            "g_L": spec.g_leak,
            "E_L": spec.e_leak,
        }
    raise TypeError(f"unknown plant {type(spec).__name__}")


def plant_from_dict(d: dict) -> PlantSpec:
    kind = d.get("type")
    if kind == "lti-example":
        return LtiExample()
    if kind == "sat-lag":
        return SatLag(threshold=float(d["threshold"]))
    if kind == "hh-potassium":
        return HhPotassium()
    if kind == "hh-sodium":
        return HhSodium()
    if kind == "hh-circuit":
        return HhCircuit(
            capacitance=float(d.get("C", 1.0)),
            g_leak=float(d.get("g_L", 0.3)),
            e_leak=float(d.get("E_L", -54.4)),
        )
    raise ValueError(f"unknown plant type {kind!r}")
