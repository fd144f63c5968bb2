"""Forward simulation of identified models, open loop and closed loop.

Open loop slides the trained memory functional along an input trajectory.
Closed loop rebuilds the membrane circuit with the identified channel
models in place of the physical ones: an explicit Euler voltage update
where each channel reads the rolling voltage history window.  Channels
are pluggable so the exact state-space channels can stand in for the
kernel models (oracle mode) when validating the loop itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plants import (
    HhPotassium,
    HhSodium,
    IntegrationError,
    V_REST,
    alpha_h,
    alpha_m,
    alpha_n,
    beta_h,
    beta_m,
    beta_n,
    gate_steady_state,
    plant_output,
)
from .regression import TrainedModel
from .signals import (
    GridMismatchError,
    PastWindow,
    TimeGrid,
    Trajectory,
    window_from_trajectory,
)

__all__ = [
    "ClosedLoopConfig",
    "KernelChannel",
    "ExactChannel",
    "simulate_open_loop",
    "simulate_closed_loop",
    "detect_spikes",
    "match_spike_times",
]

_VOLTAGE_LIMIT = 500.0


def _gate_rhs(spec, x: np.ndarray, v: float) -> np.ndarray:
    """Gate kinetics of one HH channel driven by held voltage v."""
    if isinstance(spec, HhPotassium):
        n = x[0]
        return np.array([alpha_n(v) * (1.0 - n) - beta_n(v) * n])
    m, h = x
    return np.array(
        [
            alpha_m(v) * (1.0 - m) - beta_m(v) * m,
            alpha_h(v) * (1.0 - h) - beta_h(v) * h,
        ]
    )


def simulate_open_loop(model: TrainedModel, input_traj: Trajectory) -> Trajectory:
    """Slide the fitted functional along the input: y(t) = F(window at t).

    Times before the trajectory start are filled by constant extrapolation
    of the first sample, so the output is defined from the first sample on.
    Each output value equals ``model.predict`` on the same window exactly.
    """
    grid = model.grid
    if not np.isclose(input_traj.dt, grid.dt, rtol=1e-9, atol=0.0):
        raise GridMismatchError(
            f"input step {input_traj.dt} does not match model grid step {grid.dt}"
        )
    times = input_traj.times()
    y = np.empty(times.shape[0])
    for k, t in enumerate(times):
        y[k] = model.predict(window_from_trajectory(input_traj, float(t), grid))
    return Trajectory(t0=input_traj.t0, dt=input_traj.dt, values=y)


@dataclass(frozen=True)
class ClosedLoopConfig:
    """Circuit parameters and run length for the surrogate membrane loop."""

    dt: float
    duration: float
    v0: float = V_REST
    capacitance: float = 1.0
    g_leak: float = 0.3
    e_leak: float = -54.4
    horizon: float | None = None
    i_ext: Trajectory | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.capacitance > 0:
            raise ValueError("capacitance must be positive")


class KernelChannel:
    """A trained kernel model acting as an ionic-current element.

    ``input_offset`` is subtracted from the voltage history before
    prediction; channel models trained on the driving potential set it
    to their reversal potential.
    """

    def __init__(self, model: TrainedModel, input_offset: float = 0.0):
        self.model = model
        self.grid = model.grid
        self.input_offset = float(input_offset)

    def current(self, window: PastWindow) -> float:
        if self.input_offset != 0.0:
            window = PastWindow(
                grid=window.grid, samples=window.samples - self.input_offset
            )
        return self.model.predict(window)

    def advance(self, v_from: float, v_to: float, dt: float) -> None:
        pass


class ExactChannel:
    """The true state-space channel, for validating the loop integrator.

    Gate state is advanced one RK4 step per loop step with the membrane
    voltage interpolated linearly from v_from to v_to.
    """

    def __init__(self, spec, v0: float = V_REST):
        if not isinstance(spec, (HhPotassium, HhSodium)):
            raise TypeError("ExactChannel wraps an HH channel plant")
        self.spec = spec
        self.gates = gate_steady_state(spec, v0)
        self.grid = None

    def current(self, window: PastWindow) -> float:
        return plant_output(self.spec, self.gates, window.now())

    def advance(self, v_from: float, v_to: float, dt: float) -> None:
        x = self.gates
        vm = 0.5 * (v_from + v_to)
        k1 = _gate_rhs(self.spec, x, v_from)
        k2 = _gate_rhs(self.spec, x + 0.5 * dt * k1, vm)
        k3 = _gate_rhs(self.spec, x + 0.5 * dt * k2, vm)
        k4 = _gate_rhs(self.spec, x + dt * k3, v_to)
        self.gates = np.clip(
            x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0, 1.0
        )


def _as_channel(obj):
    return KernelChannel(obj) if isinstance(obj, TrainedModel) else obj


def _resolve_grid(channels, cfg: ClosedLoopConfig) -> TimeGrid:
    grids = [ch.grid for ch in channels if ch.grid is not None]
    for a in grids:
        for b in grids:
            if not a.compatible(b):
                raise GridMismatchError("channel models use different grids")
    if grids:
        grid = grids[0]
    else:
        if cfg.horizon is None:
            raise ValueError("horizon required when no channel supplies a grid")
        n = int(round(cfg.horizon / cfg.dt)) + 1
        grid = TimeGrid(dt=cfg.dt, n=n)
    if not np.isclose(cfg.dt, grid.dt, rtol=1e-9, atol=0.0):
        raise GridMismatchError(
            f"config dt {cfg.dt} does not match the model grid dt {grid.dt}"
        )
    if cfg.horizon is not None and not np.isclose(
        cfg.horizon, grid.horizon, rtol=1e-9, atol=0.0
    ):
        raise GridMismatchError(
            f"config horizon {cfg.horizon} does not match grid horizon {grid.horizon}"
        )
    return grid


def simulate_closed_loop(k_model, na_model, cfg: ClosedLoopConfig) -> Trajectory:
    """Run the membrane loop with the two channel surrogates.

    Per step: both channel currents are evaluated on the voltage history
    window ending at the current time, the voltage advances one explicit
    Euler step, and the channels advance their internal state (a no-op
    for kernel channels).  Aborts if |V| exceeds 500.
    """
    k_ch = _as_channel(k_model)
    na_ch = _as_channel(na_model)
    grid = _resolve_grid((k_ch, na_ch), cfg)
    n_steps = int(round(cfg.duration / cfg.dt)) + 1
    if cfg.i_ext is None:
        i_ext = np.zeros(n_steps)
    else:
        if not np.isclose(cfg.i_ext.dt, cfg.dt, rtol=1e-9, atol=0.0):
            raise GridMismatchError("external current step does not match config dt")
        if cfg.i_ext.values.shape[0] < n_steps:
            raise ValueError("external current trajectory shorter than the run")
        i_ext = cfg.i_ext.values[:n_steps]

    n_hist = grid.n
    # Rolling history buffer: pre-history is the constant v0.
    buf = np.full(n_hist - 1 + n_steps, cfg.v0)
    for k in range(n_steps - 1):
        window = PastWindow(grid=grid, samples=buf[k : k + n_hist])
        v = buf[k + n_hist - 1]
        i_k = k_ch.current(window)
        i_na = na_ch.current(window)
        dv = (
            i_ext[k] - i_k - i_na - cfg.g_leak * (v - cfg.e_leak)
        ) / cfg.capacitance
        v_next = v + cfg.dt * dv
        t_next = (k + 1) * cfg.dt
        if not np.isfinite(v_next) or abs(v_next) > _VOLTAGE_LIMIT:
            raise IntegrationError("membrane voltage diverged", t_next)
        k_ch.advance(v, v_next, cfg.dt)
        na_ch.advance(v, v_next, cfg.dt)
        buf[k + n_hist] = v_next
    return Trajectory(t0=0.0, dt=cfg.dt, values=buf[n_hist - 1 :].copy())


def detect_spikes(
    v: Trajectory, threshold: float = 0.0, refractory: float = 2.0
) -> np.ndarray:
    """Spike times: upward threshold crossings, linearly interpolated.

    Crossings closer than ``refractory`` to the previous accepted spike
    are suppressed.
    """
    if refractory < 0:
        raise ValueError("refractory must be nonnegative")
    values = v.values
    below = values[:-1] < threshold
    above = values[1:] >= threshold
    idx = np.nonzero(below & above)[0]
    spikes = []
    last = -np.inf
    for k in idx:
        frac = (threshold - values[k]) / (values[k + 1] - values[k])
        t = v.t0 + (k + frac) * v.dt
        if t - last >= refractory:
            spikes.append(t)
            last = t
    return np.array(spikes)


def match_spike_times(reference, candidate, tol: float) -> dict:
    """Greedy in-order pairing of two spike trains within a time tolerance.

    Returns matched pairs plus the unmatched leftovers of each train.
    """
    ref = list(np.asarray(reference, dtype=float))
    got = list(np.asarray(candidate, dtype=float))
    matched = []
    miss_ref = []
    i = j = 0
    while i < len(ref) and j < len(got):
        d = got[j] - ref[i]
        if abs(d) <= tol:
            matched.append((ref[i], got[j]))
            i += 1
            j += 1
        elif d < 0:
            j += 1
        else:
            miss_ref.append(ref[i])
            i += 1
    miss_ref.extend(ref[i:])
    extra = [t for t in got if not any(t == m[1] for m in matched)]
    return {"matched": matched, "unmatched_reference": miss_ref, "unmatched_candidate": extra}
