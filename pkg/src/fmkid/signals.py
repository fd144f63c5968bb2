"""Past-input windows and exponentially weighted inner products.

A memory functional maps the recent past of a scalar input signal to the
present output value.  This module provides the discrete carrier of that
past: uniformly sampled windows on ``[-T, 0]`` (newest sample at ``t = 0``),
together with the exponentially weighted inner products, norms and
scheduling functionals that the kernel machinery is built on.

All quadrature is trapezoidal on the window grid.  Using one rule
everywhere keeps Gram matrices symmetric and positive semidefinite at the
discrete level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridMismatchError",
    "TimeGrid",
    "PastWindow",
    "ExpWeight",
    "Trajectory",
    "read_trajectory_csv",
    "write_trajectory_csv",
    "window_from_trajectory",
    "weighted_inner",
    "weighted_norm",
    "scheduling_value",
    "weight_energy",
    "check_bounded_rate_limited",
]

# Relative tolerance used whenever two time steps are compared.
_DT_RTOL = 1e-9


class GridMismatchError(ValueError):
    """Two windows (or a window and a trajectory) live on different grids."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sample grid on ``[-T, 0]`` with the newest point at zero.

    Parameters
    ----------
    dt : float
        Time step, > 0.
    n : int
        Number of samples, >= 2.  Grid points are ``t_k = -(n-1-k)*dt``
        for ``k = 0..n-1``, so the window horizon is ``T = (n-1)*dt``.
    """

    dt: float
    n: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"grid dt must be positive and finite, got {self.dt}")
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 samples, got n={self.n}")

    @property
    def horizon(self) -> float:
        """Window length ``T = (n-1)*dt``."""
        return (self.n - 1) * self.dt

    def times(self) -> np.ndarray:
        """Grid times ``[-T, ..., -dt, 0]``."""
        return -(self.n - 1 - np.arange(self.n)) * self.dt

    def trapezoid_weights(self) -> np.ndarray:
        """Quadrature weights ``[dt/2, dt, ..., dt, dt/2]``."""
        w = np.full(self.n, self.dt)
        w[0] = w[-1] = self.dt / 2.0
        return w

    def compatible(self, other: "TimeGrid") -> bool:
        return self.n == other.n and _steps_equal(self.dt, other.dt)


def _steps_equal(dt_a: float, dt_b: float) -> bool:
    return abs(dt_a - dt_b) <= _DT_RTOL * max(abs(dt_a), abs(dt_b))


@dataclass(frozen=True)
class PastWindow:
    """A sampled past-input segment: the argument of every memory functional.

    ``samples`` are ordered oldest to newest; ``samples[-1]`` is the value
    at ``t = 0`` (the present).  Windows are immutable after construction.
    """

    grid: TimeGrid
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1 or samples.shape[0] != self.grid.n:
            raise ValueError(
                f"window needs {self.grid.n} samples, got shape {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise ValueError("window samples must be finite")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def now(self) -> float:
        """The newest sample, i.e. the input value at ``t = 0``."""
        return float(self.samples[-1])


@dataclass(frozen=True)
class ExpWeight:
    """Exponential fading-memory weight ``w(t) = exp(rate/2 * t)``.

    ``rate`` must be positive so that ``w(0) = 1`` and ``w(t) -> 0`` as
    ``t -> -inf``.  Inner products weight the integrand by
    ``w(t)^2 = exp(rate * t)``.
    """

    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"weight rate must be positive, got {self.rate}")

    def squared_density(self, times: np.ndarray) -> np.ndarray:
        """``w(t)^2 = exp(rate * t)`` evaluated on ``times``."""
        return np.exp(self.rate * np.asarray(times, dtype=float))


@dataclass(frozen=True)
class Trajectory:
    """A uniformly sampled signal on ``[t0, t0 + (len-1)*dt]``."""

    t0: float
    dt: float
    values: np.ndarray
    meta: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.shape[0] < 1:
            raise ValueError("trajectory values must be a non-empty 1-d array")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"trajectory dt must be positive, got {self.dt}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def t_end(self) -> float:
        return self.t0 + (len(self.values) - 1) * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.values))

    def index_of(self, t: float) -> int:
        """Index of sample time ``t``; raises if ``t`` is off the lattice."""
        k = (t - self.t0) / self.dt
        k_round = round(k)
        if abs(k - k_round) > 1e-6 or not 0 <= k_round < len(self.values):
            raise ValueError(
                f"t={t} is not a sample time of the trajectory "
                f"(t0={self.t0}, dt={self.dt}, {len(self.values)} samples)"
            )
        return int(k_round)


def read_trajectory_csv(path) -> Trajectory:
    """Read a ``t,value`` CSV with a strictly uniform time step.

    The step is taken from the first two rows and every subsequent row must
    match it to a relative tolerance of 1e-9.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["t", "value"]:
            raise ValueError(f"{path}: expected header 't,value', got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least 2 samples, got {len(rows)}")
    t = np.array([r[0] for r in rows])
    values = np.array([r[1] for r in rows])
    dt = t[1] - t[0]
    if dt <= 0:
        raise ValueError(f"{path}: times must be strictly increasing")
    lattice = t[0] + dt * np.arange(len(t))
    if np.max(np.abs(t - lattice)) > 1e-9 * dt:
        worst = int(np.argmax(np.abs(t - lattice)))
        raise ValueError(
            f"{path}: non-uniform time step at row {worst + 2} "
            f"(t={t[worst]!r}, expected {lattice[worst]!r})"
        )
    return Trajectory(t0=float(t[0]), dt=float(dt), values=values)


def write_trajectory_csv(path, traj: Trajectory, value_name: str = "value") -> None:
    """Write a trajectory as ``t,value`` rows with 17 significant digits."""
    times = traj.times()
    with open(path, "w", newline="") as fh:
        fh.write(f"t,{value_name}\n")
        for t, v in zip(times, traj.values):
            fh.write(f"{t:.17g},{v:.17g}\n")


def window_from_trajectory(traj: Trajectory, t: float, grid: TimeGrid) -> PastWindow:
    """Extract the past window ``[t - T, t]`` of a trajectory.

    Grid points earlier than the trajectory start are filled by constant
    extrapolation of the first recorded sample (system at rest before the
    recording began).

    Raises
    ------
    GridMismatchError
        If the trajectory step differs from the grid step.
    ValueError
        If ``t`` is not a sample time of the trajectory.
    """
    if not _steps_equal(traj.dt, grid.dt):
        raise GridMismatchError(
            f"trajectory step {traj.dt} does not match grid step {grid.dt}"
        )
    end = traj.index_of(t)
    start = end - (grid.n - 1)
    if start >= 0:
        samples = traj.values[start : end + 1]
    else:
        pad = np.full(-start, traj.values[0])
        samples = np.concatenate([pad, traj.values[: end + 1]])
    return PastWindow(grid=grid, samples=samples)


def _require_same_grid(u: PastWindow, v: PastWindow) -> None:
    if not u.grid.compatible(v.grid):
        raise GridMismatchError(
            f"windows live on different grids: "
            f"(dt={u.grid.dt}, n={u.grid.n}) vs (dt={v.grid.dt}, n={v.grid.n})"
        )


def weighted_inner(u: PastWindow, v: PastWindow, weight: ExpWeight) -> float:
    """Weighted inner product ``int_{-T}^{0} u(t) v(t) exp(rate*t) dt``.

    Trapezoidal quadrature on the shared grid.  This is the canonical
    bilinear kernel of the fading-memory Hilbert space.
    """
    _require_same_grid(u, v)
    grid = u.grid
    q = grid.trapezoid_weights() * weight.squared_density(grid.times())
    # Pointwise product first keeps the result bit-identical under u <-> v.
    return float(np.dot(u.samples * v.samples, q))


def weighted_norm(u: PastWindow, weight: ExpWeight) -> float:
    """Fading-memory norm ``sqrt(<u, u>_w)``; clipped at zero."""
    return math.sqrt(max(weighted_inner(u, u, weight), 0.0))


def scheduling_value(u: PastWindow, rate: float) -> float:
    """Scheduling functional ``int_{-T}^{0} u(t) exp(rate*t) dt``.

    This is the Laplace transform of the past input evaluated at
    ``s = rate``: a scalar measure of the recent input amplitude that
    gain-scheduled kernels condition on.  Note the exponent is ``rate*t``,
    twice the decay of the weight function itself.
    """
    grid = u.grid
    q = grid.trapezoid_weights() * np.exp(rate * grid.times())
    return float(np.dot(q, u.samples))


def weight_energy(weight: ExpWeight, horizon: float | None = None) -> float:
    """Closed-form energy ``sqrt(int_{-T}^{0} w(t)^2 dt)`` of the weight.

    With ``horizon=None`` the integral runs over the whole past and the
    value is ``1/sqrt(rate)``.  This constant sets the incremental
    small-gain threshold ``beta^2 < 1/c^2``.
    """
    lam = weight.rate
    if horizon is None or math.isinf(horizon):
        return 1.0 / math.sqrt(lam)
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    return math.sqrt(-math.expm1(-lam * horizon) / lam)


def check_bounded_rate_limited(u: PastWindow, m1: float, m2: float) -> bool:
    """Membership test for the bounded, rate-limited signal class.

    True iff every sample satisfies ``|u_k| <= m1`` and every adjacent pair
    satisfies ``|u_{k+1} - u_k| <= m2 * dt`` (discrete Lipschitz surrogate).
    """
    if m1 < 0 or m2 < 0:
        raise ValueError("bounds m1, m2 must be nonnegative")
    samples = u.samples
    if np.max(np.abs(samples)) > m1:
        return False
    if u.grid.n >= 2:
        slope_tol = m2 * u.grid.dt
        if np.max(np.abs(np.diff(samples))) > slope_tol:
            return False
    return True
