"""Kernels on past-input windows.

The closed kernel family used for memory-functional regression:

* ``BilinearKernel``      -- ``k(u,v) = <u,v>_w``, the canonical linear model.
* ``RbfKernel``           -- ``exp(-|u-v|_w^2 / (2 sigma^2))``, universal.
* ``LpvKernel``           -- Gaussian in the scheduling-value difference,
  multiplying the bilinear kernel: a gain-scheduled family of linear models.
* ``ConductanceLpvKernel``-- the LPV kernel times ``u(0) v(0)``, matching the
  conductance structure of ionic-current elements.
* ``TwoScaleConductanceLpvKernel`` -- two Gaussian scheduling factors with
  distinct decay rates, for elements with two well-separated time constants.

Every variant is symmetric and positive semidefinite (products of PSD
kernels and the rank-one ``u(0) v(0)`` kernel).  Gram matrices are
assembled from the upper triangle and mirrored, so symmetry holds to the
last bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .signals import ExpWeight, GridMismatchError, PastWindow, TimeGrid

__all__ = [
    "BilinearKernel",
    "RbfKernel",
    "LpvKernel",
    "ConductanceLpvKernel",
    "TwoScaleConductanceLpvKernel",
    "KernelSpec",
    "DegeneratePairError",
    "WindowSet",
    "eval_kernel",
    "kernel_vector",
    "kernel_matrix",
    "gram",
    "lipschitz_defect",
    "nominal_lipschitz_constant",
    "kernel_to_dict",
    "kernel_from_dict",
]


class DegeneratePairError(ValueError):
    """The two windows coincide in the weighted norm; the ratio is undefined."""


def _check_sigma(sigma: float, name: str = "sigma") -> None:
    if not sigma > 0:
        raise ValueError(f"{name} must be positive, got {sigma}")


@dataclass(frozen=True)
class BilinearKernel:
    weight: ExpWeight


@dataclass(frozen=True)
class RbfKernel:
    weight: ExpWeight
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)


@dataclass(frozen=True)
class LpvKernel:
    weight: ExpWeight
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)


@dataclass(frozen=True)
class ConductanceLpvKernel:
    weight: ExpWeight
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)


@dataclass(frozen=True)
class TwoScaleConductanceLpvKernel:
    weight: ExpWeight
    sigma: float
    weight2: ExpWeight
    sigma2: float

    def __post_init__(self):
        _check_sigma(self.sigma)
        _check_sigma(self.sigma2, "sigma2")


KernelSpec = Union[
    BilinearKernel,
    RbfKernel,
    LpvKernel,
    ConductanceLpvKernel,
    TwoScaleConductanceLpvKernel,
]

_LPV_FAMILY = (LpvKernel, ConductanceLpvKernel, TwoScaleConductanceLpvKernel)


# ---------------------------------------------------------------------------
# serialization

_VARIANT_TAGS = {
    BilinearKernel: "bilinear",
    RbfKernel: "rbf",
    LpvKernel: "lpv",
    ConductanceLpvKernel: "conductance-lpv",
    TwoScaleConductanceLpvKernel: "two-scale-conductance-lpv",
}


def kernel_to_dict(spec: KernelSpec) -> dict:
    """Serialize a kernel spec to a tagged dict of hyperparameters."""
    out = {"variant": _VARIANT_TAGS[type(spec)], "lambda": spec.weight.rate}
    if not isinstance(spec, BilinearKernel):
        out["sigma"] = spec.sigma
    if isinstance(spec, TwoScaleConductanceLpvKernel):
        out["lambda2"] = spec.weight2.rate
        out["sigma2"] = spec.sigma2
    return out


def kernel_from_dict(d: dict) -> KernelSpec:
    """Inverse of :func:`kernel_to_dict`."""
    variant = d.get("variant")
    weight = ExpWeight(rate=float(d["lambda"]))
    if variant == "bilinear":
        return BilinearKernel(weight=weight)
    if variant == "rbf":
        return RbfKernel(weight=weight, sigma=float(d["sigma"]))
    if variant == "lpv":
        return LpvKernel(weight=weight, sigma=float(d["sigma"]))
    if variant == "conductance-lpv":
        return ConductanceLpvKernel(weight=weight, sigma=float(d["sigma"]))
    if variant == "two-scale-conductance-lpv":
        return TwoScaleConductanceLpvKernel(
            weight=weight,
            sigma=float(d["sigma"]),
            weight2=ExpWeight(rate=float(d["lambda2"])),
            sigma2=float(d["sigma2"]),
        )
    raise ValueError(f"unknown kernel variant {variant!r}")


# ---------------------------------------------------------------------------
# evaluation

def _density(grid: TimeGrid, rate: float) -> np.ndarray:
    """Trapezoid weights times ``exp(rate * t)`` on the grid."""
    return grid.trapezoid_weights() * np.exp(rate * grid.times())


@dataclass
class _Features:
    """Per-(kernel, window set) cache of the quantities entering the formulas."""

    q: np.ndarray            # bilinear quadrature density on the grid
    wq: np.ndarray           # (N, n) windows pre-multiplied by q
    norm_sq: np.ndarray      # (N,) weighted squared norms
    sched: np.ndarray | None   # (N,) first scheduling values
    sched2: np.ndarray | None  # (N,) second scheduling values (two-scale)
    ends: np.ndarray | None    # (N,) newest samples u(0)


class WindowSet:
    """Windows stacked on one shared grid, with cached kernel features.

    The row-major ``matrix`` has one window per row, oldest sample first.
    Feature caches are keyed by kernel spec, so repeated Gram/vector
    evaluations against the same set reuse the precomputation.
    """

    def __init__(self, grid: TimeGrid, matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] != grid.n:
            raise ValueError(
                f"window matrix must be (N, {grid.n}), got {matrix.shape}"
            )
        if matrix.shape[0] == 0:
            raise ValueError("window set must not be empty")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("window samples must be finite")
        self.grid = grid
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self._features: dict[KernelSpec, _Features] = {}

    @classmethod
    def from_windows(cls, windows) -> "WindowSet":
        windows = list(windows)
        if not windows:
            raise ValueError("window set must not be empty")
        grid = windows[0].grid
        for w in windows[1:]:
            if not grid.compatible(w.grid):
                raise GridMismatchError("all windows must share one grid")
        return cls(grid, np.stack([w.samples for w in windows]))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def window(self, i: int) -> PastWindow:
        return PastWindow(grid=self.grid, samples=self.matrix[i])

    def features(self, spec: KernelSpec) -> _Features:
        feats = self._features.get(spec)
        if feats is None:
            feats = self._build_features(spec)
            self._features[spec] = feats
        return feats

    def _build_features(self, spec: KernelSpec) -> _Features:
        q = _density(self.grid, spec.weight.rate)
        wq = self.matrix * q
        norm_sq = sched = sched2 = ends = None
        if isinstance(spec, RbfKernel):
            norm_sq = np.einsum("ij,ij->i", wq, self.matrix)
        if isinstance(spec, _LPV_FAMILY):
            # The scheduling density exp(rate*t) coincides with the squared
            # weight density, so the bilinear q doubles as the scheduling q.
            sched = wq.sum(axis=1)
        if isinstance(spec, TwoScaleConductanceLpvKernel):
            sched2 = self.matrix @ _density(self.grid, spec.weight2.rate)
        if isinstance(spec, (ConductanceLpvKernel, TwoScaleConductanceLpvKernel)):
            ends = self.matrix[:, -1].copy()
        return _Features(
            q=q, wq=wq, norm_sq=norm_sq, sched=sched, sched2=sched2, ends=ends
        )


def _gaussian(delta: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(delta * delta) / (2.0 * sigma * sigma))


def kernel_matrix(spec: KernelSpec, a: WindowSet, b: WindowSet) -> np.ndarray:
    """Cross-kernel matrix ``K[i, j] = k(a_i, b_j)``, shape ``(len(a), len(b))``."""
    if not a.grid.compatible(b.grid):
        raise GridMismatchError("window sets live on different grids")
    fa = a.features(spec)
    bilinear = fa.wq @ b.matrix.T
    if isinstance(spec, BilinearKernel):
        return bilinear
    fb = b.features(spec)
    if isinstance(spec, RbfKernel):
        d2 = fa.norm_sq[:, None] + fb.norm_sq[None, :] - 2.0 * bilinear
        np.clip(d2, 0.0, None, out=d2)
        if a is b:
            np.fill_diagonal(d2, 0.0)
        return _gaussian(np.sqrt(d2), spec.sigma)
    out = _gaussian(fa.sched[:, None] - fb.sched[None, :], spec.sigma) * bilinear
    if isinstance(spec, TwoScaleConductanceLpvKernel):
        out *= _gaussian(fa.sched2[:, None] - fb.sched2[None, :], spec.sigma2)
    if isinstance(spec, (ConductanceLpvKernel, TwoScaleConductanceLpvKernel)):
        out *= fa.ends[:, None] * fb.ends[None, :]
    return out


def kernel_vector(spec: KernelSpec, a: WindowSet, u: PastWindow) -> np.ndarray:
    """Kernel sections ``[k(a_i, u)]`` of a window set against one window."""
    if not a.grid.compatible(u.grid):
        raise GridMismatchError("window grid does not match the set's grid")
    fa = a.features(spec)
    bilinear = fa.wq @ u.samples
    if isinstance(spec, BilinearKernel):
        return bilinear
    if isinstance(spec, RbfKernel):
        u_norm = float(np.dot(fa.q * u.samples, u.samples))
        d2 = fa.norm_sq - 2.0 * bilinear + u_norm
        np.clip(d2, 0.0, None, out=d2)
        return _gaussian(np.sqrt(d2), spec.sigma)
    s_u = float(np.dot(fa.q, u.samples))
    out = _gaussian(fa.sched - s_u, spec.sigma) * bilinear
    if isinstance(spec, TwoScaleConductanceLpvKernel):
        q2 = _density(a.grid, spec.weight2.rate)
        out *= _gaussian(fa.sched2 - float(np.dot(q2, u.samples)), spec.sigma2)
    if isinstance(spec, (ConductanceLpvKernel, TwoScaleConductanceLpvKernel)):
        out *= fa.ends * u.samples[-1]
    return out


def eval_kernel(spec: KernelSpec, u: PastWindow, v: PastWindow) -> float:
    """Evaluate ``k(u, v)`` for a single pair of windows.

    The scalar path computes the RBF distance from the sample differences
    directly, so ``eval_kernel(spec, u, u)`` is exactly 1 for the RBF.
    """
    if not u.grid.compatible(v.grid):
        raise GridMismatchError("windows live on different grids")
    q = _density(u.grid, spec.weight.rate)
    if isinstance(spec, BilinearKernel):
        return float(np.dot(q * u.samples, v.samples))
    if isinstance(spec, RbfKernel):
        diff = u.samples - v.samples
        d2 = float(np.dot(q * diff, diff))
        return float(_gaussian(np.sqrt(max(d2, 0.0)), spec.sigma))
    s_u = float(np.dot(q, u.samples))
    s_v = float(np.dot(q, v.samples))
    out = float(_gaussian(np.asarray(s_u - s_v), spec.sigma)) * float(
        np.dot(q * u.samples, v.samples)
    )
    if isinstance(spec, TwoScaleConductanceLpvKernel):
        q2 = _density(u.grid, spec.weight2.rate)
        d2 = float(np.dot(q2, u.samples)) - float(np.dot(q2, v.samples))
        out *= float(_gaussian(np.asarray(d2), spec.sigma2))
    if isinstance(spec, (ConductanceLpvKernel, TwoScaleConductanceLpvKernel)):
        out *= u.samples[-1] * v.samples[-1]
    return out


def gram(spec: KernelSpec, windows) -> np.ndarray:
    """Gram matrix of a window collection; exactly symmetric by mirroring.

    ``windows`` may be a :class:`WindowSet` or an iterable of
    :class:`PastWindow` on one shared grid.
    """
    ws = windows if isinstance(windows, WindowSet) else WindowSet.from_windows(windows)
    full = kernel_matrix(spec, ws, ws)
    upper = np.triu(full)
    return upper + np.triu(full, 1).T


def lipschitz_defect(
    spec: KernelSpec, u: PastWindow, v: PastWindow, weight: ExpWeight
) -> float:
    """Empirical squared-Lipschitz ratio of the kernel on one window pair.

    Returns ``|k(u,u) - 2 k(u,v) + k(v,v)| / |u - v|_w^2``.  A kernel with
    Lipschitz constant ``r`` keeps this ratio below ``r^2`` for all pairs.
    """
    q = u.grid.trapezoid_weights() * weight.squared_density(u.grid.times())
    diff = u.samples - v.samples
    dist_sq = float(np.dot(q * diff, diff))
    if dist_sq <= 0.0 or np.sqrt(dist_sq) < 1e-12:
        raise DegeneratePairError(
            "windows coincide in the weighted norm; Lipschitz ratio undefined"
        )
    num = abs(
        eval_kernel(spec, u, u) - 2.0 * eval_kernel(spec, u, v) + eval_kernel(spec, v, v)
    )
    return num / dist_sq


def nominal_lipschitz_constant(spec: KernelSpec) -> float | None:
    """Kernel Lipschitz constant ``r`` where a closed form is known.

    The bilinear kernel satisfies the defect identity with ``r = 1``; the
    RBF kernel with ``r = 1/sigma``.  The gain-scheduled variants have no
    global constant (their diagonal grows with the window norm), so None
    is returned and callers must supply their own bound.
    """
    if isinstance(spec, BilinearKernel):
        return 1.0
    if isinstance(spec, RbfKernel):
        return 1.0 / spec.sigma
    return None
