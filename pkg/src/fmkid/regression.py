"""Kernel regularized least squares over past-input windows.

A memory functional is fitted from pairs (past window, current output) by
solving ``(K + gamma I) alpha = Y`` with ``K`` the kernel Gram matrix; the
fitted functional is ``F(u) = sum_i alpha_i k(u_i, u)``.  The module also
computes the RKHS norm of the fit, the induced Lipschitz bound
``beta = r |F|``, and the incremental small-gain certificate
``beta^2 < 1 / c^2`` that licenses closed-loop interconnection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import __version__
from .kernels import (
    KernelSpec,
    WindowSet,
    gram,
    kernel_from_dict,
    kernel_to_dict,
    kernel_vector,
    nominal_lipschitz_constant,
)
from .signals import ExpWeight, PastWindow, TimeGrid, weight_energy

__all__ = [
    "Dataset",
    "TrainedModel",
    "FitError",
    "fit",
    "predict",
    "rkhs_norm",
    "lipschitz_bound",
    "small_gain_check",
    "dataset_sha256",
    "save_model",
    "load_model",
    "write_dataset_csv",
    "read_dataset_csv",
]


class FitError(RuntimeError):
    """The regularized Gram system could not be factorized."""


@dataclass(frozen=True)
class Dataset:
    """Training pairs: past-input windows and the matching current outputs."""

    windows: WindowSet
    targets: np.ndarray

    def __post_init__(self):
        if not isinstance(self.windows, WindowSet):
            object.__setattr__(self, "windows", WindowSet.from_windows(self.windows))
        targets = np.asarray(self.targets, dtype=float).reshape(-1).copy()
        if targets.shape[0] != len(self.windows):
            raise ValueError(
                f"{targets.shape[0]} targets for {len(self.windows)} windows"
            )
        if not np.all(np.isfinite(targets)):
            raise ValueError("targets must be finite")
        targets.setflags(write=False)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def grid(self) -> TimeGrid:
        return self.windows.grid


def dataset_sha256(data: Dataset) -> str:
    """Canonical content hash of a dataset (grid, windows, targets)."""
    h = hashlib.sha256()
    h.update(b"fmkid-dataset-v1")
    h.update(np.float64(data.grid.dt).tobytes())
    h.update(np.int64(data.grid.n).tobytes())
    h.update(np.ascontiguousarray(data.windows.matrix).tobytes())
    h.update(np.ascontiguousarray(data.targets).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class TrainedModel:
    """Immutable result of :func:`fit`.

    ``rkhs_norm_sq`` caches ``alpha' K alpha`` from fit time; ``meta``
    records provenance (dataset hash, whether diagonal jitter was needed).
    """

    spec: KernelSpec
    windows: WindowSet
    alpha: np.ndarray
    gamma: float
    rkhs_norm_sq: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1).copy()
        if alpha.shape[0] != len(self.windows):
            raise ValueError("alpha length must match the training window count")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        if self.rkhs_norm_sq < -1e-10:
            raise ValueError(f"rkhs_norm_sq is negative: {self.rkhs_norm_sq}")

    @property
    def grid(self) -> TimeGrid:
        return self.windows.grid

    def predict(self, u: PastWindow) -> float:
        return float(np.dot(kernel_vector(self.spec, self.windows, u), self.alpha))

    def rkhs_norm(self) -> float:
        return float(np.sqrt(max(self.rkhs_norm_sq, 0.0)))


def fit(data: Dataset, spec: KernelSpec, gamma: float) -> TrainedModel:
    """Solve ``(K + gamma I) alpha = Y`` by Cholesky factorization.

    A failed factorization is retried once with ``1e-10 trace(K)/N`` of
    diagonal jitter; the retry is recorded in the model metadata.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    K = gram(spec, data.windows)
    if not np.all(np.isfinite(K)):
        raise FitError("Gram matrix has non-finite entries")
    n = K.shape[0]
    y = data.targets
    jitter_applied = False
    try:
        factor = cho_factor(K + gamma * np.eye(n), lower=True)
    except LinAlgError:
        jitter_applied = True
        jitter = 1e-10 * np.trace(K) / n
        try:
            factor = cho_factor(K + (gamma + jitter) * np.eye(n), lower=True)
        except LinAlgError as exc:
            raise FitError(
                f"factorization failed after jitter {jitter:g}"
            ) from exc
    alpha = cho_solve(factor, y)
    norm_sq = float(alpha @ (K @ alpha))
    return TrainedModel(
        spec=spec,
        windows=data.windows,
        alpha=alpha,
        gamma=float(gamma),
        rkhs_norm_sq=norm_sq,
        meta={"dataset_sha256": dataset_sha256(data), "jitter_applied": jitter_applied},
    )


def predict(model: TrainedModel, u: PastWindow) -> float:
    """Evaluate the fitted functional: ``sum_i alpha_i k(u_i, u)``."""
    return model.predict(u)


def rkhs_norm(model: TrainedModel) -> float:
    """RKHS norm of the fit, ``sqrt(max(alpha' K alpha, 0))``."""
    return model.rkhs_norm()


def _resolve_r(model: TrainedModel, r: float | None) -> float:
    if r is None:
        r = nominal_lipschitz_constant(model.spec)
        if r is None:
            raise ValueError(
                "kernel has no nominal Lipschitz constant; pass r explicitly"
            )
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    return float(r)


def lipschitz_bound(model: TrainedModel, r: float | None = None) -> float:
    """Operator Lipschitz bound ``beta = r |F|`` in the weighted norm.

    ``r`` is the kernel's Lipschitz constant; when omitted it is taken
    from the kernel spec (1 for the bilinear kernel, 1/sigma for the RBF).
    """
    return _resolve_r(model, r) * model.rkhs_norm()


def small_gain_check(
    model: TrainedModel,
    r: float | None = None,
    weight: ExpWeight | None = None,
    horizon: float | None = None,
) -> dict:
    """Incremental small-gain certificate for feedback interconnection.

    Computes ``beta = r |F|`` and the weight energy ``c`` over the window
    horizon; the loop is certified when ``beta^2 < 1 / c^2``.  The weight
    defaults to the kernel's and the horizon to the training window's.
    """
    beta = lipschitz_bound(model, r)
    if weight is None:
        weight = model.spec.weight
    if horizon is None:
        horizon = model.grid.horizon
    c = weight_energy(weight, horizon)
    return {"beta": beta, "c": c, "certified": bool(beta * beta < 1.0 / (c * c))}


# ---------------------------------------------------------------------------
# model file IO

_MODEL_FORMAT = "fmkid-model-v1"


def save_model(path, model: TrainedModel) -> None:
    """Write a model file; the numeric fields round-trip bit-exactly."""
    doc = {
        "format": _MODEL_FORMAT,
        "kernel": kernel_to_dict(model.spec),
        "gamma": model.gamma,
        "grid": {"dt": model.grid.dt, "n": model.grid.n},
        "windows": model.windows.matrix.tolist(),
        "alpha": model.alpha.tolist(),
        "rkhs_norm_sq": model.rkhs_norm_sq,
        "provenance": dict(model.meta, version=__version__),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path) -> TrainedModel:
    """Read a model file written by :func:`save_model`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _MODEL_FORMAT:
        raise ValueError(f"not a model file: format {doc.get('format')!r}")
    grid = TimeGrid(dt=float(doc["grid"]["dt"]), n=int(doc["grid"]["n"]))
    windows = WindowSet(grid, np.array(doc["windows"], dtype=float))
    return TrainedModel(
        spec=kernel_from_dict(doc["kernel"]),
        windows=windows,
        alpha=np.array(doc["alpha"], dtype=float),
        gamma=float(doc["gamma"]),
        rkhs_norm_sq=float(doc["rkhs_norm_sq"]),
        meta=dict(doc.get("provenance", {})),
    )


# ---------------------------------------------------------------------------
# dataset file IO

_DATASET_FORMAT = "fmkid-dataset-v1"


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".meta.json")


def write_dataset_csv(path, data: Dataset, extra: dict | None = None) -> None:
    """Write training pairs as CSV rows (target, then window samples).

    The grid lives in a ``.meta.json`` sidecar next to the CSV, together
    with any ``extra`` metadata supplied by the caller.
    """
    path = Path(path)
    n = data.grid.n
    header = "target," + ",".join(f"u_{j}" for j in range(n))
    lines = [header]
    for y, row in zip(data.targets, data.windows.matrix):
        lines.append(",".join("%.17g" % x for x in (y, *row)))
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "format": _DATASET_FORMAT,
        "grid": {"dt": data.grid.dt, "n": data.grid.n},
        "rows": len(data),
        "sha256": dataset_sha256(data),
    }
    if extra:
        meta["extra"] = extra
    _meta_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_dataset_csv(path) -> tuple[Dataset, dict]:
    """Read a dataset CSV plus its sidecar; returns (dataset, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no dataset file {path}")
    meta = json.loads(_meta_path(path).read_text())
    if meta.get("format") != _DATASET_FORMAT:
        raise ValueError(f"not a dataset sidecar: format {meta.get('format')!r}")
    grid = TimeGrid(dt=float(meta["grid"]["dt"]), n=int(meta["grid"]["n"]))
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.shape[1] != grid.n + 1:
        raise ValueError(
            f"dataset rows have {raw.shape[1]} columns, expected {grid.n + 1}"
        )
    data = Dataset(windows=WindowSet(grid, raw[:, 1:]), targets=raw[:, 0])
    recorded = meta.get("sha256")
    if recorded is not None and recorded != dataset_sha256(data):
        raise ValueError("dataset content does not match the recorded hash")
    return data, meta
