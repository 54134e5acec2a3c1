"""Uniformly sampled time functions on ``[0, T]`` and the numerical
primitives shared by the solver, the ADMM layer and the wire format."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class TrajectoryError(ValueError):
    pass


class Trajectory:
    """``N`` samples of a ``dim``-valued function on the uniform grid
    ``t_k = k * T / (N - 1)``.

    The grid is implicit. ``values`` is an ``(N, dim)`` float64 array and is
    never allowed to hold NaN or Inf.
    """

    __slots__ = ("T", "values")

    def __init__(self, T: float, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise TrajectoryError(f"values must be (N, dim), got shape {values.shape}")
        if not T > 0 or not math.isfinite(T):
            raise TrajectoryError(f"horizon must be positive and finite, got {T}")
        if values.shape[0] < 2:
            raise TrajectoryError(f"need at least 2 grid points, got {values.shape[0]}")
        if not np.isfinite(values).all():
            raise TrajectoryError("trajectory values must be finite")
        self.T = float(T)
        self.values = values

    @classmethod
    def constant(cls, T: float, N: int, value) -> "Trajectory":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(T, np.tile(value, (N, 1)))

    @classmethod
    def zeros(cls, T: float, N: int, dim: int) -> "Trajectory":
        return cls(T, np.zeros((N, dim)))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def dt(self) -> float:
        return self.T / (self.N - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N)

    def copy(self) -> "Trajectory":
        return Trajectory(self.T, self.values.copy())

    def same_grid(self, other: "Trajectory") -> bool:
        return self.T == other.T and self.N == other.N

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.T == other.T and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))

    def __repr__(self) -> str:
        return f"Trajectory(T={self.T}, N={self.N}, dim={self.dim})"


def trapezoid_weights(T: float, N: int) -> np.ndarray:
    """Quadrature weights of the composite trapezoidal rule on the grid."""
    if N < 2:
        raise TrajectoryError("quadrature needs N >= 2")
    w = np.full(N, T / (N - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def integrate_cost(integrand, T: float | None = None) -> float:
    """Trapezoidal integral over ``[0, T]`` of a sampled scalar (or the sum of
    the components of a sampled vector) function."""
    if isinstance(integrand, Trajectory):
        T, values = integrand.T, integrand.values
    else:
        if T is None:
            raise TrajectoryError("T is required for raw sample arrays")
        values = np.asarray(integrand, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    w = trapezoid_weights(T, values.shape[0])
    return float(w @ values.sum(axis=1))


def weighted_sq_norm(traj: Trajectory, weights, integrate: bool = False):
    """Pointwise ``x(t)^T diag(w) x(t)`` as a scalar trajectory, or its
    trapezoidal integral when ``integrate`` is set."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape[0] != traj.dim:
        raise TrajectoryError(f"weight length {w.shape[0]} != trajectory dim {traj.dim}")
    pointwise = Trajectory(traj.T, (traj.values ** 2) @ w)
    if integrate:
        return integrate_cost(pointwise)
    return pointwise


def sample(traj: Trajectory, times) -> np.ndarray:
    """Linear interpolation at each of ``times``; ``times`` must lie in
    ``[0, T]``."""
    times = np.asarray(times, dtype=np.float64)
    pos = times / traj.dt
    idx = np.clip(np.floor(pos).astype(int), 0, traj.N - 2)
    frac = (pos - idx)[..., None]
    v = traj.values
    return v[idx] * (1.0 - frac) + v[idx + 1] * frac


def lerp(traj: Trajectory, t: float) -> np.ndarray:
    """Value of the piecewise-linear interpolant at ``t``; exact at grid
    points."""
    if not 0.0 <= t <= traj.T:
        raise TrajectoryError(f"t={t} outside [0, {traj.T}]")
    pos = t / traj.dt
    k = int(round(pos))
    if abs(pos - k) < 1e-12:
        return traj.values[k].copy()
    return sample(traj, np.array([t]))[0]


def shift_values(values: np.ndarray, T: float, dt: float) -> np.ndarray:
    """Array form of :func:`shift` used on hot paths. Works on ``(N, ...)``."""
    N = values.shape[0]
    if dt == 0.0:
        return values.copy()
    h = T / (N - 1)
    pos = np.minimum(np.arange(N) * h + dt, T) / h
    idx = np.clip(np.floor(pos).astype(int), 0, N - 2)
    frac = pos - idx
    frac = frac.reshape((N,) + (1,) * (values.ndim - 1))
    return values[idx] * (1.0 - frac) + values[idx + 1] * frac


def shift(traj: Trajectory, dt: float) -> Trajectory:
    """Warm-start shift: resample at ``t + dt`` and hold the last value past
    ``T``. Grid size and horizon are unchanged."""
    if not 0.0 <= dt <= traj.T:
        raise TrajectoryError(f"shift {dt} outside [0, {traj.T}]")
    return Trajectory(traj.T, shift_values(traj.values, traj.T, dt))


def stacked_diff_norm(pairs: Iterable[tuple[Trajectory, Trajectory]], kind: str = "l2") -> float:
    """Norm of the stacked differences of trajectory pairs.

    ``kind="l2"`` is the trapezoidal ``sqrt(int sum_components (a - b)^2 dt)``;
    ``kind="sup"`` is the largest absolute pointwise difference.
    """
    total = 0.0
    for a, b in pairs:
        av = a.values if isinstance(a, Trajectory) else np.asarray(a)
        bv = b.values if isinstance(b, Trajectory) else np.asarray(b)
        if av.shape != bv.shape:
            raise TrajectoryError(f"shape mismatch {av.shape} vs {bv.shape}")
        diff = av - bv
        if kind == "l2":
            T = a.T if isinstance(a, Trajectory) else b.T
            w = trapezoid_weights(T, av.shape[0])
            total += float(w @ (diff * diff).reshape(av.shape[0], -1).sum(axis=1))
        elif kind == "sup":
            if diff.size:
                total = max(total, float(np.max(np.abs(diff))))
        else:
            raise TrajectoryError(f"unknown norm kind {kind!r}")
    return math.sqrt(total) if kind == "l2" else total


def write_csv(path, times: Sequence[float], columns: Mapping[str, np.ndarray], index_name: str = "t") -> Path:
    """Write ``t,<name>_0,...`` rows with 17 significant digits.

    Each entry of ``columns`` is an array with one row per time; a 2-D entry
    expands into ``<name>_0 .. <name>_{d-1}``, a 1-D one into a single
    ``<name>`` column.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [index_name]
    blocks = []
    for name, arr in columns.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            header.append(name)
            blocks.append(arr[:, None])
        else:
            header.extend(f"{name}_{k}" for k in range(arr.shape[1]))
            blocks.append(arr)
    data = np.column_stack([np.asarray(times, dtype=np.float64)] + blocks)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in data:
            writer.writerow([format(v, ".17g") for v in row])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows)
