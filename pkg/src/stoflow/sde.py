"""Stratonovich flows and the Brownian paths that drive them.

Paths are generated from counter-based Philox streams keyed by
``(seed, level)``, so bridge refinement and chunked ensemble evaluation never
depend on call order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .forms import FormArgumentError, VectorField

__all__ = [
    "BlowUpError",
    "BrownianPath",
    "BrownianEnsemble",
    "SdeSystem",
    "FlowTrajectory",
    "sample_brownian",
    "refine_brownian",
    "sample_ensemble",
    "path_seed",
    "as_batch",
    "heun_step",
    "flow_states",
    "integrate_flow",
    "integrate_ensemble",
]


class BlowUpError(ArithmeticError):
    """The flow left the finite numbers before the horizon."""

    def __init__(self, message: str, last_valid_time: float, node: Optional[int] = None):
        super().__init__(message)
        self.last_valid_time = last_valid_time
        self.node = node


def _normals(seed: int, level: int, shape: tuple[int, ...]) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(level)])))
    return gen.standard_normal(shape)


def path_seed(master_seed: int, index: int) -> int:
    """64-bit seed of the index-th path of an ensemble."""
    words = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


@dataclass(frozen=True)
class BrownianPath:
    m: int
    T: float
    steps: int
    values: np.ndarray
    seed: int
    level: int = 0

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


def _check_grid(T: float, steps: int) -> None:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")


def sample_brownian(m: int, T: float, steps: int, seed: int) -> BrownianPath:
    _check_grid(T, steps)
    if m < 0:
        raise ValueError("driver count must be non-negative")
    dt = T / steps
    inc = np.sqrt(dt) * _normals(seed, 0, (steps, m))
    values = np.zeros((steps + 1, m))
    np.cumsum(inc, axis=0, out=values[1:])
    return BrownianPath(m, float(T), steps, values, int(seed), 0)


def _bridge(values: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    """Insert conditional midpoints along axis -2 of ``values``."""
    steps = values.shape[-2] - 1
    out = np.empty(values.shape[:-2] + (2 * steps + 1, values.shape[-1]))
    out[..., ::2, :] = values
    out[..., 1::2, :] = 0.5 * (values[..., :-1, :] + values[..., 1:, :]) + np.sqrt(dt / 4.0) * noise
    return out


def refine_brownian(path: BrownianPath) -> BrownianPath:
    """Halve the step by Brownian-bridge midpoints; even indices are kept exactly."""
    level = path.level + 1
    noise = _normals(path.seed, level, (path.steps, path.m))
    values = _bridge(path.values, path.dt, noise)
    return BrownianPath(path.m, path.T, 2 * path.steps, values, path.seed, level)


@dataclass(frozen=True)
class BrownianEnsemble:
    """N independent paths on one grid; ``values`` has shape (N, steps+1, m)."""

    m: int
    T: float
    steps: int
    values: np.ndarray
    seeds: tuple[int, ...]
    level: int = 0

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def path(self, i: int) -> BrownianPath:
        return BrownianPath(self.m, self.T, self.steps, self.values[i], self.seeds[i], self.level)

    def subset(self, indices: Sequence[int]) -> "BrownianEnsemble":
        idx = list(indices)
        return BrownianEnsemble(self.m, self.T, self.steps, self.values[idx], tuple(self.seeds[i] for i in idx), self.level)

    def refine(self) -> "BrownianEnsemble":
        level = self.level + 1
        noise = np.stack([_normals(s, level, (self.steps, self.m)) for s in self.seeds])
        values = _bridge(self.values, self.dt, noise)
        return BrownianEnsemble(self.m, self.T, 2 * self.steps, values, self.seeds, level)

    @classmethod
    def from_paths(cls, paths: Sequence[BrownianPath]) -> "BrownianEnsemble":
        paths = list(paths)
        if not paths:
            raise ValueError("empty path list")
        p0 = paths[0]
        if any((p.m, p.T, p.steps, p.level) != (p0.m, p0.T, p0.steps, p0.level) for p in paths):
            raise ValueError("paths live on different grids")
        return cls(p0.m, p0.T, p0.steps, np.stack([p.values for p in paths]), tuple(p.seed for p in paths), p0.level)


def sample_ensemble(m: int, T: float, steps: int, n_paths: int, master_seed: int, start: int = 0) -> BrownianEnsemble:
    """Paths ``start .. start+n_paths-1`` of the ensemble keyed by ``master_seed``."""
    return BrownianEnsemble.from_paths(
        [sample_brownian(m, T, steps, path_seed(master_seed, i)) for i in range(start, start + n_paths)]
    )


def as_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """(times, values with a leading path axis) for a path or an ensemble."""
    if isinstance(path, BrownianPath):
        return path.times, path.values[None]
    if isinstance(path, BrownianEnsemble):
        return path.times, path.values
    raise TypeError(f"expected a BrownianPath or BrownianEnsemble, got {type(path).__name__}")


# --------------------------------------------------------------------------
# flows
# --------------------------------------------------------------------------


@dataclass
class SdeSystem:
    """dx = X0(t, x) dt + sum_k Xk(t, x) o dB^k."""

    drift: VectorField
    diffusions: list[VectorField] = field(default_factory=list)

    def __post_init__(self):
        self.diffusions = list(self.diffusions)
        if any(X.dim != self.drift.dim for X in self.diffusions):
            raise FormArgumentError("all fields of a system share one dimension")

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def m(self) -> int:
        return len(self.diffusions)

    @property
    def fields(self) -> list[VectorField]:
        return [self.drift] + self.diffusions


@dataclass
class FlowTrajectory:
    times: np.ndarray
    positions: np.ndarray
    jacobians: np.ndarray


def _increment(system: SdeSystem, t: float, dt: float, x: np.ndarray, J: np.ndarray, dB: np.ndarray):
    dx = system.drift.value(t, x) * dt
    dJ = system.drift.jacobian(t, x) * dt
    for k, X in enumerate(system.diffusions):
        db = dB[..., k, None]
        dx = dx + X.value(t, x) * db
        dJ = dJ + X.jacobian(t, x) * db[..., None]
    return dx, _matmul(dJ, J)


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed summation order; BLAS dispatch may vary with batch layout
    out = a[..., :, 0, None] * b[..., None, 0, :]
    for k in range(1, a.shape[-1]):
        out = out + a[..., :, k, None] * b[..., None, k, :]
    return out


def heun_step(system: SdeSystem, t: float, dt: float, x: np.ndarray, J: np.ndarray, dB: np.ndarray):
    """One Stratonovich-Heun step of the flow and its variational equation.

    ``x`` is (..., n), ``J`` is (..., n, n) and ``dB`` is (..., m), all
    broadcast against each other.
    """
    fx, fJ = _increment(system, t, dt, x, J, dB)
    gx, gJ = _increment(system, t + dt, dt, x + fx, J + fJ, dB)
    return x + 0.5 * (fx + gx), J + 0.5 * (fJ + gJ)


def flow_states(system: SdeSystem, x0, times: np.ndarray, B: np.ndarray) -> Iterator[tuple[int, float, np.ndarray, np.ndarray]]:
    """Yield ``(j, t_j, x_j, J_j)`` along the grid.

    ``x0`` has shape (..., Q, n) or (Q, n); ``B`` has shape (P, steps+1, m) and
    its path axis is broadcast against the leading axis of the state, giving
    states of shape (P, Q, n).
    """
    x0 = np.asarray(x0, dtype=float)
    n = system.dim
    if x0.shape[-1] != n:
        raise FormArgumentError(f"initial points have dimension {x0.shape[-1]}, system has {n}")
    B = np.asarray(B, dtype=float)
    if B.shape[-1] != system.m:
        raise FormArgumentError(f"path has {B.shape[-1]} drivers, system has {system.m}")
    P = B.shape[0]
    x = np.broadcast_to(x0, (P,) + x0.shape[-2:]).copy()
    J = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
    steps = len(times) - 1
    yield 0, float(times[0]), x, J
    for j in range(steps):
        t = float(times[j])
        dt = float(times[j + 1] - times[j])
        dB = (B[:, j + 1] - B[:, j])[:, None, :]
        with np.errstate(over="ignore", invalid="ignore"):
            x_new, J_new = heun_step(system, t, dt, x, J, dB)
        bad = ~(np.all(np.isfinite(x_new), axis=-1) & np.all(np.isfinite(J_new), axis=(-2, -1)))
        if np.any(bad):
            node = int(np.argwhere(bad)[0][-1])
            raise BlowUpError(f"flow blew up after t={t:g} at node {node}", last_valid_time=t, node=node)
        x, J = x_new, J_new
        yield j + 1, float(times[j + 1]), x, J


def integrate_flow(system: SdeSystem, x0, path: BrownianPath) -> FlowTrajectory:
    return integrate_ensemble(system, [x0], path)[0]


def integrate_ensemble(system: SdeSystem, points, path: BrownianPath) -> list[FlowTrajectory]:
    """Flow every point along the same noise path; order is preserved."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise FormArgumentError("expected a nonempty list of points")
    times, B = as_batch(path)
    xs, Js = [], []
    for _, _, x, J in flow_states(system, pts, times, B):
        xs.append(x[0])
        Js.append(J[0])
    X = np.stack(xs, axis=1)
    JJ = np.stack(Js, axis=1)
    return [FlowTrajectory(times, X[q], JJ[q]) for q in range(len(pts))]
