"""Fourier vector fields on the flat 2-torus and the density-constancy experiment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .forms import Form, FormArgumentError, VectorField, divergence, volume_form
from .verify import continuity_residual, ContinuityReport
from .sde import SdeSystem

TWO_PI = 2.0 * np.pi

__all__ = [
    "FourierMode",
    "PreconditionError",
    "canonicalize",
    "torus_grid",
    "torus_volume",
    "fourier_field_A",
    "fourier_field_B",
    "scalar_field",
    "check_divergence_free",
    "DivergenceReport",
    "ConstancyReport",
    "density_constancy_experiment",
]


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class FourierMode:
    k1: int
    k2: int

    def __post_init__(self):
        if int(self.k1) != self.k1 or int(self.k2) != self.k2:
            raise FormArgumentError("Fourier modes are integer pairs")
        if self.k1 == 0 and self.k2 == 0:
            raise FormArgumentError("the zero mode does not define a field")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.k1, self.k2], dtype=float)

    def phase(self, x: np.ndarray) -> np.ndarray:
        return self.k1 * x[..., 0] + self.k2 * x[..., 1]


def _mode(k) -> FourierMode:
    return k if isinstance(k, FourierMode) else FourierMode(*k)


def canonicalize(x) -> np.ndarray:
    """Angles reduced to [0, 2 pi)."""
    return np.mod(np.asarray(x, dtype=float), TWO_PI)


def torus_grid(n1: int, n2: Optional[int] = None) -> np.ndarray:
    """Uniform (n1*n2, 2) grid of angles on [0, 2 pi)^2."""
    n2 = n1 if n2 is None else n2
    a = np.arange(n1) * (TWO_PI / n1)
    b = np.arange(n2) * (TWO_PI / n2)
    A, Bb = np.meshgrid(a, b, indexing="ij")
    return np.stack([A.ravel(), Bb.ravel()], axis=-1)


def torus_volume() -> Form:
    return volume_form(2, name="dtheta1^dtheta2")


def _fourier_field(k, wave: Callable, dwave: Callable, name: str) -> VectorField:
    k = _mode(k)
    w = np.array([k.k2, -k.k1], dtype=float)  # direction orthogonal to k

    def value(t, x):
        return wave(k.phase(x))[..., None] * w

    def jacobian(t, x):
        return dwave(k.phase(x))[..., None, None] * np.outer(w, k.vector)

    return VectorField(2, value, jacobian, name=f"{name}_({k.k1},{k.k2})")


def fourier_field_A(k) -> VectorField:
    """A_k = k2 cos(k.theta) d_1 - k1 cos(k.theta) d_2."""
    return _fourier_field(k, np.cos, lambda s: -np.sin(s), "A")


def fourier_field_B(k) -> VectorField:
    """B_k = k2 sin(k.theta) d_1 - k1 sin(k.theta) d_2."""
    return _fourier_field(k, np.sin, np.cos, "B")


def scalar_field(value: Callable, gradient: Optional[Callable] = None, time_derivative: Optional[Form] = None, name: str = "rho") -> Form:
    """Wrap ``value(t, x)`` (and optionally ``gradient(t, x) -> (..., 2)``) as a 0-form on the torus."""
    grad = None if gradient is None else (lambda t, x: gradient(t, x)[..., None, :])
    return Form(2, 0, lambda t, x: value(t, x)[..., None], grad, time_derivative, name=name)


@dataclass
class DivergenceReport:
    field_name: str
    max_abs_divergence: float
    points: int

    def passes(self, tol: float = 1e-10) -> bool:
        return self.max_abs_divergence <= tol


def check_divergence_free(X: VectorField, grid, t: float = 0.0) -> DivergenceReport:
    grid = np.asarray(grid, dtype=float)
    div = divergence(torus_volume(), X, t, grid)
    return DivergenceReport(X.name, float(np.max(np.abs(div))), len(grid))


@dataclass
class ConstancyReport:
    mode: FourierMode
    constraint_max: dict[str, float]
    gradient_max: float
    degenerate_points: int
    constraint_rank: int
    max_deviation: Optional[float]
    certified: bool
    violated: list[str] = field(default_factory=list)
    continuity: Optional[ContinuityReport] = None

    @property
    def rejected(self) -> bool:
        return bool(self.violated)

    @property
    def verdict(self) -> str:
        if self.certified:
            return "constant"
        if self.rejected:
            return "rejected: " + ", ".join(self.violated)
        return "constraints hold but the density is not constant"


def density_constancy_experiment(
    k,
    rho0: Form,
    u: VectorField,
    grid,
    horizon: float,
    steps: int = 64,
    tol: float = 1e-10,
) -> ConstancyReport:
    """Test the torus constancy argument for one Fourier mode.

    The noise constraints <grad rho, A_k> = 0 and <grad rho, B_k> = 0 are
    evaluated on the grid; violations are named. When the gradient vanishes,
    rho_t = rho_0 - int_0^t u(rho_s) ds is integrated on the grid (trapezoid)
    and its largest deviation from rho_0(0, 0) is reported.
    """
    k = _mode(k)
    grid = np.asarray(grid, dtype=float)
    mu = torus_volume()
    udiv = check_divergence_free(u, grid)
    if not udiv.passes(1e-8):
        raise PreconditionError(f"drift {u.name} is not divergence free (max |div| = {udiv.max_abs_divergence:.3g})")

    A = fourier_field_A(k)
    B = fourier_field_B(k)
    grad = rho0.gradient(0.0, grid)[..., 0, :]
    a = A.value(0.0, grid)
    b = B.value(0.0, grid)
    constraints = {
        f"<grad rho, A_{k.k1, k.k2}> = 0": float(np.max(np.abs(np.sum(grad * a, axis=-1)))),
        f"<grad rho, B_{k.k1, k.k2}> = 0": float(np.max(np.abs(np.sum(grad * b, axis=-1)))),
    }
    violated = [name for name, v in constraints.items() if v > tol]

    # rows of the constraint system at each point; cos and sin of k.theta
    # never vanish together, so the rows are never both zero
    phase = k.phase(grid)
    degenerate = int(np.sum((np.abs(np.cos(phase)) <= tol) & (np.abs(np.sin(phase)) <= tol)))
    rank = int(max(np.linalg.matrix_rank(np.stack([a[i], b[i]]), tol=1e-12) for i in range(len(grid))))

    gmax = float(np.max(np.abs(grad)))
    system = SdeSystem(u, [A, B])
    times = np.linspace(0.0, horizon, steps + 1)
    continuity = continuity_residual(rho0, system, mu, grid, [0.0])
    deviation = None
    certified = False
    if gmax <= tol and not violated:
        origin = rho0.coefficients(0.0, np.zeros(2))[0]
        rho0_grid = rho0.coefficients(0.0, grid)[..., 0]
        # u(rho_s) with rho_s = rho_0 once the gradient vanishes
        transport = np.stack([np.sum(u.value(t, grid) * grad, axis=-1) for t in times])
        integral = np.concatenate([np.zeros((1, len(grid))), np.cumsum(0.5 * (transport[1:] + transport[:-1]) * np.diff(times)[:, None], axis=0)])
        rho_t = rho0_grid[None, :] - integral
        deviation = float(np.max(np.abs(rho_t - origin)))
        certified = deviation <= tol
    return ConstancyReport(k, constraints, gmax, degenerate, rank, deviation, certified, violated, continuity)
