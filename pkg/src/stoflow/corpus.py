"""Named, parametrized fields, forms and densities used by experiment configs.

A config refers to corpus entries as ``{"name": ..., **params}``; the
registry turns those into :class:`VectorField` and :class:`Form` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forms import Form, VectorField, constant_field, constant_form, volume_form, zero_field
from .torus import fourier_field_A, fourier_field_B, scalar_field

__all__ = ["CorpusError", "FIELDS", "FORMS", "build_field", "build_form", "registry_listing", "NONCONSTANT_DENSITIES"]


class CorpusError(KeyError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Entry:
    build: Callable
    dims: tuple[int, ...]
    params: tuple[str, ...]
    doc: str


def _linear_drift(dim, rate=1.0):
    def jac(t, x):
        return np.full(x.shape + (1,), float(rate))

    return VectorField(1, lambda t, x: rate * x, jac, lambda t, x, u, v: np.zeros(x.shape), name="x d1")


def _cos_d1(dim):
    def value(t, x):
        return np.stack([np.cos(x[..., 0]), np.zeros(x.shape[:-1])], axis=-1)

    def jac(t, x):
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = -np.sin(x[..., 0])
        return out

    return VectorField(2, value, jac, name="cos(theta1) d1")


def _rotation(dim, omega=1.0):
    m = omega * np.array([[0.0, -1.0], [1.0, 0.0]])
    return VectorField(2, lambda t, x: x @ m.T, lambda t, x: np.broadcast_to(m, x.shape + (2,)), name="rotation")


FIELDS: dict[str, Entry] = {
    "zero": Entry(lambda dim: zero_field(dim), (1, 2, 3), (), "the zero field"),
    "constant": Entry(lambda dim, vector: constant_field(vector), (1, 2, 3), ("vector",), "constant field"),
    "r1.linear_drift": Entry(_linear_drift, (1,), ("rate",), "rate * x d1 on R (flow e^{rate t} x)"),
    "r1.constant": Entry(lambda dim, c=1.0: constant_field([c], name=f"{c} d1"), (1,), ("c",), "c d1 on R"),
    "r2.rotation": Entry(_rotation, (2,), ("omega",), "rigid rotation of the plane"),
    "torus.A": Entry(lambda dim, k: fourier_field_A(tuple(k)), (2,), ("k",), "A_k = k2 cos(k.th) d1 - k1 cos(k.th) d2"),
    "torus.B": Entry(lambda dim, k: fourier_field_B(tuple(k)), (2,), ("k",), "B_k = k2 sin(k.th) d1 - k1 sin(k.th) d2"),
    "torus.cos_d1": Entry(_cos_d1, (2,), (), "cos(theta1) d1, not divergence free"),
}


# --------------------------------------------------------------------------
# forms and densities
# --------------------------------------------------------------------------


def _sin_dtheta1(dim):
    def coeffs(t, x):
        return np.stack([np.sin(x[..., 0]), np.zeros(x.shape[:-1])], axis=-1)

    def grad(t, x):
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = np.cos(x[..., 0])
        return g

    return Form(2, 1, coeffs, grad, name="sin(theta1) dtheta1")


def _heat_sin(dim, c=1.0, phase=0.0):
    """e^{c^2 t / 2} sin(x + phase) dx, solving df/dt = -(c^2/2) f''."""
    a = 0.5 * c * c

    def f(t, x):
        return np.exp(a * t) * np.sin(x + phase)

    def g(t, x):
        return (np.exp(a * t) * np.cos(x + phase))[..., None]

    dt = Form(1, 1, lambda t, x: a * f(t, x), lambda t, x: a * g(t, x), name="d/dt heat")
    return Form(1, 1, f, g, time_derivative=dt, name=f"heat(c={c})")


def _density(value, gradient, name, time_derivative=None):
    return scalar_field(value, gradient, time_derivative, name=name)


def _zeros(x):
    return np.zeros(x.shape[:-1])


def _cos_theta1(dim):
    return _density(
        lambda t, x: np.cos(x[..., 0]),
        lambda t, x: np.stack([-np.sin(x[..., 0]), _zeros(x)], axis=-1),
        "cos(theta1)",
    )


def _cos_theta2(dim):
    return _density(
        lambda t, x: np.cos(x[..., 1]),
        lambda t, x: np.stack([_zeros(x), -np.sin(x[..., 1])], axis=-1),
        "cos(theta2)",
    )


def _sin_sum(dim):
    return _density(
        lambda t, x: 2.0 + np.sin(x[..., 0] + x[..., 1]),
        lambda t, x: np.repeat(np.cos(x[..., 0] + x[..., 1])[..., None], 2, axis=-1),
        "2 + sin(theta1 + theta2)",
    )


def _mixed(dim):
    return _density(
        lambda t, x: 3.0 + np.cos(x[..., 0]) * np.sin(2.0 * x[..., 1]),
        lambda t, x: np.stack(
            [-np.sin(x[..., 0]) * np.sin(2.0 * x[..., 1]), 2.0 * np.cos(x[..., 0]) * np.cos(2.0 * x[..., 1])], axis=-1
        ),
        "3 + cos(theta1) sin(2 theta2)",
    )


def _cos_mode(dim, k):
    k1, k2 = (float(v) for v in k)

    def phase(x):
        return k1 * x[..., 0] + k2 * x[..., 1]

    return _density(
        lambda t, x: np.cos(phase(x)),
        lambda t, x: -np.sin(phase(x))[..., None] * np.array([k1, k2]),
        f"cos({k1:g} theta1 + {k2:g} theta2)",
    )


def _exp_decay(dim, rate=1.0):
    """e^{-rate t} on R; with drift rate * x d1 it solves the continuity equation."""
    dt = Form(1, 0, lambda t, x: -rate * np.exp(-rate * t) * np.ones(x.shape), lambda t, x: np.zeros(x.shape + (1,)))
    return Form(
        1, 0, lambda t, x: np.exp(-rate * t) * np.ones(x.shape), lambda t, x: np.zeros(x.shape + (1,)), dt, name="e^{-t}"
    )


FORMS: dict[str, Entry] = {
    "form.sin_dtheta1": Entry(_sin_dtheta1, (2,), (), "sin(theta1) dtheta1 on the torus"),
    "form.volume": Entry(lambda dim: volume_form(dim), (1, 2, 3), (), "dx^1 ^ ... ^ dx^n"),
    "form.constant": Entry(
        lambda dim, degree, value: constant_form(dim, degree, value), (1, 2, 3), ("degree", "value"), "constant coefficients"
    ),
    "form.heat_sin": Entry(_heat_sin, (1,), ("c", "phase"), "e^{c^2 t/2} sin(x + phase) dx (martingale family)"),
    "density.constant": Entry(lambda dim, value=1.0: constant_form(dim, 0, value, name=f"{value}"), (1, 2, 3), ("value",), "constant density"),
    "density.exp_decay": Entry(_exp_decay, (1,), ("rate",), "e^{-rate t} on R"),
    "density.cos_theta1": Entry(_cos_theta1, (2,), (), "cos(theta1)"),
    "density.cos_theta2": Entry(_cos_theta2, (2,), (), "cos(theta2)"),
    "density.sin_sum": Entry(_sin_sum, (2,), (), "2 + sin(theta1 + theta2)"),
    "density.mixed": Entry(_mixed, (2,), (), "3 + cos(theta1) sin(2 theta2)"),
    "density.cos_mode": Entry(_cos_mode, (2,), ("k",), "cos(k . theta)"),
}

# non-constant torus densities exercised by the constancy experiment
NONCONSTANT_DENSITIES = [
    {"name": "density.cos_theta1"},
    {"name": "density.cos_theta2"},
    {"name": "density.sin_sum"},
    {"name": "density.mixed"},
]


def _build(table: dict[str, Entry], spec, dim: int, key: str):
    if not isinstance(spec, dict) or "name" not in spec:
        raise CorpusError(key, "expected an object with a 'name'")
    name = spec["name"]
    if name not in table:
        raise CorpusError(f"{key}.name", f"unknown corpus entry {name!r}")
    entry = table[name]
    params = {k: v for k, v in spec.items() if k != "name"}
    unknown = set(params) - set(entry.params)
    if unknown:
        raise CorpusError(f"{key}.{sorted(unknown)[0]}", f"{name} takes parameters {list(entry.params)}")
    if dim not in entry.dims:
        raise CorpusError(key, f"{name} is defined in dimensions {entry.dims}, not {dim}")
    try:
        return entry.build(dim, **params)
    except TypeError as exc:
        raise CorpusError(key, f"bad parameters for {name}: {exc}") from None


def build_field(spec, dim: int, key: str = "system") -> VectorField:
    return _build(FIELDS, spec, dim, key)


def build_form(spec, dim: int, key: str = "form") -> Form:
    return _build(FORMS, spec, dim, key)


def registry_listing() -> list[str]:
    lines = []
    for kind, table in (("field", FIELDS), ("form", FORMS)):
        for name, e in table.items():
            params = ", ".join(e.params) or "-"
            dims = ",".join(str(d) for d in e.dims)
            lines.append(f"{kind:5s}  {name:20s}  dims={dims:6s}  params={params:14s}  {e.doc}")
    return lines
