import numpy as np
import pytest

from stoflow.forms import Form, VectorField


def polynomial_field_2d(a, b):
    """X = (a0 + a1 x + a2 y^2, b0 + b1 x y), with sympy-friendly coefficients."""

    def value(t, x):
        u, v = x[..., 0], x[..., 1]
        return np.stack([a[0] + a[1] * u + a[2] * v**2, b[0] + b[1] * u * v], axis=-1)

    def jac(t, x):
        u, v = x[..., 0], x[..., 1]
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = a[1]
        out[..., 0, 1] = 2 * a[2] * v
        out[..., 1, 0] = b[1] * v
        out[..., 1, 1] = b[1] * u
        return out

    return VectorField(2, value, jac, name="poly")


def trig_one_form_2d():
    """sin(x) cos(y) dx + x y^2 dy."""

    def coeffs(t, x):
        u, v = x[..., 0], x[..., 1]
        return np.stack([np.sin(u) * np.cos(v), u * v**2], axis=-1)

    def grad(t, x):
        u, v = x[..., 0], x[..., 1]
        g = np.zeros(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = np.cos(u) * np.cos(v)
        g[..., 0, 1] = -np.sin(u) * np.sin(v)
        g[..., 1, 0] = v**2
        g[..., 1, 1] = 2 * u * v
        return g

    return Form(2, 1, coeffs, grad, name="trig")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
