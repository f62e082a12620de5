"""Exterior calculus on flat coordinate charts.

Forms are stored as dense coefficient tables over strictly increasing
multi-indices. Every coefficient and field callable is vectorized: points are
arrays of shape ``(..., n)`` and results carry the same leading batch shape.

Derivatives are analytic whenever the leaf objects supply them. Derived forms
(``d``, ``i_X``, sums and products) propagate analytic gradients through the
product rule where possible and otherwise fall back to central differences.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

EPS = np.finfo(float).eps
FIRST_STEP = EPS ** (1.0 / 3.0)
NESTED_STEP = EPS ** 0.25

__all__ = [
    "FormArgumentError",
    "DegreeError",
    "NumericError",
    "InvariantError",
    "VectorField",
    "Form",
    "multi_indices",
    "constant_field",
    "zero_field",
    "scaled_field",
    "sum_fields",
    "constant_form",
    "zero_form",
    "volume_form",
    "evaluate_form",
    "exterior_derivative",
    "interior_product",
    "lie_derivative",
    "lie_derivative_squared",
    "wedge_scalar",
    "form_sum",
    "divergence",
    "divergence_function",
    "pullback_value",
]


class FormArgumentError(ValueError):
    """Raised on degree/argument-count or dimension mismatches."""


class DegreeError(FormArgumentError):
    """Raised when an operation would leave the range 0 <= degree <= n."""


class NumericError(ArithmeticError):
    """Raised when a derived quantity is not finite."""


class InvariantError(ValueError):
    """Raised when a volume form coefficient is not strictly positive."""


@lru_cache(maxsize=None)
def multi_indices(n: int, p: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.combinations(range(n), p))


def _as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != n:
        raise FormArgumentError(f"expected points with trailing dimension {n}, got shape {x.shape}")
    return x


def _central_gradient(func: Callable, t: float, x: np.ndarray, step: float) -> np.ndarray:
    """d func / d x by central differences; returns shape ``func(t, x).shape + (n,)``."""
    n = x.shape[-1]
    cols = []
    for i in range(n):
        h = step * np.maximum(1.0, np.abs(x[..., i]))
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += h
        xm[..., i] -= h
        # actual representable spacing, not the nominal step
        width = xp[..., i] - xm[..., i]
        diff = func(t, xp) - func(t, xm)
        cols.append(diff / width.reshape(width.shape + (1,) * (diff.ndim - width.ndim)))
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# vector fields
# --------------------------------------------------------------------------


class VectorField:
    """Time-dependent vector field X(t, x) on an n-dimensional chart.

    ``value(t, x)`` maps points ``(..., n)`` to vectors ``(..., n)``;
    ``jacobian(t, x)`` returns ``J[..., i, j] = dX^i/dx^j``.
    """

    def __init__(
        self,
        dim: int,
        value: Callable,
        jacobian: Optional[Callable] = None,
        second: Optional[Callable] = None,
        name: str = "field",
    ):
        if dim < 1:
            raise FormArgumentError("dimension must be at least 1")
        self.dim = dim
        self._value = value
        self._jacobian = jacobian
        self._second = second
        self.name = name

    def __repr__(self) -> str:
        return f"VectorField({self.name!r}, dim={self.dim})"

    @property
    def has_analytic_jacobian(self) -> bool:
        return self._jacobian is not None

    def value(self, t: float, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        return np.broadcast_to(self._value(t, x), x.shape)

    def jacobian(self, t: float, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        if self._jacobian is not None:
            return np.broadcast_to(self._jacobian(t, x), x.shape + (self.dim,))
        return _central_gradient(self.value, t, x, FIRST_STEP)

    def second_directional(self, t: float, x, u, v) -> np.ndarray:
        """Second derivative of X at x in directions u and v."""
        x = _as_points(x, self.dim)
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self._second is not None:
            return self._second(t, x, u, v)
        step = FIRST_STEP if self.has_analytic_jacobian else NESTED_STEP
        h = step * np.maximum(1.0, np.max(np.abs(x), axis=-1, keepdims=True))
        jp = self.jacobian(t, x + h * v)
        jm = self.jacobian(t, x - h * v)
        return np.einsum("...ij,...j->...i", (jp - jm), u * np.ones_like(x)) / (2.0 * h)


def constant_field(vector: Sequence[float], name: str = "constant") -> VectorField:
    c = np.asarray(vector, dtype=float)
    n = c.shape[0]
    return VectorField(
        n,
        lambda t, x: np.broadcast_to(c, x.shape),
        lambda t, x: np.zeros(x.shape + (n,)),
        lambda t, x, u, v: np.zeros(x.shape),
        name=name,
    )


def zero_field(dim: int) -> VectorField:
    return constant_field(np.zeros(dim), name="zero")


def sum_fields(fields: Sequence[VectorField], name: str = "sum") -> VectorField:
    fields = list(fields)
    dim = fields[0].dim
    if any(f.dim != dim for f in fields):
        raise FormArgumentError("fields have different dimensions")
    jac = None
    if all(f.has_analytic_jacobian for f in fields):
        jac = lambda t, x: sum(f.jacobian(t, x) for f in fields)
    return VectorField(dim, lambda t, x: sum(f.value(t, x) for f in fields), jac, name=name)


def scaled_field(f: "Form", X: VectorField, name: Optional[str] = None) -> VectorField:
    """The field f X for a 0-form f."""
    if f.degree != 0 or f.dim != X.dim:
        raise FormArgumentError("scaled_field needs a 0-form on the field's chart")

    def value(t, x):
        return f.coefficients(t, x)[..., :1] * X.value(t, x)

    jac = None
    if f.has_analytic_grad and X.has_analytic_jacobian:

        def jac(t, x):
            fx = f.coefficients(t, x)[..., 0]
            grad = f.gradient(t, x)[..., 0, :]
            return X.value(t, x)[..., :, None] * grad[..., None, :] + fx[..., None, None] * X.jacobian(t, x)

    return VectorField(X.dim, value, jac, name=name or f"({f.name})*{X.name}")


# --------------------------------------------------------------------------
# forms
# --------------------------------------------------------------------------


class Form:
    """Time-dependent p-form with coefficients over increasing multi-indices.

    ``coefficients(t, x)`` has shape ``(..., C(n, p))`` in the order of
    ``multi_indices(n, p)``; ``gradient(t, x)`` has shape ``(..., C(n, p), n)``.
    """

    def __init__(
        self,
        dim: int,
        degree: int,
        coefficients: Callable,
        gradient: Optional[Callable] = None,
        time_derivative: Optional["Form"] = None,
        name: str = "form",
    ):
        if not 0 <= degree <= dim:
            raise DegreeError(f"degree {degree} outside [0, {dim}]")
        self.dim = dim
        self.degree = degree
        self._coefficients = coefficients
        self._gradient = gradient
        self._time_derivative = time_derivative
        self.name = name

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, dim={self.dim}, degree={self.degree})"

    @property
    def indices(self) -> tuple[tuple[int, ...], ...]:
        return multi_indices(self.dim, self.degree)

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def has_analytic_grad(self) -> bool:
        return self._gradient is not None

    @property
    def exact(self) -> bool:
        """True when coefficients involve no finite differencing."""
        return True

    @property
    def time_derivative(self) -> "Form":
        if self._time_derivative is None:
            return zero_form(self.dim, self.degree)
        return self._time_derivative

    def coefficients(self, t: float, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        return np.broadcast_to(self._coefficients(t, x), x.shape[:-1] + (self.size,))

    def gradient(self, t: float, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        if self._gradient is not None:
            return np.broadcast_to(self._gradient(t, x), x.shape[:-1] + (self.size, self.dim))
        step = FIRST_STEP if self.exact else NESTED_STEP
        return _central_gradient(self.coefficients, t, x, step)

    def __call__(self, t: float, x, vs=None) -> np.ndarray:
        return evaluate_form(self, t, x, [] if vs is None else vs)


def constant_form(dim: int, degree: int, values, name: str = "constant") -> Form:
    c = np.broadcast_to(np.asarray(values, dtype=float), (len(multi_indices(dim, degree)),)).copy()
    return Form(
        dim,
        degree,
        lambda t, x: np.broadcast_to(c, x.shape[:-1] + c.shape),
        lambda t, x: np.zeros(x.shape[:-1] + c.shape + (dim,)),
        name=name,
    )


def zero_form(dim: int, degree: int) -> Form:
    size = len(multi_indices(dim, degree))
    return Form(
        dim,
        degree,
        lambda t, x: np.zeros(x.shape[:-1] + (size,)),
        lambda t, x: np.zeros(x.shape[:-1] + (size, dim)),
        time_derivative=None,
        name="0",
    )


def volume_form(dim: int, density: Optional[Form] = None, name: str = "mu") -> Form:
    """The top-degree form rho dx^1 ^ ... ^ dx^n (rho = 1 by default)."""
    if density is None:
        return constant_form(dim, dim, 1.0, name=name)
    if density.degree != 0:
        raise FormArgumentError("volume density must be a 0-form")
    return wedge_scalar(density, constant_form(dim, dim, 1.0), name=name)


class _Derived(Form):
    def __init__(self, dim: int, degree: int, name: str):
        super().__init__(dim, degree, self._coeffs, None, None, name)

    def _coeffs(self, t, x):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def time_derivative(self) -> Form:
        raise NotImplementedError(f"{self.name}: time derivative of a derived form is not tracked")


class _ExteriorDerivative(_Derived):
    def __init__(self, theta: Form):
        if theta.degree >= theta.dim:
            raise DegreeError("exterior derivative of a top-degree form")
        super().__init__(theta.dim, theta.degree + 1, f"d({theta.name})")
        self.theta = theta
        lower = {I: a for a, I in enumerate(theta.indices)}
        self._terms = []
        for J in self.indices:
            terms = []
            for a, j in enumerate(J):
                I = J[:a] + J[a + 1 :]
                terms.append((lower[I], j, -1.0 if a % 2 else 1.0))
            self._terms.append(terms)

    @property
    def exact(self) -> bool:
        return self.theta.has_analytic_grad

    def _coeffs(self, t, x):
        g = self.theta.gradient(t, x)
        out = np.zeros(x.shape[:-1] + (self.size,))
        for col, terms in enumerate(self._terms):
            acc = out[..., col]
            for idx, j, sign in terms:
                acc += sign * g[..., idx, j]
        return out


class _InteriorProduct(_Derived):
    def __init__(self, X: VectorField, theta: Form):
        if theta.degree < 1:
            raise DegreeError("interior product of a 0-form")
        if X.dim != theta.dim:
            raise FormArgumentError("field and form live on different charts")
        super().__init__(theta.dim, theta.degree - 1, f"i({X.name}){theta.name}")
        self.field = X
        self.theta = theta
        upper = {K: a for a, K in enumerate(theta.indices)}
        self._terms = []
        for I in self.indices:
            terms = []
            for j in range(self.dim):
                if j in I:
                    continue
                K = tuple(sorted(I + (j,)))
                terms.append((j, upper[K], -1.0 if K.index(j) % 2 else 1.0))
            self._terms.append(terms)

    @property
    def has_analytic_grad(self) -> bool:
        return self.theta.has_analytic_grad and self.field.has_analytic_jacobian

    @property
    def exact(self) -> bool:
        return self.theta.exact

    def _coeffs(self, t, x):
        c = self.theta.coefficients(t, x)
        v = self.field.value(t, x)
        out = np.zeros(x.shape[:-1] + (self.size,))
        for col, terms in enumerate(self._terms):
            acc = out[..., col]
            for j, k, sign in terms:
                acc += sign * v[..., j] * c[..., k]
        return out

    def gradient(self, t, x):
        if not self.has_analytic_grad:
            return super().gradient(t, x)
        x = _as_points(x, self.dim)
        c = self.theta.coefficients(t, x)
        g = self.theta.gradient(t, x)
        v = self.field.value(t, x)
        dv = self.field.jacobian(t, x)
        out = np.zeros(x.shape[:-1] + (self.size, self.dim))
        for col, terms in enumerate(self._terms):
            acc = out[..., col, :]
            for j, k, sign in terms:
                acc += sign * (dv[..., j, :] * c[..., k, None] + v[..., j, None] * g[..., k, :])
        return out


class _Sum(_Derived):
    def __init__(self, parts: Sequence[tuple[float, Form]], name: str):
        dims = {f.dim for _, f in parts}
        degrees = {f.degree for _, f in parts}
        if len(dims) != 1 or len(degrees) != 1:
            raise FormArgumentError("summands must share dimension and degree")
        super().__init__(dims.pop(), degrees.pop(), name)
        self.parts = list(parts)

    @property
    def has_analytic_grad(self) -> bool:
        return all(f.has_analytic_grad for _, f in self.parts)

    @property
    def exact(self) -> bool:
        return all(f.exact for _, f in self.parts)

    def _coeffs(self, t, x):
        out = np.zeros(x.shape[:-1] + (self.size,))
        for w, f in self.parts:
            out = out + w * f.coefficients(t, x)
        return out

    def gradient(self, t, x):
        # each part is differentiated at its own accuracy
        x = _as_points(x, self.dim)
        out = 0.0
        for w, f in self.parts:
            out = out + w * f.gradient(t, x)
        return np.broadcast_to(out, x.shape[:-1] + (self.size, self.dim))


class _ScalarProduct(_Derived):
    def __init__(self, f: Form, theta: Form, name: str):
        if f.degree != 0 or f.dim != theta.dim:
            raise FormArgumentError("left factor must be a 0-form on the same chart")
        super().__init__(theta.dim, theta.degree, name)
        self.scalar = f
        self.theta = theta

    @property
    def has_analytic_grad(self) -> bool:
        return self.scalar.has_analytic_grad and self.theta.has_analytic_grad

    @property
    def exact(self) -> bool:
        return self.scalar.exact and self.theta.exact

    def _coeffs(self, t, x):
        return self.scalar.coefficients(t, x)[..., :1] * self.theta.coefficients(t, x)

    def gradient(self, t, x):
        x = _as_points(x, self.dim)
        s = self.scalar.coefficients(t, x)[..., :1]
        c = self.theta.coefficients(t, x)
        gs = self.scalar.gradient(t, x)[..., :1, :]
        gc = self.theta.gradient(t, x)
        return c[..., :, None] * gs + s[..., :, None] * gc


def exterior_derivative(theta: Form) -> Form:
    """d(theta); raises DegreeError when theta already has top degree."""
    return _ExteriorDerivative(theta)


def interior_product(X: VectorField, theta: Form) -> Form:
    """i_X theta, the contraction in the first slot."""
    return _InteriorProduct(X, theta)


def form_sum(parts: Sequence[tuple[float, Form]], name: str = "sum") -> Form:
    return _Sum(parts, name)


def wedge_scalar(f: Form, theta: Form, name: Optional[str] = None) -> Form:
    """f * theta for a 0-form f."""
    return _ScalarProduct(f, theta, name or f"({f.name})*{theta.name}")


def lie_derivative(X: VectorField, theta: Form) -> Form:
    """L_X theta = i_X d theta + d i_X theta."""
    if X.dim != theta.dim:
        raise FormArgumentError("field and form live on different charts")
    parts = []
    if theta.degree < theta.dim:
        parts.append((1.0, interior_product(X, exterior_derivative(theta))))
    if theta.degree > 0:
        parts.append((1.0, exterior_derivative(interior_product(X, theta))))
    return form_sum(parts, name=f"L({X.name}){theta.name}")


def lie_derivative_squared(X: VectorField, theta: Form) -> Form:
    return lie_derivative(X, lie_derivative(X, theta))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _det2(a, b, c, d):
    return a * d - b * c


def _row_less(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    differ = r1 != r2
    first = np.argmax(differ, axis=-1)[..., None]
    a = np.take_along_axis(r1, first, axis=-1)[..., 0]
    b = np.take_along_axis(r2, first, axis=-1)[..., 0]
    return np.any(differ, axis=-1) & (a < b)


def _det3_alternating(m: np.ndarray) -> np.ndarray:
    """3x3 determinants that flip sign exactly under any row swap.

    Rows are put into lexicographic order by a three-comparator network before
    expanding, so permuted inputs share one floating-point evaluation.
    """
    rows = [m[..., 0, :], m[..., 1, :], m[..., 2, :]]
    sign = np.ones(m.shape[:-2])
    for i, j in ((0, 1), (1, 2), (0, 1)):
        swap = _row_less(rows[j], rows[i])
        ri = np.where(swap[..., None], rows[j], rows[i])
        rj = np.where(swap[..., None], rows[i], rows[j])
        rows[i], rows[j] = ri, rj
        sign = np.where(swap, -sign, sign)
    (a, b, c), (d, e, f), (g, h, k) = [[r[..., i] for i in range(3)] for r in rows]
    det = a * _det2(e, f, h, k) - b * _det2(d, f, g, k) + c * _det2(d, e, g, h)
    repeated = np.all(rows[0] == rows[1], axis=-1) | np.all(rows[1] == rows[2], axis=-1)
    return np.where(repeated, 0.0, sign * det)


def _det(m: np.ndarray) -> np.ndarray:
    p = m.shape[-1]
    if p == 1:
        return m[..., 0, 0]
    if p == 2:
        return _det2(m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1])
    if p == 3:
        return _det3_alternating(m)
    return np.linalg.det(m)


def _minors(vs: np.ndarray, n: int, p: int) -> np.ndarray:
    """det of vs restricted to the columns of each multi-index; shape (..., C)."""
    if p == 0:
        return np.ones(vs.shape[:-2] + (1,))
    return np.stack([_det(vs[..., :, list(I)]) for I in multi_indices(n, p)], axis=-1)


def evaluate_form(theta: Form, t: float, x, vs) -> np.ndarray:
    """theta(t, x)(v_1, ..., v_p).

    ``vs`` holds the p argument vectors as rows: shape ``(..., p, n)``.
    """
    x = _as_points(x, theta.dim)
    vs = np.asarray(vs, dtype=float)
    if theta.degree == 0:
        if vs.size and vs.shape[-2:] != (0, theta.dim):
            raise FormArgumentError("a 0-form takes no vectors")
        return theta.coefficients(t, x)[..., 0]
    if vs.ndim < 2 or vs.shape[-2] != theta.degree:
        raise FormArgumentError(f"{theta.name} has degree {theta.degree}, got vectors of shape {vs.shape}")
    if vs.shape[-1] != theta.dim:
        raise FormArgumentError(f"vectors have dimension {vs.shape[-1]}, chart has {theta.dim}")
    coeffs = theta.coefficients(t, x)
    minors = _minors(vs, theta.dim, theta.degree)
    out = coeffs[..., 0] * minors[..., 0]
    for i in range(1, coeffs.shape[-1]):
        out = out + coeffs[..., i] * minors[..., i]
    return out


def pullback_value(position, jacobian, theta: Form, t: float, vs) -> np.ndarray:
    """(phi^* theta)(v_1..v_p) at a base point, given phi(x) and D phi(x)."""
    position = _as_points(position, theta.dim)
    jacobian = np.asarray(jacobian, dtype=float)
    if jacobian.shape[-2:] != (theta.dim, theta.dim):
        raise FormArgumentError(f"jacobian shape {jacobian.shape} does not match chart dimension {theta.dim}")
    vs = np.asarray(vs, dtype=float)
    if theta.degree == 0:
        return evaluate_form(theta, t, position, vs)
    if vs.ndim < 2 or vs.shape[-1] != theta.dim:
        raise FormArgumentError(f"vectors of shape {vs.shape} do not live on a {theta.dim}-chart")
    pushed = np.einsum("...ij,...pj->...pi", jacobian, vs)
    return evaluate_form(theta, t, position, pushed)


# --------------------------------------------------------------------------
# divergence
# --------------------------------------------------------------------------


def _volume_coefficient(mu: Form, t: float, x) -> np.ndarray:
    if mu.degree != mu.dim or mu.size != 1:
        raise FormArgumentError("a volume form has top degree")
    m = mu.coefficients(t, x)[..., 0]
    if np.any(~(m > 0)):
        raise InvariantError(f"volume form {mu.name} is not positive at every sampled point")
    return m


def divergence(mu: Form, X: VectorField, t: float, x) -> np.ndarray:
    """div_mu(X) from L_X mu = div_mu(X) mu."""
    x = _as_points(x, mu.dim)
    m = _volume_coefficient(mu, t, x)
    lx = lie_derivative(X, mu).coefficients(t, x)[..., 0]
    out = lx / m
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite divergence of {X.name}")
    return out


class _Divergence(_Derived):
    def __init__(self, mu: Form, X: VectorField):
        super().__init__(mu.dim, 0, f"div({X.name})")
        self.mu = mu
        self.field = X
        self._lie = lie_derivative(X, mu)

    @property
    def exact(self) -> bool:
        return self._lie.exact

    def _coeffs(self, t, x):
        m = _volume_coefficient(self.mu, t, x)
        return (self._lie.coefficients(t, x)[..., 0] / m)[..., None]


def divergence_function(mu: Form, X: VectorField) -> Form:
    """div_mu(X) packaged as a 0-form, for use inside other forms."""
    return _Divergence(mu, X)
