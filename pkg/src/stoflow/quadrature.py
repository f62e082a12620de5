"""Simplices, simplex quadrature, and integrals of pulled-back forms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import roots_jacobi

from .forms import Form, FormArgumentError, pullback_value

__all__ = [
    "CapabilityError",
    "Simplex",
    "QuadratureRule",
    "standard_rule",
    "integrate_pulled_form",
    "chain_integrate",
    "identity_state",
    "monomial_integral",
]


class CapabilityError(ValueError):
    """Requested quadrature rule is not shipped."""


@dataclass(frozen=True)
class Simplex:
    vertices: np.ndarray

    def __init__(self, vertices):
        v = np.atleast_2d(np.asarray(vertices, dtype=float))
        object.__setattr__(self, "vertices", v)
        p, n = v.shape[0] - 1, v.shape[1]
        if p < 0 or p > n:
            raise FormArgumentError(f"{p + 1} vertices do not form a simplex in dimension {n}")
        if p and np.linalg.matrix_rank(self.edges) < p:
            raise FormArgumentError("degenerate simplex")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def degree(self) -> int:
        return self.vertices.shape[0] - 1

    @property
    def edges(self) -> np.ndarray:
        """Rows v_i - v_0, the images of the standard basis under the parametrization."""
        return self.vertices[1:] - self.vertices[0]

    def point(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.vertices[0] + u @ self.edges

    def nodes(self, rule: "QuadratureRule") -> np.ndarray:
        if rule.degree != self.degree:
            raise FormArgumentError(f"rule for {rule.degree}-simplices used on a {self.degree}-simplex")
        return self.point(rule.nodes)


@dataclass(frozen=True)
class QuadratureRule:
    degree: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, func) -> float:
        vals = np.asarray(func(self.nodes), dtype=float)
        return float(_weighted_sum(self.weights, vals))


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    # fixed order over the node axis (last)
    acc = weights[0] * values[..., 0]
    for q in range(1, len(weights)):
        acc = acc + weights[q] * values[..., q]
    return acc


def _gauss_jacobi01(count: int, alpha: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1] for the weight (1 - a)^alpha."""
    x, w = roots_jacobi(count, alpha, 0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def standard_rule(p: int, order: int) -> QuadratureRule:
    """Positive-weight rule on the standard p-simplex, exact to polynomial ``order``.

    Collapsed (conical) products of Gauss-Jacobi rules: the coordinate
    u_1 = a_1, u_2 = (1 - a_1) a_2, ... absorbs the Jacobian into Jacobi weights.
    For p = 1 this is plain Gauss-Legendre on [0, 1].
    """
    if p not in (1, 2, 3) or order not in range(1, 8):
        raise CapabilityError(f"no rule for p={p}, order={order} (p in 1..3, order in 1..7)")
    count = order // 2 + 1
    factors = [_gauss_jacobi01(count, p - 1 - i) for i in range(p)]
    grids = np.meshgrid(*[f[0] for f in factors], indexing="ij")
    wgrids = np.meshgrid(*[f[1] for f in factors], indexing="ij")
    a = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    u = np.empty_like(a)
    scale = np.ones(len(a))
    for i in range(p):
        u[:, i] = scale * a[:, i]
        scale = scale * (1.0 - a[:, i])
    return QuadratureRule(p, order, u, w)


def integrate_pulled_form(theta: Form, t: float, sigma: Simplex, positions, jacobians, rule: QuadratureRule) -> np.ndarray:
    """sum_q w_q theta(t, phi(x_q))(J_q e_1, ..., J_q e_p).

    ``positions`` (..., Q, n) and ``jacobians`` (..., Q, n, n) are the flow
    state at the rule's nodes on sigma; leading axes are kept.
    """
    positions = np.asarray(positions, dtype=float)
    jacobians = np.asarray(jacobians, dtype=float)
    Q = len(rule.weights)
    if positions.shape[-2:] != (Q, sigma.dim) or jacobians.shape[-3:] != (Q, sigma.dim, sigma.dim):
        raise FormArgumentError(f"flow state {positions.shape} does not match {Q} nodes in dimension {sigma.dim}")
    if theta.degree != sigma.degree:
        raise FormArgumentError(f"{theta.degree}-form integrated over a {sigma.degree}-simplex")
    vals = pullback_value(positions, jacobians, theta, t, sigma.edges)
    return _weighted_sum(rule.weights, vals)


def identity_state(sigma: Simplex, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    nodes = sigma.nodes(rule)
    return nodes, np.broadcast_to(np.eye(sigma.dim), (len(nodes), sigma.dim, sigma.dim))


def chain_integrate(theta: Form, t: float, chain: Sequence[tuple[Simplex, float]], flows: Sequence, rule_or_rules) -> float:
    """Signed sum over (simplex, sign) entries; ``flows[i]`` is (positions, jacobians)."""
    chain = list(chain)
    flows = list(flows)
    if len(flows) != len(chain):
        raise FormArgumentError("one flow state per chain entry is required")
    total = 0.0
    for i, ((sigma, sign), (pos, jac)) in enumerate(zip(chain, flows)):
        rule = rule_or_rules[i] if isinstance(rule_or_rules, (list, tuple)) else rule_or_rules
        total = total + sign * integrate_pulled_form(theta, t, sigma, pos, jac, rule)
    return total


def monomial_integral(powers: Sequence[int]) -> float:
    """Exact integral of prod u_i^a_i over the standard simplex: prod a_i! / (p + sum a)!."""
    p = len(powers)
    return math.prod(math.factorial(a) for a in powers) / math.factorial(p + sum(powers))
