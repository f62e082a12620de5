"""Residual checks for the Ito formula for forms and the transport identity.

Every verifier flows the quadrature nodes of a simplex along one or more noise
paths, evaluates the pulled-back integrals of the forms that appear in an
identity at each grid time, and compares the two sides with the discrete
integrals of :mod:`stoflow.calculus`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calculus import ito_integral, stratonovich_integral, time_integral
from .forms import (
    Form,
    FormArgumentError,
    divergence,
    divergence_function,
    form_sum,
    lie_derivative,
    lie_derivative_squared,
    scaled_field,
    wedge_scalar,
)
from .quadrature import QuadratureRule, Simplex, integrate_pulled_form
from .sde import BrownianEnsemble, BrownianPath, SdeSystem, as_batch, flow_states

__all__ = [
    "InsufficientEnsembleError",
    "ResidualReport",
    "CheckpointStat",
    "MartingaleReport",
    "DerivativeStat",
    "ExpectationReport",
    "ContinuityReport",
    "pulled_integral_paths",
    "stratonovich_identity_paths",
    "ito_identity_paths",
    "transport_identity_paths",
    "verify_ito_identity_stratonovich",
    "verify_ito_identity_ito",
    "martingale_check",
    "transport_residual",
    "expectation_derivative_check",
    "expectation_paths",
    "ito_drift_form",
    "transport_drift_density",
    "expanded_rhs_density",
    "generator_density",
    "continuity_residual",
    "discrete_fubini_gap",
]

MIN_ENSEMBLE = 100


class InsufficientEnsembleError(ValueError):
    pass


@dataclass
class ResidualReport:
    identity: str
    horizon: float
    steps: int
    max_abs_residual: float
    terminal_residual: float
    terms: dict[str, float]
    times: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    diagnostics: dict[str, float] = field(default_factory=dict)


@dataclass
class _IdentityRun:
    """Two sides of an identity for a batch of paths; arrays are (P, steps+1)."""

    identity: str
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    terms: dict[str, np.ndarray]
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs

    def report(self, i: int) -> ResidualReport:
        r = self.residual[i]
        return ResidualReport(
            identity=self.identity,
            horizon=float(self.times[-1]),
            steps=len(self.times) - 1,
            max_abs_residual=float(np.max(np.abs(r))),
            terminal_residual=float(r[-1]),
            terms={k: float(v[i, -1]) for k, v in self.terms.items()},
            times=self.times,
            residual=r,
            diagnostics={k: float(v[i]) for k, v in self.diagnostics.items()},
        )


def _reports(run: _IdentityRun, path):
    if isinstance(path, BrownianPath):
        return run.report(0)
    return [run.report(i) for i in range(len(run.lhs))]


# --------------------------------------------------------------------------
# pulled-back integrals along the flow
# --------------------------------------------------------------------------


def pulled_integral_paths(
    forms: Sequence[Form],
    system: SdeSystem,
    sigma: Simplex,
    path,
    rule: QuadratureRule,
    active: Optional[Sequence[Optional[np.ndarray]]] = None,
    keep_states: Sequence[int] = (),
):
    """t -> int_sigma phi_t^* theta for each form, on every path of a batch.

    Returns ``(times, values, extras)``: ``values`` has shape
    (len(forms), P, steps+1); entries where ``active[i]`` is False are NaN.
    ``extras`` carries the extreme Jacobian determinants per path and the
    flow positions at the grid indices listed in ``keep_states``.
    """
    if sigma.dim != system.dim:
        raise FormArgumentError(f"simplex in dimension {sigma.dim}, system in dimension {system.dim}")
    for f in forms:
        if f.degree != sigma.degree:
            raise FormArgumentError(f"{f.name} has degree {f.degree}, simplex has dimension {sigma.degree}")
    times, B = as_batch(path)
    P, S = B.shape[0], len(times) - 1
    active = list(active) if active is not None else [None] * len(forms)
    values = np.full((len(forms), P, S + 1), np.nan)
    det_min = np.full(P, np.inf)
    det_max = np.full(P, -np.inf)
    kept = {}
    keep = set(keep_states)
    nodes = sigma.nodes(rule)
    for j, t, x, J in flow_states(system, nodes, times, B):
        for i, f in enumerate(forms):
            if active[i] is None or active[i][j]:
                values[i, :, j] = integrate_pulled_form(f, t, sigma, x, J, rule)
        det = np.linalg.det(J) if system.dim > 3 else _small_det(J)
        det_min = np.minimum(det_min, det.min(axis=-1))
        det_max = np.maximum(det_max, det.max(axis=-1))
        if j in keep:
            kept[j] = x.copy()
    return times, values, {"det_min": det_min, "det_max": det_max, "states": kept}


def _small_det(J: np.ndarray) -> np.ndarray:
    n = J.shape[-1]
    if n == 1:
        return J[..., 0, 0]
    if n == 2:
        return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )


def _det_diagnostics(extras) -> dict[str, np.ndarray]:
    return {
        "det_min": extras["det_min"],
        "det_max": extras["det_max"],
        "max_abs_det_minus_one": np.maximum(np.abs(extras["det_min"] - 1.0), np.abs(extras["det_max"] - 1.0)),
    }


# --------------------------------------------------------------------------
# Ito formula for forms, Stratonovich and Ito shapes
# --------------------------------------------------------------------------


def stratonovich_identity_paths(theta: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule) -> _IdentityRun:
    lies = [lie_derivative(X, theta) for X in system.fields]
    forms = [theta, theta.time_derivative] + lies
    times, vals, extras = pulled_integral_paths(forms, system, sigma, path, rule)
    _, B = as_batch(path)
    lhs, dtheta, drift, noise = vals[0], vals[1], vals[2], vals[3:]
    terms = {
        "initial": np.broadcast_to(lhs[:, :1], lhs.shape),
        "time": time_integral(dtheta, times),
        "drift": time_integral(drift, times),
    }
    for k in range(system.m):
        terms[f"noise_{k + 1}"] = stratonovich_integral(noise[k], B[:, :, k])
    rhs = sum(terms.values())
    return _IdentityRun("ito_formula_stratonovich", times, lhs, rhs, terms, _det_diagnostics(extras))


def ito_drift_form(theta: Form, system: SdeSystem) -> Form:
    """(d/dt + 1/2 sum_k L_{X_k}^2 + L_{X_0}) theta."""
    parts = [(1.0, theta.time_derivative), (1.0, lie_derivative(system.drift, theta))]
    parts += [(0.5, lie_derivative_squared(X, theta)) for X in system.diffusions]
    return form_sum(parts, name=f"ito_drift({theta.name})")


def ito_identity_paths(theta: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule) -> _IdentityRun:
    forms = [theta, ito_drift_form(theta, system)] + [lie_derivative(X, theta) for X in system.diffusions]
    times, vals, extras = pulled_integral_paths(forms, system, sigma, path, rule)
    _, B = as_batch(path)
    lhs, drift, noise = vals[0], vals[1], vals[2:]
    terms = {
        "initial": np.broadcast_to(lhs[:, :1], lhs.shape),
        "drift": time_integral(drift, times),
    }
    for k in range(system.m):
        terms[f"noise_{k + 1}"] = ito_integral(noise[k], B[:, :, k])
    rhs = sum(terms.values())
    return _IdentityRun("ito_formula_ito", times, lhs, rhs, terms, _det_diagnostics(extras))


def verify_ito_identity_stratonovich(theta: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule):
    """Residual of the Stratonovich Ito formula for the pulled-back integral of theta.

    Returns one :class:`ResidualReport` for a path, a list for an ensemble.
    """
    return _reports(stratonovich_identity_paths(theta, system, sigma, path, rule), path)


def verify_ito_identity_ito(theta: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule):
    return _reports(ito_identity_paths(theta, system, sigma, path, rule), path)


# --------------------------------------------------------------------------
# martingale consequence
# --------------------------------------------------------------------------


@dataclass
class CheckpointStat:
    t: float
    mean: float
    stderr: float
    reference: float

    @property
    def deviation(self) -> float:
        return self.mean - self.reference

    @property
    def z(self) -> float:
        if self.stderr > 0:
            return abs(self.deviation) / self.stderr
        return 0.0 if abs(self.deviation) <= 1e-12 * max(1.0, abs(self.reference)) else math.inf


@dataclass
class MartingaleReport:
    n_paths: int
    reference: float
    checkpoints: list[CheckpointStat]

    def passes(self, bands: float = 3.0) -> bool:
        return all(c.z <= bands for c in self.checkpoints)


def _checkpoint_indices(times: np.ndarray, checkpoints: Sequence[float]) -> list[int]:
    dt = times[1] - times[0]
    out = []
    for c in checkpoints:
        j = int(round(c / dt))
        if not 0 <= j < len(times) or abs(times[j] - c) > 1e-9 * max(1.0, abs(c)):
            raise ValueError(f"checkpoint t={c} is not a grid time")
        out.append(j)
    return out


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = x.shape[0]
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def martingale_check(
    theta: Form,
    system: SdeSystem,
    sigma: Simplex,
    ensemble: BrownianEnsemble,
    rule: QuadratureRule,
    checkpoints: Optional[Sequence[float]] = None,
) -> MartingaleReport:
    """Ensemble mean of the pulled-back integral against its initial value.

    ``theta`` must solve the backward equation that makes the integral a
    martingale; the check reports the mean deviation in standard errors.
    """
    if len(ensemble) < MIN_ENSEMBLE:
        raise InsufficientEnsembleError(f"need at least {MIN_ENSEMBLE} paths, got {len(ensemble)}")
    T = ensemble.T
    checkpoints = [T / 4, T / 2, T] if checkpoints is None else list(checkpoints)
    idx = _checkpoint_indices(ensemble.times, checkpoints)
    active = np.zeros(ensemble.steps + 1, dtype=bool)
    active[[0] + idx] = True
    times, vals, _ = pulled_integral_paths([theta], system, sigma, ensemble, rule, active=[active])
    reference = float(vals[0, 0, 0])
    stats = []
    for c, j in zip(checkpoints, idx):
        mean, se = _mean_se(vals[0, :, j])
        stats.append(CheckpointStat(float(times[j]), mean, se, reference))
    return MartingaleReport(len(ensemble), reference, stats)


# --------------------------------------------------------------------------
# transport identity
# --------------------------------------------------------------------------


def _check_top_degree(f: Form, mu: Form, sigma: Simplex) -> None:
    if f.degree != 0:
        raise FormArgumentError("the transported density must be a 0-form")
    if mu.degree != mu.dim or sigma.degree != mu.dim:
        raise FormArgumentError("transport needs a volume form and a top-dimensional simplex")


def _div_density(mu: Form, f: Form, X) -> Form:
    """div_mu(f X) as a 0-form."""
    return divergence_function(mu, scaled_field(f, X))


def transport_identity_paths(f: Form, mu: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule) -> _IdentityRun:
    _check_top_degree(f, mu, sigma)
    forms = [wedge_scalar(f, mu), wedge_scalar(f.time_derivative, mu)]
    forms += [wedge_scalar(_div_density(mu, f, X), mu) for X in system.fields]
    times, vals, extras = pulled_integral_paths(forms, system, sigma, path, rule)
    _, B = as_batch(path)
    lhs, ft, div0, divk = vals[0], vals[1], vals[2], vals[3:]
    terms = {
        "initial": np.broadcast_to(lhs[:, :1], lhs.shape),
        "time": time_integral(ft, times),
        "drift": time_integral(div0, times),
    }
    for k in range(system.m):
        terms[f"noise_{k + 1}"] = stratonovich_integral(divk[k], B[:, :, k])
    rhs = sum(terms.values())
    diagnostics = _det_diagnostics(extras)
    diagnostics["max_abs_change"] = np.max(np.abs(lhs - lhs[:, :1]), axis=-1)
    return _IdentityRun("transport", times, lhs, rhs, terms, diagnostics)


def transport_residual(f: Form, mu: Form, system: SdeSystem, sigma: Simplex, path, rule: QuadratureRule):
    """Residual of the stochastic transport identity for f mu over phi_t(sigma)."""
    return _reports(transport_identity_paths(f, mu, system, sigma, path, rule), path)


def transport_drift_density(f: Form, mu: Form, system: SdeSystem) -> Form:
    """df/dt + div(f X0) + 1/2 sum_k div(div(f Xk) Xk), as a 0-form.

    This is the drift of the transported integral in Ito form, before the
    divergence identities are used to expand it.
    """
    parts = [(1.0, f.time_derivative), (1.0, _div_density(mu, f, system.drift))]
    for X in system.diffusions:
        parts.append((0.5, _div_density(mu, _div_density(mu, f, X), X)))
    return form_sum(parts, name="transport_drift")


def expanded_rhs_density(f: Form, mu: Form, system: SdeSystem, literal: bool = False) -> Form:
    """Three-term expansion of :func:`transport_drift_density`.

    ``f (div X0 + 1/2 sum (div Xk)^2) + 1/2 sum (c Xk(f) div Xk + Xk(f div Xk)) + L f``
    with ``L f = X0(f) + 1/2 sum Xk(Xk(f))``. The cross-term coefficient ``c``
    is 1; ``literal=True`` uses 2, which only agrees with the unexpanded
    drift for divergence-free noise fields.
    """
    c = 2.0 if literal else 1.0
    div0 = divergence_function(mu, system.drift)
    parts = [(1.0, f.time_derivative), (1.0, wedge_scalar(f, div0)), (1.0, lie_derivative(system.drift, f))]
    for X in system.diffusions:
        dk = divergence_function(mu, X)
        xf = lie_derivative(X, f)
        parts += [
            (0.5, wedge_scalar(f, wedge_scalar(dk, dk))),
            (0.5 * c, wedge_scalar(xf, dk)),
            (0.5, lie_derivative(X, wedge_scalar(f, dk))),
            (0.5, lie_derivative(X, xf)),
        ]
    return form_sum(parts, name="transport_drift_expanded")


def generator_density(f: Form, system: SdeSystem) -> Form:
    """df/dt + X0(f) + 1/2 sum_k Xk(Xk(f)), the divergence-free reduction."""
    parts = [(1.0, f.time_derivative), (1.0, lie_derivative(system.drift, f))]
    parts += [(0.5, lie_derivative_squared(X, f)) for X in system.diffusions]
    return form_sum(parts, name="generator")


@dataclass
class DerivativeStat:
    t: float
    window: float
    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    rhs_at_t: float
    diff_mean: float
    diff_stderr: float

    @property
    def z(self) -> float:
        if self.diff_stderr > 0:
            return abs(self.diff_mean) / self.diff_stderr
        return 0.0 if self.diff_mean == 0 else math.inf

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.lhs_mean), abs(self.rhs_mean))
        return abs(self.diff_mean) / scale if scale > 0 else 0.0

    def agrees(self, bands: float = 3.0, rel_tol: float = 1e-3) -> bool:
        """Within ``bands`` standard errors; deterministic ensembles use ``rel_tol``."""
        if self.diff_stderr > 0:
            return self.z <= bands
        return self.relative_gap <= rel_tol


@dataclass
class ExpectationReport:
    n_paths: int
    divergence_free: bool
    drift: list[DerivativeStat]
    generator: Optional[list[DerivativeStat]]
    notes: str = (
        "integrands are evaluated at the differentiation time; the finite-difference "
        "derivative over [t-h, t+h] is compared with the window average of the drift"
    )

    def passes(self, bands: float = 3.0, rel_tol: float = 1e-3) -> bool:
        stats = self.drift + (self.generator or [])
        return all(s.agrees(bands, rel_tol) for s in stats)


@dataclass
class _ExpectationRun:
    """Per-path pieces of the derivative comparison; arrays are (P, checkpoints)."""

    times: np.ndarray
    checkpoints: list[float]
    width: float
    lhs_derivative: np.ndarray
    drift_window: np.ndarray
    drift_at_t: np.ndarray
    generator_window: Optional[np.ndarray]
    generator_at_t: Optional[np.ndarray]
    divergence_free: bool

    def stats(self, which: str = "drift") -> list[DerivativeStat]:
        window = self.drift_window if which == "drift" else self.generator_window
        at_t = self.drift_at_t if which == "drift" else self.generator_at_t
        out = []
        for c in range(len(self.checkpoints)):
            lm, ls = _mean_se(self.lhs_derivative[:, c])
            rm, rs = _mean_se(window[:, c])
            dm, ds = _mean_se(self.lhs_derivative[:, c] - window[:, c])
            out.append(DerivativeStat(self.checkpoints[c], self.width, lm, ls, rm, rs, float(np.mean(at_t[:, c])), dm, ds))
        return out


def expectation_paths(
    f: Form,
    mu: Form,
    system: SdeSystem,
    sigma: Simplex,
    path,
    rule: QuadratureRule,
    checkpoints: Optional[Sequence[float]] = None,
    half_window: Optional[int] = None,
    divergence_free: Optional[bool] = None,
    divergence_tol: float = 1e-8,
) -> _ExpectationRun:
    _check_top_degree(f, mu, sigma)
    times, B = as_batch(path)
    T, S = float(times[-1]), len(times) - 1
    checkpoints = [T / 4, T / 2, 3 * T / 4] if checkpoints is None else list(checkpoints)
    half = max(1, S // 8) if half_window is None else int(half_window)
    idx = _checkpoint_indices(times, checkpoints)
    if any(j - half < 0 or j + half > S for j in idx):
        raise ValueError("derivative window leaves the time grid")
    window = np.zeros(S + 1, dtype=bool)
    edges = np.zeros(S + 1, dtype=bool)
    for j in idx:
        window[j - half : j + half + 1] = True
        edges[[j - half, j + half]] = True

    forms = [wedge_scalar(f, mu), wedge_scalar(transport_drift_density(f, mu, system), mu)]
    active = [edges, window]
    if divergence_free is not False:
        forms.append(wedge_scalar(generator_density(f, system), mu))
        active.append(window)
    times, vals, extras = pulled_integral_paths(forms, system, sigma, path, rule, active=active, keep_states=idx)
    if divergence_free is None:
        worst = 0.0
        for j, x in extras["states"].items():
            for X in system.fields:
                worst = max(worst, float(np.max(np.abs(divergence(mu, X, times[j], x)))))
        divergence_free = worst <= divergence_tol

    width = float(times[idx[0] + half] - times[idx[0] - half])
    lhs = vals[0]
    d_lhs = np.stack([(lhs[:, j + half] - lhs[:, j - half]) / (times[j + half] - times[j - half]) for j in idx], axis=-1)

    def averaged(rhs):
        cols = []
        for j in idx:
            lo, hi = j - half, j + half
            cols.append(time_integral(rhs[:, lo : hi + 1], times[lo : hi + 1])[:, -1] / (times[hi] - times[lo]))
        return np.stack(cols, axis=-1)

    gen_w = gen_t = None
    if divergence_free:
        gen_w = averaged(vals[2])
        gen_t = vals[2][:, idx]
    return _ExpectationRun(
        times, [float(times[j]) for j in idx], width, d_lhs, averaged(vals[1]), vals[1][:, idx], gen_w, gen_t, bool(divergence_free)
    )


def expectation_derivative_check(
    f: Form,
    mu: Form,
    system: SdeSystem,
    sigma: Simplex,
    ensemble: BrownianEnsemble,
    rule: QuadratureRule,
    checkpoints: Optional[Sequence[float]] = None,
    half_window: Optional[int] = None,
    divergence_free: Optional[bool] = None,
    divergence_tol: float = 1e-8,
) -> ExpectationReport:
    """Time derivative of E int_{phi_t(sigma)} f_t mu against its drift.

    The ensemble-mean derivative is taken as a central difference over
    ``half_window`` grid steps on each side of every checkpoint. The drift is
    integrated over the same window, so the comparison carries no
    finite-difference bias. When all fields are divergence free, the generator
    form of the drift is checked too.
    """
    if len(ensemble) < MIN_ENSEMBLE:
        raise InsufficientEnsembleError(f"need at least {MIN_ENSEMBLE} paths, got {len(ensemble)}")
    run = expectation_paths(f, mu, system, sigma, ensemble, rule, checkpoints, half_window, divergence_free, divergence_tol)
    generator = run.stats("generator") if run.divergence_free else None
    return ExpectationReport(len(ensemble), run.divergence_free, run.stats("drift"), generator)


# --------------------------------------------------------------------------
# continuity system
# --------------------------------------------------------------------------


@dataclass
class ContinuityReport:
    drift_residual: float
    noise_residuals: list[float]

    @property
    def max_residual(self) -> float:
        return max([self.drift_residual] + self.noise_residuals)

    def solves(self, tol: float = 1e-10) -> bool:
        return self.max_residual <= tol


def continuity_residual(rho: Form, system: SdeSystem, mu: Form, grid, times: Sequence[float]) -> ContinuityReport:
    """Max over grid x times of |drho/dt + div(rho X0)| and of each |div(rho Xk)|."""
    if rho.degree != 0:
        raise FormArgumentError("density must be a 0-form")
    grid = np.asarray(grid, dtype=float)
    drift = _div_density(mu, rho, system.drift)
    noise = [_div_density(mu, rho, X) for X in system.diffusions]
    r0 = 0.0
    rk = [0.0] * len(noise)
    for t in times:
        res = rho.time_derivative.coefficients(t, grid)[..., 0] + drift.coefficients(t, grid)[..., 0]
        r0 = max(r0, float(np.max(np.abs(res))))
        for k, g in enumerate(noise):
            rk[k] = max(rk[k], float(np.max(np.abs(g.coefficients(t, grid)[..., 0]))))
    return ContinuityReport(r0, rk)


# --------------------------------------------------------------------------
# discrete Fubini
# --------------------------------------------------------------------------


def discrete_fubini_gap(weights, node_paths, B) -> float:
    """|sum_q w_q S(Y_q) - S(sum_q w_q Y_q)| at the horizon, S the Stratonovich sum.

    ``node_paths`` is (Q, steps+1); ``B`` is one driver column (steps+1,).
    """
    weights = np.asarray(weights, dtype=float)
    Y = np.asarray(node_paths, dtype=float)
    per_node = stratonovich_integral(Y, B)[..., -1]
    outer = float(np.dot(weights, per_node))
    inner = float(stratonovich_integral(weights @ Y, B)[-1])
    return abs(outer - inner)
