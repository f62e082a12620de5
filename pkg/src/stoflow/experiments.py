"""Config-driven experiment runner.

A run is split into cells of (refinement level, chunk of path indices). The
chunk layout depends only on the config, never on the worker count, and every
cell rebuilds its inputs from the config, so output bytes are a function of
the config alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .corpus import CorpusError, build_field, build_form
from .forms import Form, pullback_value, lie_derivative, volume_form
from .quadrature import CapabilityError, Simplex, standard_rule
from .sde import BlowUpError, SdeSystem, flow_states, sample_brownian, sample_ensemble, path_seed
from .torus import density_constancy_experiment, torus_grid
from .verify import (
    MIN_ENSEMBLE,
    _checkpoint_indices,
    continuity_residual,
    discrete_fubini_gap,
    expectation_paths,
    ito_identity_paths,
    pulled_integral_paths,
    stratonovich_identity_paths,
    transport_identity_paths,
)

__all__ = [
    "ConfigError",
    "InsufficientDataError",
    "ExperimentConfig",
    "ResultRow",
    "RunResult",
    "EXPERIMENTS",
    "load_config",
    "run",
    "estimate_order",
    "write_results",
    "read_rows",
    "CSV_HEADER",
]

CSV_HEADER = ["experiment", "level", "path", "t", "value", "stderr", "wall_ms"]
CHUNK = 1024

EXPERIMENTS = {
    "stratonovich_identity": 5e-3,
    "ito_identity": 1e-2,
    "ito_equivalence": 1e-2,
    "martingale": 3.0,
    "transport": 5e-3,
    "expectation_derivative": 3.0,
    "continuity": 1e-10,
    "density_constancy": 1e-10,
    "fubini": 1e-12,
}

_KEYS = {
    "experiment",
    "system",
    "simplex",
    "form",
    "horizon",
    "steps",
    "paths",
    "levels",
    "seed",
    "quadrature_order",
    "output",
    "tolerance",
    "options",
}

_OPTIONS = {
    "stratonovich_identity": {"metric", "min_order", "checkpoints"},
    "ito_identity": {"metric", "min_order", "checkpoints"},
    "transport": {"metric", "min_order", "det_tol", "checkpoints"},
    "ito_equivalence": set(),
    "martingale": {"checkpoints"},
    "expectation_derivative": {"checkpoints", "half_window", "rel_tol"},
    "continuity": {"grid", "times", "expect"},
    "density_constancy": {"grid", "k", "expect", "steps"},
    "fubini": {"cases"},
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    system: dict
    form: dict
    horizon: float
    steps: int
    simplex: Optional[dict] = None
    paths: int = 1
    levels: int = 1
    seed: int = 0
    quadrature_order: int = 5
    output: str = "results.csv"
    tolerance: Optional[float] = None
    options: dict = field(default_factory=dict)

    @property
    def threshold(self) -> float:
        return EXPERIMENTS[self.experiment] if self.tolerance is None else float(self.tolerance)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    level: int
    path: Any  # int or "mean"
    t: float
    value: float
    stderr: Optional[float] = None
    wall_ms: Optional[float] = None

    def cells(self) -> list[str]:
        return [
            self.experiment,
            str(self.level),
            str(self.path),
            _fmt(self.t),
            _fmt(self.value),
            "" if self.stderr is None else _fmt(self.stderr),
            "" if self.wall_ms is None else f"{self.wall_ms:.3f}",
        ]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[ResultRow]
    passed: bool
    max_residual: float
    order_estimate: Optional[float]
    error: Optional[str] = None

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def summary(self) -> dict:
        out = {
            "experiment": self.config.experiment,
            "pass": self.passed,
            "max_residual": _json_float(self.max_residual),
            "order_estimate": _json_float(self.order_estimate),
            "seed": self.config.seed,
        }
        if self.error:
            out["error"] = self.error
        return out


def _json_float(x):
    if x is None or not math.isfinite(x):
        return None
    return float(x)


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------


def _positive(cfg: dict, key: str, kind):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v) or not v > 0:
        raise ConfigError(key, f"expected a positive {kind.__name__}, got {v!r}")
    return kind(v)


def load_config(source, seed: Optional[int] = None) -> ExperimentConfig:
    """Parse and validate a config from a path, JSON text, or dict.

    Seed precedence: ``seed`` argument, then ``STOFLOW_SEED``, then the file.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        text = Path(source).read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    unknown = sorted(set(raw) - _KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    for key in ("experiment", "system", "form", "horizon", "steps"):
        if key not in raw:
            raise ConfigError(key, "missing")
    if raw["experiment"] not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {raw['experiment']!r}; choose from {sorted(EXPERIMENTS)}")

    env = os.environ.get("STOFLOW_SEED")
    if seed is not None:
        raw["seed"] = seed
    elif env is not None:
        try:
            raw["seed"] = int(env)
        except ValueError:
            raise ConfigError("STOFLOW_SEED", f"not an integer: {env!r}") from None
    s = raw.get("seed", 0)
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("seed", "expected an unsigned 64-bit integer")

    cfg = ExperimentConfig(
        experiment=raw["experiment"],
        system=raw["system"],
        form=raw["form"],
        horizon=_positive(raw, "horizon", float),
        steps=_positive(raw, "steps", int),
        simplex=raw.get("simplex"),
        paths=_positive(raw, "paths", int) if "paths" in raw else 1,
        levels=_positive(raw, "levels", int) if "levels" in raw else 1,
        seed=int(s),
        quadrature_order=_positive(raw, "quadrature_order", int) if "quadrature_order" in raw else 5,
        output=str(raw.get("output", "results.csv")),
        tolerance=_positive(raw, "tolerance", float) if "tolerance" in raw else None,
        options=dict(raw.get("options") or {}),
    )
    bad = sorted(set(cfg.options) - _OPTIONS[cfg.experiment])
    if bad:
        raise ConfigError(f"options.{bad[0]}", f"not an option of {cfg.experiment}")
    # resolve every name once so errors surface before any work
    _Inputs.build(cfg)
    return cfg


@dataclass
class _Inputs:
    system: SdeSystem
    form: Form
    simplex: Optional[Simplex]
    rule: Any

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "_Inputs":
        sysd = cfg.system
        if not isinstance(sysd, dict):
            raise ConfigError("system", "expected an object")
        extra = sorted(set(sysd) - {"dim", "drift", "diffusions"})
        if extra:
            raise ConfigError(f"system.{extra[0]}", "unknown key")
        dim = sysd.get("dim")
        if not isinstance(dim, int) or dim < 1:
            raise ConfigError("system.dim", "expected a positive integer")
        try:
            drift = build_field(sysd.get("drift", {"name": "zero"}), dim, "system.drift")
            diffusions = [build_field(s, dim, f"system.diffusions[{i}]") for i, s in enumerate(sysd.get("diffusions", []))]
            form = build_form(cfg.form, dim, "form")
        except CorpusError as exc:
            raise ConfigError(exc.key, str(exc.args[0])) from None
        system = SdeSystem(drift, diffusions)
        simplex = rule = None
        if cfg.simplex is not None:
            if not isinstance(cfg.simplex, dict) or set(cfg.simplex) != {"vertices"}:
                raise ConfigError("simplex", "expected {\"vertices\": [...]}")
            try:
                simplex = Simplex(cfg.simplex["vertices"])
            except ValueError as exc:
                raise ConfigError("simplex.vertices", str(exc)) from None
            if simplex.dim != dim:
                raise ConfigError("simplex.vertices", f"vertices live in dimension {simplex.dim}, system in {dim}")
            try:
                rule = standard_rule(simplex.degree, cfg.quadrature_order)
            except CapabilityError as exc:
                raise ConfigError("quadrature_order", str(exc)) from None
        elif cfg.experiment not in ("continuity", "density_constancy"):
            raise ConfigError("simplex", "missing")
        return cls(system, form, simplex, rule)


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------


def _ensemble(cfg: ExperimentConfig, m: int, level: int, start: int, count: int):
    ens = sample_ensemble(m, cfg.horizon, cfg.steps, count, cfg.seed, start=start)
    for _ in range(level):
        ens = ens.refine()
    return ens


def _checkpoints(cfg: ExperimentConfig, default: Sequence[float]) -> list[float]:
    return [float(c) for c in cfg.options.get("checkpoints", default)]


def _grid_indices(times: np.ndarray, checkpoints: Sequence[float]) -> list[int]:
    try:
        return _checkpoint_indices(times, checkpoints)
    except ValueError as exc:
        raise ConfigError("options.checkpoints", str(exc)) from None


def _identity_cell(cfg: ExperimentConfig, level: int, start: int, count: int) -> dict:
    inp = _Inputs.build(cfg)
    ens = _ensemble(cfg, inp.system.m, level, start, count)
    T = cfg.horizon
    if cfg.experiment == "transport":
        run = transport_identity_paths(volume_density(inp.form), volume_form(inp.system.dim), inp.system, inp.simplex, ens, inp.rule)
    elif cfg.experiment == "ito_identity":
        run = ito_identity_paths(inp.form, inp.system, inp.simplex, ens, inp.rule)
    else:
        run = stratonovich_identity_paths(inp.form, inp.system, inp.simplex, ens, inp.rule)
    idx = _grid_indices(run.times, _checkpoints(cfg, [T]))
    res = run.residual
    return {
        "times": np.array([run.times[j] for j in idx]),
        "residual": np.abs(res[:, idx]),
        "max": np.max(np.abs(res), axis=-1),
        "det": run.diagnostics["max_abs_det_minus_one"],
    }


def volume_density(form: Form) -> Form:
    if form.degree != 0:
        raise ConfigError("form", "transport experiments take a density (0-form)")
    return form


def _equivalence_cell(cfg: ExperimentConfig, level: int, start: int, count: int) -> dict:
    inp = _Inputs.build(cfg)
    ens = _ensemble(cfg, inp.system.m, level, start, count)
    s = stratonovich_identity_paths(inp.form, inp.system, inp.simplex, ens, inp.rule)
    i = ito_identity_paths(inp.form, inp.system, inp.simplex, ens, inp.rule)
    gap = np.abs(s.rhs - i.rhs)
    return {"times": np.array([cfg.horizon]), "gap": np.max(gap, axis=-1)[:, None]}


def _martingale_cell(cfg: ExperimentConfig, level: int, start: int, count: int) -> dict:
    inp = _Inputs.build(cfg)
    ens = _ensemble(cfg, inp.system.m, level, start, count)
    T = cfg.horizon
    cps = _checkpoints(cfg, [T / 4, T / 2, T])
    idx = _grid_indices(ens.times, cps)
    active = np.zeros(ens.steps + 1, dtype=bool)
    active[[0] + idx] = True
    times, vals, _ = pulled_integral_paths([inp.form], inp.system, inp.simplex, ens, inp.rule, active=[active])
    return {"times": np.array([times[j] for j in idx]), "deviation": vals[0][:, idx] - vals[0][:, :1]}


def _expectation_cell(cfg: ExperimentConfig, level: int, start: int, count: int) -> dict:
    inp = _Inputs.build(cfg)
    ens = _ensemble(cfg, inp.system.m, level, start, count)
    T = cfg.horizon
    run = expectation_paths(
        volume_density(inp.form),
        volume_form(inp.system.dim),
        inp.system,
        inp.simplex,
        ens,
        inp.rule,
        checkpoints=_checkpoints(cfg, [T / 4, T / 2, 3 * T / 4]),
        half_window=cfg.options.get("half_window"),
    )
    out = {
        "times": np.array(run.checkpoints),
        "lhs": run.lhs_derivative,
        "drift": run.drift_window,
        "divergence_free": np.full(len(ens), run.divergence_free),
    }
    if run.divergence_free:
        out["generator"] = run.generator_window
    return out


_CELLS = {
    "stratonovich_identity": _identity_cell,
    "ito_identity": _identity_cell,
    "transport": _identity_cell,
    "ito_equivalence": _equivalence_cell,
    "martingale": _martingale_cell,
    "expectation_derivative": _expectation_cell,
}


def _run_cell(args) -> dict:
    cfg_dict, level, start, count = args
    cfg = ExperimentConfig(**cfg_dict)
    try:
        return _CELLS[cfg.experiment](cfg, level, start, count)
    except BlowUpError as exc:
        return {"error": f"level {level}, paths {start}..{start + count - 1}: {exc}"}


def _merge(parts: list[dict]) -> dict:
    out = {"times": parts[0]["times"]}
    for key in parts[0]:
        if key != "times":
            if any(key not in p for p in parts):
                continue
            out[key] = np.concatenate([p[key] for p in parts], axis=0)
    return out


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


def _mean_se(x: np.ndarray) -> tuple[float, Optional[float]]:
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else None
    return mean, se


def _path_rows(name, level, times, values, stderr_rows=True):
    rows = []
    P = values.shape[0]
    for i in range(P):
        for c, t in enumerate(times):
            rows.append(ResultRow(name, level, i, t, values[i, c]))
    if P > 1 and stderr_rows:
        for c, t in enumerate(times):
            m, se = _mean_se(values[:, c])
            rows.append(ResultRow(name, level, "mean", t, m, se))
    return rows


def _z(mean: float, se: Optional[float]) -> float:
    if se:
        return abs(mean) / se
    return 0.0 if abs(mean) <= 1e-12 else math.inf


def _summarize_identity(cfg, per_level):
    rows = []
    name = cfg.experiment
    metric = cfg.options.get("metric", "terminal")
    if metric not in ("terminal", "max"):
        raise ConfigError("options.metric", "expected 'terminal' or 'max'")
    medians = []
    for level, data in enumerate(per_level):
        rows += _path_rows(name, level, data["times"], data["residual"])
        if metric == "max":
            rows += _path_rows(f"{name}/max", level, [cfg.horizon], data["max"][:, None], stderr_rows=False)
        if name == "transport":
            rows += _path_rows(f"{name}/det", level, [cfg.horizon], data["det"][:, None], stderr_rows=False)
        values = data["residual"][:, -1] if metric == "terminal" else data["max"]
        medians.append(float(np.median(values)))
    final = per_level[-1]
    worst = float(np.max(final["residual"][:, -1] if metric == "terminal" else final["max"]))
    passed = worst <= cfg.threshold
    order = None
    if cfg.levels >= 3:
        order = _order_from_medians(medians)
        if "min_order" in cfg.options:
            passed = passed and order is not None and order >= float(cfg.options["min_order"])
    if name == "transport" and "det_tol" in cfg.options:
        passed = passed and float(np.max(final["det"])) <= float(cfg.options["det_tol"])
    return rows, passed, worst, order


def _summarize_equivalence(cfg, per_level):
    rows = []
    for level, data in enumerate(per_level):
        rows += _path_rows(cfg.experiment, level, data["times"], data["gap"])
    worst = float(np.max(per_level[-1]["gap"]))
    return rows, worst <= cfg.threshold, worst, None


def _summarize_martingale(cfg, per_level):
    rows = []
    worst = 0.0
    for level, data in enumerate(per_level):
        rows += _path_rows(cfg.experiment, level, data["times"], data["deviation"])
        if level == len(per_level) - 1:
            for c in range(len(data["times"])):
                worst = max(worst, _z(*_mean_se(data["deviation"][:, c])))
    return rows, worst <= cfg.threshold, worst, None


def _summarize_expectation(cfg, per_level):
    rows = []
    rel_tol = float(cfg.options.get("rel_tol", 1e-3))
    worst_ok = True
    worst = 0.0
    for level, data in enumerate(per_level):
        times = data["times"]
        for c, t in enumerate(times):
            rows.append(ResultRow(f"{cfg.experiment}/lhs", level, "mean", t, *_mean_se(data["lhs"][:, c])))
        series = [("drift", cfg.experiment)]
        if "generator" in data and bool(np.all(data["divergence_free"])):
            series.append(("generator", f"{cfg.experiment}/generator"))
        for key, name in series:
            diff = data["lhs"] - data[key]
            rows += _path_rows(name, level, times, diff)
            if level != len(per_level) - 1:
                continue
            for c in range(len(times)):
                m, se = _mean_se(diff[:, c])
                if se:
                    z = abs(m) / se
                    worst = max(worst, z)
                    worst_ok = worst_ok and z <= cfg.threshold
                else:
                    scale = max(abs(float(np.mean(data["lhs"][:, c]))), abs(float(np.mean(data[key][:, c]))))
                    gap = abs(m) / scale if scale else 0.0
                    worst_ok = worst_ok and gap <= rel_tol
    return rows, worst_ok, worst, None


_SUMMARIES = {
    "stratonovich_identity": _summarize_identity,
    "ito_identity": _summarize_identity,
    "transport": _summarize_identity,
    "ito_equivalence": _summarize_equivalence,
    "martingale": _summarize_martingale,
    "expectation_derivative": _summarize_expectation,
}


def _order_from_medians(medians: Sequence[float]) -> Optional[float]:
    med = np.asarray(medians, dtype=float)
    if np.any(med <= 0):
        return None
    # dt halves per level
    log_dt = -np.arange(len(med)) * math.log(2.0)
    slope = np.polyfit(log_dt, np.log(med), 1)[0]
    return float(slope)


# --------------------------------------------------------------------------
# grid experiments (no noise paths)
# --------------------------------------------------------------------------


def _run_continuity(cfg: ExperimentConfig):
    inp = _Inputs.build(cfg)
    if inp.form.degree != 0:
        raise ConfigError("form", "continuity needs a density (0-form)")
    n = int(cfg.options.get("grid", 32))
    dim = inp.system.dim
    grid = torus_grid(n) if dim == 2 else np.linspace(-2.0, 2.0, n)[:, None] if dim == 1 else None
    if grid is None:
        raise ConfigError("system.dim", "continuity grids exist for dimensions 1 and 2")
    times = [float(t) for t in cfg.options.get("times", [0.0, cfg.horizon / 2, cfg.horizon])]
    rep = continuity_residual(inp.form, inp.system, volume_form(dim), grid, times)
    rows = [ResultRow("continuity/drift", 0, "mean", times[-1], rep.drift_residual)]
    rows += [ResultRow(f"continuity/noise_{k + 1}", 0, "mean", times[-1], r) for k, r in enumerate(rep.noise_residuals)]
    expect = cfg.options.get("expect", "solve")
    if expect not in ("solve", "reject"):
        raise ConfigError("options.expect", "expected 'solve' or 'reject'")
    passed = rep.max_residual <= cfg.threshold if expect == "solve" else rep.max_residual > cfg.threshold
    return rows, passed, rep.max_residual, None


def _run_constancy(cfg: ExperimentConfig):
    inp = _Inputs.build(cfg)
    if inp.system.dim != 2:
        raise ConfigError("system.dim", "the constancy experiment lives on the 2-torus")
    if "k" not in cfg.options:
        raise ConfigError("options.k", "missing Fourier mode")
    grid = torus_grid(int(cfg.options.get("grid", 64)))
    rep = density_constancy_experiment(
        tuple(cfg.options["k"]), inp.form, inp.system.drift, grid, cfg.horizon, int(cfg.options.get("steps", cfg.steps)), cfg.threshold
    )
    rows = [ResultRow(f"density_constancy/{name}", 0, "mean", 0.0, v) for name, v in rep.constraint_max.items()]
    rows.append(ResultRow("density_constancy/gradient", 0, "mean", 0.0, rep.gradient_max))
    if rep.max_deviation is not None:
        rows.append(ResultRow("density_constancy/deviation", 0, "mean", cfg.horizon, rep.max_deviation))
    expect = cfg.options.get("expect", "constant")
    if expect not in ("constant", "reject"):
        raise ConfigError("options.expect", "expected 'constant' or 'reject'")
    passed = rep.certified if expect == "constant" else rep.rejected
    worst = max(rep.constraint_max.values())
    return rows, passed, worst, None


def _run_fubini(cfg: ExperimentConfig):
    """Quadrature sum of node-wise Stratonovich sums vs. Stratonovich sum of the quadrature."""
    inp = _Inputs.build(cfg)
    system, theta, base = inp.system, inp.form, inp.simplex
    if system.m == 0:
        raise ConfigError("system.diffusions", "the Fubini check needs at least one noise field")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0xF0B1])))
    rows = []
    worst = 0.0
    for case in range(int(cfg.options.get("cases", 10))):
        verts = base.vertices + rng.uniform(-0.5, 0.5, size=base.vertices.shape)
        sigma = Simplex(verts)
        rule = inp.rule
        path = sample_brownian(system.m, cfg.horizon, cfg.steps, path_seed(cfg.seed, case))
        k = case % system.m
        lie = lie_derivative(system.diffusions[k], theta)
        Y = np.empty((len(rule.weights), cfg.steps + 1))
        for j, t, x, J in flow_states(system, sigma.nodes(rule), path.times, path.values[None]):
            Y[:, j] = pullback_value(x[0], J[0], lie, t, sigma.edges)
        gap = discrete_fubini_gap(rule.weights, Y, path.values[:, k])
        worst = max(worst, gap)
        rows.append(ResultRow("fubini", 0, case, cfg.horizon, gap))
    return rows, worst <= cfg.threshold, worst, None


_DIRECT = {"continuity": _run_continuity, "density_constancy": _run_constancy, "fubini": _run_fubini}


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def run(config, workers: int = 1, timing: bool = False) -> RunResult:
    """Execute an experiment; rows are identical for any worker count."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    t0 = time.perf_counter()
    error = None
    if cfg.experiment in _DIRECT:
        try:
            rows, passed, worst, order = _DIRECT[cfg.experiment](cfg)
        except BlowUpError as exc:
            rows, passed, worst, order, error = [], False, math.inf, None, str(exc)
    else:
        if cfg.experiment in ("martingale", "expectation_derivative") and cfg.paths < MIN_ENSEMBLE:
            raise ConfigError("paths", f"{cfg.experiment} needs at least {MIN_ENSEMBLE} paths")
        cells = [
            (cfg.to_dict(), level, start, min(CHUNK, cfg.paths - start))
            for level in range(cfg.levels)
            for start in range(0, cfg.paths, CHUNK)
        ]
        if workers > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_run_cell, cells))
        else:
            parts = [_run_cell(c) for c in cells]
        per_level = []
        per = math.ceil(cfg.paths / CHUNK)
        for level in range(cfg.levels):
            chunk = parts[level * per : (level + 1) * per]
            failed = [p["error"] for p in chunk if "error" in p]
            if failed:
                error = failed[0]
                break
            per_level.append(_merge(chunk))
        if per_level:
            rows, passed, worst, order = _SUMMARIES[cfg.experiment](cfg, per_level)
        else:
            rows, passed, worst, order = [], False, math.inf, None
        if error is not None:
            passed, order = False, None
    if timing:
        wall = (time.perf_counter() - t0) * 1e3
        rows = [ResultRow(r.experiment, r.level, r.path, r.t, r.value, r.stderr, wall) for r in rows]
    return RunResult(cfg, rows, bool(passed), float(worst), order, error)


def estimate_order(rows: Sequence[ResultRow], experiment: Optional[str] = None) -> dict[str, float]:
    """Least-squares slope of log(median residual) against log(dt) per experiment.

    Uses per-path rows at the last checkpoint of each level; the step halves
    from one level to the next.
    """
    groups: dict[str, dict[int, list[tuple[float, float]]]] = {}
    for r in rows:
        if r.path == "mean" or (experiment is not None and r.experiment != experiment):
            continue
        groups.setdefault(r.experiment, {}).setdefault(int(r.level), []).append((float(r.t), float(r.value)))
    out = {}
    for name, levels in groups.items():
        if len(levels) < 3:
            raise InsufficientDataError(f"{name}: order estimation needs at least 3 levels, got {len(levels)}")
        medians = []
        for level in sorted(levels):
            entries = levels[level]
            tmax = max(t for t, _ in entries)
            medians.append(float(np.median([v for t, v in entries if t == tmax])))
        order = _order_from_medians(medians)
        out[name] = math.nan if order is None else order
    if not out:
        raise InsufficientDataError("no per-path rows to estimate an order from")
    return out


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.cells())
    return buf.getvalue()


def write_results(result: RunResult, out: Optional[str] = None) -> tuple[Path, Path]:
    csv_path = Path(out or result.config.output)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_bytes(rows_to_csv(result.rows).encode("utf-8"))
    json_path = csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_rows(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        for exp, level, p, t, value, se, wall in reader:
            rows.append(
                ResultRow(
                    exp,
                    int(level),
                    p if p == "mean" else int(p),
                    float(t),
                    float(value),
                    float(se) if se else None,
                    float(wall) if wall else None,
                )
            )
    return rows
