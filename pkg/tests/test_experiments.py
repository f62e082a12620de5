import json
import math

import numpy as np
import pytest

from stoflow.cli import main
from stoflow.experiments import (
    CSV_HEADER,
    ConfigError,
    InsufficientDataError,
    ResultRow,
    estimate_order,
    load_config,
    read_rows,
    rows_to_csv,
    run,
    write_results,
)

TRIVIAL = {
    "experiment": "ito_identity",
    "system": {"dim": 2, "drift": {"name": "zero"}, "diffusions": []},
    "simplex": {"vertices": [[0.0, 0.0], [1.0, 0.0]]},
    "form": {"name": "form.sin_dtheta1"},
    "horizon": 1.0,
    "steps": 16,
    "paths": 1,
    "levels": 1,
    "seed": 0,
}

TORUS_TRANSPORT = {
    "experiment": "transport",
    "system": {"dim": 2, "drift": {"name": "zero"}, "diffusions": [{"name": "torus.A", "k": [1, 0]}, {"name": "torus.B", "k": [1, 1]}]},
    "simplex": {"vertices": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]},
    "form": {"name": "density.sin_sum"},
    "horizon": 1.0,
    "steps": 64,
    "paths": 8,
    "levels": 4,
    "seed": 3,
    "quadrature_order": 3,
    "tolerance": 0.05,
}


def _with(base, **changes):
    cfg = json.loads(json.dumps(base))
    cfg.update(changes)
    return cfg


def test_trivial_config_single_row():
    res = run(load_config(TRIVIAL))
    assert res.passed and res.exit_status == 0
    assert len(res.rows) == 1
    row = res.rows[0]
    assert (row.experiment, row.level, row.path, row.t, row.value) == ("ito_identity", 0, 0, 1.0, 0.0)


@pytest.mark.parametrize(
    "change,key",
    [
        ({"colour": "red"}, "colour"),
        ({"form": {"name": "form.nope"}}, "form.name"),
        ({"system": {"dim": 2, "drift": {"name": "torus.Q"}}}, "system.drift.name"),
        ({"system": {"dim": 2, "diffusions": [{"name": "torus.A", "k": [1, 0], "phase": 1}]}}, "system.diffusions[0].phase"),
        ({"steps": 0}, "steps"),
        ({"horizon": -1.0}, "horizon"),
        ({"experiment": "magic"}, "experiment"),
        ({"quadrature_order": 9}, "quadrature_order"),
        ({"options": {"bogus": 1}}, "options.bogus"),
        ({"simplex": {"vertices": [[0.0], [1.0]]}}, "simplex.vertices"),
    ],
)
def test_config_errors_name_the_key(change, key):
    with pytest.raises(ConfigError) as info:
        load_config(_with(TRIVIAL, **change))
    assert info.value.key == key


def test_missing_key():
    cfg = dict(TRIVIAL)
    del cfg["horizon"]
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert info.value.key == "horizon"


def test_seed_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(_with(TRIVIAL, seed=5)))
    monkeypatch.delenv("STOFLOW_SEED", raising=False)
    assert load_config(path).seed == 5
    monkeypatch.setenv("STOFLOW_SEED", "17")
    assert load_config(path).seed == 17
    assert load_config(path, seed=99).seed == 99


def test_rows_are_deterministic():
    a = rows_to_csv(run(load_config(TORUS_TRANSPORT)).rows)
    b = rows_to_csv(run(load_config(TORUS_TRANSPORT)).rows)
    assert a == b
    assert a.startswith(",".join(CSV_HEADER) + "\r\n")


def test_worker_count_does_not_change_rows(monkeypatch):
    import stoflow.experiments as ex

    monkeypatch.setattr(ex, "CHUNK", 3)  # several cells per level
    cfg = load_config(_with(TORUS_TRANSPORT, levels=2))
    assert rows_to_csv(run(cfg, workers=1).rows) == rows_to_csv(run(cfg, workers=3).rows)


def test_chunk_size_does_not_change_rows(monkeypatch):
    import stoflow.experiments as ex

    cfg = load_config(_with(TORUS_TRANSPORT, levels=1))
    whole = rows_to_csv(run(cfg).rows)
    monkeypatch.setattr(ex, "CHUNK", 3)
    assert rows_to_csv(run(cfg).rows) == whole


def test_transport_residual_decreases_across_levels():
    res = run(load_config(TORUS_TRANSPORT))
    medians = []
    for level in range(4):
        vals = [r.value for r in res.rows if r.experiment == "transport" and r.level == level and r.path != "mean"]
        medians.append(np.median(vals))
    drops = sum(medians[i + 1] < medians[i] for i in range(3))
    assert drops >= 2
    assert res.order_estimate is not None and res.order_estimate > 0.3


@pytest.mark.parametrize("values,expected", [((1.0, 0.5, 0.25), 1.0), ((1.0, 1.0, 1.0), 0.0), ((1.0, 0.25, 0.0625, 0.015625), 2.0)])
def test_estimate_order_exact_sequences(values, expected):
    rows = [ResultRow("x", level, 0, 1.0, v) for level, v in enumerate(values)]
    assert estimate_order(rows)["x"] == pytest.approx(expected, abs=1e-12)


def test_estimate_order_uses_terminal_median():
    rows = []
    for level, v in enumerate((0.8, 0.4, 0.2)):
        rows += [ResultRow("x", level, p, 1.0, v * s) for p, s in enumerate((0.5, 1.0, 3.0))]
        rows += [ResultRow("x", level, 0, 0.5, 100.0), ResultRow("x", level, "mean", 1.0, 7.0, 0.1)]
    assert estimate_order(rows)["x"] == pytest.approx(1.0)


def test_estimate_order_needs_three_levels():
    rows = [ResultRow("x", level, 0, 1.0, 1.0) for level in range(2)]
    with pytest.raises(InsufficientDataError):
        estimate_order(rows)


def test_estimate_order_zero_residual_is_nan():
    rows = [ResultRow("x", level, 0, 1.0, 0.0) for level in range(3)]
    assert math.isnan(estimate_order(rows)["x"])


def test_csv_round_trip_and_summary(tmp_path):
    res = run(load_config(_with(TORUS_TRANSPORT, levels=1, paths=2)))
    csv_path, json_path = write_results(res, str(tmp_path / "r.csv"))
    back = read_rows(csv_path)
    assert back == res.rows
    summary = json.loads(json_path.read_text())
    assert set(summary) == {"experiment", "pass", "max_residual", "order_estimate", "seed"}
    assert summary["seed"] == 3


def test_timing_fills_wall_column():
    rows = run(load_config(TRIVIAL), timing=True).rows
    assert rows[0].wall_ms is not None and rows[0].wall_ms >= 0
    assert run(load_config(TRIVIAL)).rows[0].wall_ms is None


def test_blow_up_gives_partial_failure():
    cfg = {
        "experiment": "transport",
        "system": {"dim": 1, "drift": {"name": "r1.linear_drift", "rate": 1e80}, "diffusions": []},
        "simplex": {"vertices": [[0.0], [1.0]]},
        "form": {"name": "density.constant"},
        "horizon": 1.0,
        "steps": 4,
        "quadrature_order": 1,
    }
    res = run(load_config(cfg))
    assert not res.passed
    assert res.error is not None and "level 0" in res.error


@pytest.mark.parametrize(
    "cfg,passed",
    [
        (
            {
                "experiment": "continuity",
                "system": {"dim": 2, "drift": {"name": "torus.A", "k": [1, 1]}, "diffusions": [{"name": "torus.B", "k": [2, 3]}]},
                "form": {"name": "density.constant"},
                "horizon": 1.0,
                "steps": 1,
                "tolerance": 1e-10,
            },
            True,
        ),
        (
            {
                "experiment": "continuity",
                "system": {"dim": 2, "drift": {"name": "zero"}, "diffusions": [{"name": "torus.A", "k": [0, 1]}]},
                "form": {"name": "density.cos_theta1"},
                "horizon": 1.0,
                "steps": 1,
                "tolerance": 0.1,
                "options": {"expect": "reject"},
            },
            True,
        ),
        (
            {
                "experiment": "density_constancy",
                "system": {"dim": 2, "drift": {"name": "zero"}},
                "form": {"name": "density.mixed"},
                "horizon": 1.0,
                "steps": 8,
                "options": {"k": [2, 3], "expect": "reject"},
            },
            True,
        ),
        (
            {
                "experiment": "fubini",
                "system": {"dim": 2, "drift": {"name": "zero"}, "diffusions": [{"name": "torus.A", "k": [0, 1]}]},
                "simplex": {"vertices": [[0.0, 0.0], [1.0, 0.0]]},
                "form": {"name": "form.sin_dtheta1"},
                "horizon": 1.0,
                "steps": 32,
                "options": {"cases": 3},
            },
            True,
        ),
    ],
)
def test_grid_experiments(cfg, passed):
    assert run(load_config(cfg)).passed is passed


def test_statistical_experiments_need_paths():
    cfg = {
        "experiment": "martingale",
        "system": {"dim": 1, "drift": {"name": "zero"}, "diffusions": [{"name": "r1.constant", "c": 0.8}]},
        "simplex": {"vertices": [[0.3], [2.0]]},
        "form": {"name": "form.heat_sin", "c": 0.8},
        "horizon": 1.0,
        "steps": 8,
        "paths": 10,
    }
    with pytest.raises(ConfigError):
        run(load_config(cfg))


# ---- command line ----


def test_cli_run_pass_fail_and_config_error(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(TRIVIAL))
    out = tmp_path / "out" / "res.csv"
    assert main(["run", "--config", str(good), "--out", str(out)]) == 0
    assert out.exists() and out.with_suffix(".json").exists()

    failing = tmp_path / "fail.json"
    failing.write_text(json.dumps(_with(TORUS_TRANSPORT, levels=1, paths=1, steps=8, tolerance=1e-12)))
    out2 = tmp_path / "fail.csv"
    assert main(["run", "--config", str(failing), "--out", str(out2)]) == 1
    assert len(read_rows(out2)) > 0

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_with(TRIVIAL, extra=1)))
    assert main(["run", "--config", str(bad)]) == 2
    assert "extra" in capsys.readouterr().err


def test_cli_seed_flag_overrides_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TRIVIAL))
    monkeypatch.setenv("STOFLOW_SEED", "4")
    out = tmp_path / "r.csv"
    main(["run", "--config", str(cfg), "--out", str(out), "--seed", "12"])
    assert json.loads(out.with_suffix(".json").read_text())["seed"] == 12
    main(["run", "--config", str(cfg), "--out", str(out)])
    assert json.loads(out.with_suffix(".json").read_text())["seed"] == 4


def test_cli_order_and_list(tmp_path, capsys):
    rows = [ResultRow("x", level, 0, 1.0, 2.0**-level) for level in range(3)]
    path = tmp_path / "r.csv"
    path.write_text(rows_to_csv(rows))
    assert main(["order", "--in", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "x\t1"
    path.write_text(rows_to_csv(rows[:2]))
    assert main(["order", "--in", str(path)]) == 2
    assert main(["list"]) == 0
    listing = capsys.readouterr().out
    for name in ("torus.A", "r1.linear_drift", "form.sin_dtheta1"):
        assert name in listing
