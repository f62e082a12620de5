import numpy as np
import pytest

from stoflow.forms import FormArgumentError, VectorField, constant_field, zero_field
from stoflow.sde import (
    BlowUpError,
    BrownianEnsemble,
    SdeSystem,
    flow_states,
    integrate_ensemble,
    integrate_flow,
    path_seed,
    refine_brownian,
    sample_brownian,
    sample_ensemble,
)


def linear_field(rate):
    return VectorField(1, lambda t, x: rate * x, lambda t, x: np.full(x.shape + (1,), float(rate)))


def gbm(a, b):
    """dx = a x dt + b x o dB, solved by x0 exp(a t + b B_t)."""
    return SdeSystem(linear_field(a), [linear_field(b)])


@pytest.mark.parametrize("steps,T", [(0, 1.0), (4, 0.0), (4, -1.0)])
def test_bad_grid(steps, T):
    with pytest.raises(ValueError):
        sample_brownian(1, T, steps, 0)


def test_same_seed_same_path():
    a = sample_brownian(2, 1.0, 64, 123)
    b = sample_brownian(2, 1.0, 64, 123)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_brownian(2, 1.0, 64, 124).values)


def test_path_seeds_distinct():
    seeds = {path_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert all(0 <= s < 2**64 for s in seeds)


def test_increment_statistics():
    # 2^16 standard normals scaled by sqrt(dt): mean and variance within 5 SE
    path = sample_brownian(1, 2.0, 2**16, 99)
    z = path.increments[:, 0] / np.sqrt(path.dt)
    n = len(z)
    assert abs(z.mean()) < 5 / np.sqrt(n)
    assert abs(z.var() - 1.0) < 5 * np.sqrt(2.0 / n)
    assert path.values[0, 0] == 0.0


def test_refinement_keeps_coarse_values():
    path = sample_brownian(2, 1.0, 32, 5)
    fine = refine_brownian(path)
    assert fine.steps == 64 and fine.level == 1
    np.testing.assert_array_equal(fine.values[::2], path.values)
    finer = refine_brownian(fine)
    np.testing.assert_array_equal(finer.values[::4], path.values)


def test_bridge_midpoint_statistics():
    # midpoint minus mean of neighbours is N(0, dt/4)
    path = sample_brownian(1, 1.0, 2**15, 3)
    fine = refine_brownian(path)
    r = fine.values[1::2, 0] - 0.5 * (fine.values[:-1:2, 0] + fine.values[2::2, 0])
    z = r / np.sqrt(path.dt / 4)
    assert abs(z.var() - 1.0) < 5 * np.sqrt(2.0 / len(z))


def test_ensemble_is_order_independent():
    full = sample_ensemble(2, 1.0, 16, 10, master_seed=4)
    part = sample_ensemble(2, 1.0, 16, 3, master_seed=4, start=5)
    np.testing.assert_array_equal(full.values[5:8], part.values)
    np.testing.assert_array_equal(full.refine().values[5:8], part.refine().values)
    np.testing.assert_array_equal(full.refine().values[2], refine_brownian(full.path(2)).values)


def test_from_paths_grid_mismatch():
    with pytest.raises(ValueError):
        BrownianEnsemble.from_paths([sample_brownian(1, 1.0, 8, 0), sample_brownian(1, 1.0, 16, 0)])


def test_deterministic_exponential():
    traj = integrate_flow(SdeSystem(linear_field(1.0)), [1.0], sample_brownian(0, 1.0, 1000, 0))
    assert traj.positions[-1, 0] == pytest.approx(np.e, abs=1e-6)
    assert traj.jacobians[-1, 0, 0] == pytest.approx(np.e, abs=1e-6)


def test_additive_noise_is_exact():
    system = SdeSystem(zero_field(2), [constant_field([1.0, 0.0]), constant_field([0.0, 2.0])])
    path = sample_brownian(2, 1.0, 50, 8)
    traj = integrate_flow(system, [0.5, -0.5], path)
    expected = np.array([0.5, -0.5]) + path.values * np.array([1.0, 2.0])
    np.testing.assert_allclose(traj.positions, expected, atol=1e-13)
    np.testing.assert_array_equal(traj.jacobians[-1], np.eye(2))


def test_heun_strong_order_one():
    # terminal error against the exact GBM solution, panel median over 256 paths
    a, b = 0.3, 0.8
    ens = sample_ensemble(1, 1.0, 64, 256, master_seed=11)
    errs = []
    for _ in range(5):
        for _, _, x, _ in flow_states(gbm(a, b), np.ones((1, 1)), ens.times, ens.values):
            pass
        exact = np.exp(a + b * ens.values[:, -1, 0])
        errs.append(np.median(np.abs(x[:, 0, 0] - exact)))
        ens = ens.refine()
    slope = np.polyfit(-np.arange(len(errs)) * np.log(2.0), np.log(errs), 1)[0]
    assert 0.9 <= slope <= 1.1


def test_heun_deterministic_order_two():
    errs = []
    for steps in (16, 32, 64, 128):
        traj = integrate_flow(SdeSystem(linear_field(1.0)), [1.0], sample_brownian(0, 1.0, steps, 0))
        errs.append(abs(traj.positions[-1, 0] - np.e))
    slope = np.polyfit(np.log([16, 32, 64, 128]), np.log(errs), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.1)


def test_jacobian_matches_finite_difference():
    # variational equation against flowing two nearby points with the same noise
    th = 0.3
    rot = VectorField(
        2,
        lambda t, x: np.stack([np.sin(x[..., 1]), np.cos(x[..., 0])], -1),
        lambda t, x: np.stack(
            [np.stack([np.zeros(x.shape[:-1]), np.cos(x[..., 1])], -1), np.stack([-np.sin(x[..., 0]), np.zeros(x.shape[:-1])], -1)],
            -2,
        ),
    )
    system = SdeSystem(constant_field([0.1, th]), [rot])
    path = sample_brownian(1, 1.0, 256, 2)
    x0 = np.array([0.2, 0.4])
    h = 1e-6
    trajs = integrate_ensemble(system, [x0, x0 + [h, 0], x0 - [h, 0], x0 + [0, h], x0 - [0, h]], path)
    fd = np.stack(
        [(trajs[1].positions[-1] - trajs[2].positions[-1]) / (2 * h), (trajs[3].positions[-1] - trajs[4].positions[-1]) / (2 * h)],
        axis=-1,
    )
    np.testing.assert_allclose(trajs[0].jacobians[-1], fd, atol=1e-6)


def test_blow_up_reports_time():
    square = VectorField(1, lambda t, x: x**2, lambda t, x: 2 * x[..., None])
    with pytest.raises(BlowUpError) as info:
        integrate_flow(SdeSystem(square), [1.0], sample_brownian(0, 3.0, 60, 0))
    assert 0.0 < info.value.last_valid_time < 3.0


def test_driver_count_mismatch():
    system = SdeSystem(zero_field(1), [constant_field([1.0])])
    with pytest.raises(FormArgumentError):
        next(flow_states(system, [[0.0]], np.linspace(0, 1, 3), np.zeros((1, 3, 2))))
