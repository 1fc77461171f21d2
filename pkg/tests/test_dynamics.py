import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from flowcast.data import translation_solution
from flowcast.dynamics import (SystemState, advection_rhs, advection_rhs_expanded, integrate,
                               integrate_state, pack_state, pure_advection_rhs, step_counts, unpack_state)
from flowcast.grid import GridSpec, global_integral


def smooth(rng, shape, s=2.0):
    return gaussian_filter(rng.standard_normal(shape), s, mode="wrap")


def bump(H, W, x0, y0, s):
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * s * s))


def test_flux_form_equals_expanded_form_for_constant_velocity(rng):
    u = smooth(rng, (2, 8, 12))
    v = np.zeros((2, 2, 8, 12))
    v[:, 0], v[:, 1] = 1.3, -0.4
    np.testing.assert_allclose(advection_rhs(u, v, "circular").data,
                               advection_rhs_expanded(u, v, "circular").data, atol=1e-13)


def test_flux_and_expanded_forms_agree_to_second_order():
    # analytically identical; the discrete gap shrinks as the fields get smoother
    gaps = []
    for n in (32, 64):
        yy, xx = np.meshgrid(np.arange(n) * 2 * np.pi / n, np.arange(n) * 2 * np.pi / n, indexing="ij")
        u = (2 + np.sin(xx) * np.cos(yy))[None]
        v = np.stack([np.cos(xx + yy), np.sin(2 * xx)])[None]
        h = 2 * np.pi / n
        a = advection_rhs(u, v, "circular").data / h
        b = advection_rhs_expanded(u, v, "circular").data / h
        gaps.append(np.abs(a - b).max())
    assert gaps[1] < gaps[0] / 3.5


@given(st.integers(0, 2**32 - 1))
def test_flux_form_conserves_on_periodic_grid(seed):
    rng = np.random.default_rng(seed)
    u = smooth(rng, (1, 8, 16)) + 2
    v = 0.3 * smooth(rng, (1, 2, 8, 16))
    assert abs(global_integral(advection_rhs(u, v, "circular")).sum()) < 1e-12


def test_pack_unpack_round_trip(rng):
    u, v = rng.standard_normal((3, 3, 4, 5)), rng.standard_normal((3, 3, 2, 4, 5))
    packed = pack_state(SystemState(u, v))
    assert packed.shape == (3, 9, 4, 5)
    s = unpack_state(packed, 3)
    np.testing.assert_array_equal(s.u.data, u)
    np.testing.assert_array_equal(s.v.data, v)
    with pytest.raises(ValueError):
        unpack_state(packed, 2)
    with pytest.raises(ValueError):
        SystemState(u, v[:, :2])


def test_packed_state_size_for_five_quantities():
    s = SystemState(np.zeros((5, 32, 64)), np.zeros((5, 2, 32, 64)))
    assert pack_state(s).size == 30720


def test_step_counts_validation():
    assert step_counts([0.0, 0.25, 0.5], 0.125) == [2, 2]
    for bad in ([0.0, 0.25], -1.0), ([0.0, 0.25], 0.1), ([0.0, 0.0], 0.1), ([0.3, 0.1], 0.1):
        with pytest.raises(ValueError):
            step_counts(*bad)
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, np.zeros(3), [0.0, 1.0], 0.5, "midpoint")


def test_solvers_on_exponential_decay():
    for method, order in (("euler", 1), ("rk4", 4)):
        errs = []
        for dt in (0.1, 0.05):
            traj = integrate(lambda t, y: -y, np.ones((1, 1, 1)), [0.0, 1.0], dt, method)
            errs.append(abs(traj.states[-1].data.item() - np.exp(-1)))
        assert abs(np.log2(errs[0] / errs[1]) - order) < 0.2


def test_time_dependent_rhs_receives_absolute_time():
    traj = integrate(lambda t, y: y * 0 + t, np.zeros(1), [1.0, 2.0], 0.25, "rk4")
    assert np.isclose(traj.states[-1].data[0], 1.5)  # integral of t from 1 to 2


def test_translation_matches_fourier_oracle():
    H, W = 4, 32
    u0 = bump(H, W, 10.0, 1.5, 3.0)[None]
    state = SystemState(u0, np.stack([np.ones((H, W)), np.zeros((H, W))])[None])
    traj = integrate_state(state, [0.0, 1.0, 2.0], 1 / 64, "rk4", grid=GridSpec.regular(H, W, "periodic"))
    for i, t in enumerate(traj.times):
        np.testing.assert_allclose(traj.u(i).data, translation_solution(u0, 1.0, t), atol=1e-8)


def test_rk4_and_euler_convergence_orders():
    H, W = 4, 32
    u0 = bump(H, W, 10.0, 1.5, 3.0)[None]
    state = SystemState(u0, np.stack([np.ones((H, W)), np.zeros((H, W))])[None])
    exact = translation_solution(u0, 1.0, 1.0)
    grid = GridSpec.regular(H, W, "periodic")
    for method, floor in (("rk4", 3.5), ("euler", 0.9)):
        errs = [np.abs(integrate_state(state, [0.0, 1.0], dt, method, grid=grid).u(1).data - exact).max()
                for dt in (1 / 6, 1 / 12, 1 / 24)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert orders.min() >= floor, (method, errs, orders)


def test_pure_advection_keeps_velocity_frozen(rng):
    u, v = rng.random((1, 6, 8)), 0.2 * rng.standard_normal((1, 2, 6, 8))
    traj = integrate(pure_advection_rhs(1), pack_state(SystemState(u, v)), [0.0, 0.5], 0.25, "rk4")
    np.testing.assert_array_equal(traj.state(1).v.data, v)


def test_trajectory_times_must_increase():
    from flowcast.dynamics import Trajectory
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [np.zeros(1), np.zeros(1)], 1)
