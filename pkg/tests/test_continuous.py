import numpy as np
import pytest
from scipy.linalg import expm

from qtraj.continuous import (
    ContinuousException, JumpDynamics, StepSizeError, cell_minimum_marks, integrate_diffusive,
    integrate_diffusive_ensemble, integrate_jump, integrate_jump_ensemble, intensity_bound, record_steps_for,
    rescaled_waits, run_jump_ensemble, sample_poisson_field, step_count,
)
from qtraj.discrete import Strategy
from qtraj.harness import exponential_wait_test, poisson_count_test
from qtraj.model import ControlInterval, ModelSpec, constant_family, linear_family, superop_J, superop_L, superop_R
from qtraj.qcore import EXCITED, GROUND, IDENTITY, SIGMA_MINUS, SIGMA_X, ZERO, bloch_coords, random_states

from conftest import assert_valid_states, desk_model, idle_model


def _rotated(rho0, T):
    U = expm(-1j * 0.5 * SIGMA_X * T)
    return U @ rho0 @ U.conj().T


def test_step_count():
    assert step_count(1e-3, 1.0) == 1000
    assert step_count(1e-2, 0.5) == 50

    with pytest.raises(ContinuousException, match="Time step"):
        step_count(0.1, 1.0)
    with pytest.raises(ContinuousException, match="Horizon"):
        step_count(1e-3, -1.0)


def test_idle_model_keeps_state():
    rho0 = random_states(np.random.default_rng(1), 1)[0]
    path = integrate_diffusive(idle_model(), Strategy.constant(0.0), rho0, 1e-3, 0.5, seed=2)
    assert np.allclose(path.states, rho0, atol=1e-12)

    jumps = integrate_jump(idle_model(), Strategy.constant(0.0), rho0, 0.5, 1e-2, seed=2)
    assert jumps.jump_count == 0
    assert np.allclose(jumps.states, rho0, atol=1e-12)


def test_diffusive_hamiltonian_flow():
    model = ModelSpec.constant(0.5 * SIGMA_X, ZERO)
    path = integrate_diffusive(model, Strategy.constant(0.0), EXCITED, 1e-4, 1.0, seed=3)
    assert np.max(np.abs(path.states[-1] - _rotated(EXCITED, 1.0))) < 5e-3


def test_jump_hamiltonian_flow():
    model = ModelSpec.constant(0.5 * SIGMA_X, ZERO)
    path = integrate_jump(model, Strategy.constant(0.0), EXCITED, 1.0, 1e-2, seed=3)
    assert path.jump_count == 0
    assert np.max(np.abs(path.states[-1] - _rotated(EXCITED, 1.0))) < 1e-6


def test_diffusive_threads_and_single_path(desk):
    strategy = Strategy.deterministic(lambda t: np.cos(t))
    one = integrate_diffusive_ensemble(desk, strategy, EXCITED, 1e-3, 0.2, 300, seed=4, threads=1)
    two = integrate_diffusive_ensemble(desk, strategy, EXCITED, 1e-3, 0.2, 300, seed=4, threads=2)
    assert np.array_equal(one.states, two.states)
    assert np.array_equal(one.increments, two.increments)
    assert_valid_states(one.states)

    path = integrate_diffusive(desk, strategy, EXCITED, 1e-3, 0.2, seed=4)
    assert np.array_equal(path.states, one.states[0])


def test_jump_threads_and_single_path(desk):
    strategy = Strategy.constant(0.5)
    one = integrate_jump_ensemble(desk, strategy, EXCITED, 1.0, 1e-2, 300, seed=5, threads=1)
    two = integrate_jump_ensemble(desk, strategy, EXCITED, 1.0, 1e-2, 300, seed=5, threads=2)
    assert np.array_equal(one.states, two.states)
    assert np.array_equal(one.jump_counts, two.jump_counts)
    assert_valid_states(one.states)

    path = integrate_jump(desk, strategy, EXCITED, 1.0, 1e-2, seed=5)
    assert np.array_equal(path.states, one.states[0])
    assert np.array_equal(path.jump_times, one.jump_times[0])
    assert int(np.sum(path.jumps_in_step)) == path.jump_count


def test_recorded_steps(desk):
    steps = record_steps_for([0.25, 0.5], 1e-2)
    assert steps == [0, 25, 50]
    ens = integrate_diffusive_ensemble(desk, Strategy.constant(0.0), EXCITED, 1e-2, 0.5, 4, seed=0,
                                       record_steps=steps)
    assert ens.states.shape == (4, 3, 2, 2)
    assert ens.bloch(0.25).shape == (4, 3)
    with pytest.raises(ContinuousException, match="not recorded"):
        ens.index_of(0.4)
    with pytest.raises(ContinuousException, match="full paths"):
        ens.diffusive_path(0)
    with pytest.raises(ContinuousException, match="no jumps"):
        ens.jump_counts


def test_history_strategy_rejected(desk):
    strategy = Strategy.history(lambda k, outcomes: 0.0)
    with pytest.raises(ContinuousException, match="deterministic or Markovian"):
        integrate_diffusive(desk, strategy, EXCITED, 1e-3, 0.1, seed=0)
    with pytest.raises(ContinuousException, match="deterministic or Markovian"):
        integrate_jump(desk, strategy, EXCITED, 0.1, 1e-2, seed=0)


def test_control_outside_interval(desk):
    with pytest.raises(ContinuousException, match="outside"):
        integrate_diffusive(desk, Strategy.constant(1.5), EXCITED, 1e-3, 0.1, seed=0)


def test_step_too_large_for_coupling():
    model = ModelSpec.constant(ZERO, 50 * SIGMA_MINUS)
    with pytest.raises(StepSizeError, match="dt = 0.01"):
        integrate_diffusive(model, Strategy.constant(0.0), EXCITED, 1e-2, 0.1, seed=0)


def test_intensity_bound():
    model = ModelSpec.constant(ZERO, 2 * SIGMA_MINUS)
    assert intensity_bound(model, None, 1.0) == pytest.approx(4.04)

    with pytest.raises(ContinuousException, match="too large"):
        intensity_bound(ModelSpec.constant(ZERO, 2000 * SIGMA_MINUS), None, 1.0)


def test_intensity_bound_follows_open_loop_controls():
    # C = u σ⁻ on [-2, 2]
    model = ModelSpec(constant_family(ZERO), linear_family(ZERO, SIGMA_MINUS), ControlInterval(-2.0, 2.0))
    assert intensity_bound(model, None, 1.0) == pytest.approx(4.04)
    assert intensity_bound(model, Strategy.constant(0.5), 1.0) == pytest.approx(0.2525)
    feedback = Strategy.markovian(lambda t, rho: np.full(rho.shape[:-2], 0.5))
    assert intensity_bound(model, feedback, 1.0) == pytest.approx(4.04)


def test_jump_rate_above_bound_rejected(desk):
    dyn = JumpDynamics(
        drift=lambda t, u, rho: superop_R(desk, t, u, rho),
        jump=lambda t, u, rho: superop_J(desk, t, u, rho),
        bound=0.5,
        controls=desk.controls,
    )
    with pytest.raises(ContinuousException, match="exceeds the intensity bound 0.5"):
        run_jump_ensemble(dyn, Strategy.constant(0.0), EXCITED, 1.0, 1e-2, 40, seed=0)


def test_peaked_coupling_between_grid_times():
    # g(t) peaks at 25x the rate seen on the bound's time grid, between its first two nodes.
    def coupling(t, u):
        g = 1.0 + 4.0 * np.exp(-((t - 0.0025) / 0.001) ** 2)
        return np.broadcast_to(g * SIGMA_MINUS, np.shape(u) + (2, 2))

    model = ModelSpec(constant_family(ZERO), coupling)
    assert intensity_bound(model, None, 0.5) < 1.03
    with pytest.raises(ContinuousException, match="exceeds the intensity bound"):
        integrate_jump_ensemble(model, Strategy.constant(0.0), EXCITED, 0.5, 1e-3, 2000, seed=4)


def test_diffusive_mean_follows_master_equation(desk):
    strategy = Strategy.deterministic(lambda t: 0.5 * np.sin(2 * np.pi * t), name='sin')
    dt, T, M = 1e-3, 0.5, 1000
    ens = integrate_diffusive_ensemble(desk, strategy, EXCITED, dt, T, M, seed=12, record_steps=[0, 500])

    def rhs(t, rho):
        return superop_L(desk, t, strategy.law(t), rho)

    rho = np.array(EXCITED, dtype=complex)
    for k in range(500):
        t = k * dt
        k1 = rhs(t, rho)
        k2 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, rho + 0.5 * dt * k2)
        k4 = rhs(t + dt, rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    v = ens.bloch(T)
    se = v.std(axis=0) / np.sqrt(M)
    assert np.all(np.abs(v.mean(axis=0) - bloch_coords(rho)) <= 4 * se + 5e-3)


def test_poisson_field():
    field = sample_poisson_field((0.0, 2.0, 3.0), 17)
    assert field.area == 6.0
    assert field.seed == 17
    assert np.all(np.diff(field.times) >= 0)
    assert np.all((field.marks >= 0) & (field.marks <= 3.0))

    again = sample_poisson_field((0.0, 2.0, 3.0), 17)
    assert np.array_equal(field.times, again.times)

    with pytest.raises(ContinuousException, match="Invalid Poisson field"):
        sample_poisson_field((1.0, 0.0, 1.0), 0)
    with pytest.raises(ContinuousException, match="too large"):
        sample_poisson_field((0.0, 1e4, 1e4), 0)


def test_cell_minimum_marks():
    rng = np.random.default_rng(6)
    times = np.sort(rng.uniform(0.0, 1.0, 200))
    marks = rng.uniform(0.0, 5.0, 200)
    n = 16
    got = cell_minimum_marks(times, marks, n, n)
    for k in range(n):
        inside = (times > k / n) & (times <= (k + 1) / n)
        expected = marks[inside].min() if np.any(inside) else np.inf
        assert got[k] == expected


def test_spontaneous_decay():
    # H = σz/2 and C = σ⁻ preserve the excitation number: one jump at most, to the ground state.
    model = desk_model()
    ens = integrate_jump_ensemble(model, Strategy.constant(0.0), EXCITED, 1.0, 1e-2, 600, seed=8)
    assert np.all(ens.jump_counts <= 1)
    jumped = ens.jump_counts == 1
    assert np.max(np.abs(ens.first_jump_states[jumped] - GROUND)) < 1e-9

    survived = np.mean(~jumped)
    se = np.sqrt(np.exp(-1) * (1 - np.exp(-1)) / 600)
    assert abs(survived - np.exp(-1)) < 4 * se


def test_thinning_law():
    # C = √2 I: every state jumps at rate 2 and no jump changes the state.
    model = ModelSpec.constant(ZERO, np.sqrt(2) * IDENTITY)
    M = 1000
    ens = integrate_jump_ensemble(model, Strategy.constant(0.0), EXCITED, 3.0, 1e-2, M, seed=9)
    counts = ens.jump_counts
    assert abs(counts.mean() - 6.0) < 4 * np.sqrt(6.0 / M)
    assert poisson_count_test(counts, 6.0).pvalue > 1e-3

    waits = rescaled_waits(ens, first_only=True)
    assert len(waits) == int(np.sum(counts > 0))
    assert exponential_wait_test(waits).pvalue > 1e-3
    assert len(rescaled_waits(ens)) == int(np.sum(counts))
    assert np.allclose(ens.states, EXCITED, atol=1e-12)
