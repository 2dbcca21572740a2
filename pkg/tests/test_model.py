import json

import numpy as np
import pytest
from scipy.linalg import polar

from qtraj.model import (
    ControlInterval, ModelException, ModelSpec, ObservableKind, ObservableSpec, UnitaryBlocks, apply_branches,
    build_unitary, effect_operators, linear_family, load_model, measurement_superops, parse_initial_state, parse_matrix, polar_unitary,
    rate_bound, superop_J, superop_L, superop_Q, superop_R, superop_Theta,
)
from qtraj.qcore import (
    EXCITED, GROUND, IDENTITY, SIGMA_MINUS, SIGMA_X, SIGMA_Z, QubitState, dag, mul, random_states, trace,
)

from conftest import DESK_DOC, desk_model


def test_control_interval():
    interval = ControlInterval(-1.0, 1.0)
    assert interval.contains(np.array([-1.0, 0.0, 1.0]))
    assert not interval.contains(1.5)
    assert np.array_equal(interval.grid(3), [-1.0, 0.0, 1.0])
    assert np.array_equal(interval.grid(1), [0.0])
    assert np.array_equal(interval.clip(np.array([-2.0, 2.0])), [-1.0, 1.0])

    with pytest.raises(ModelException, match="Invalid control interval"):
        ControlInterval(1.0, -1.0)


def test_parse_matrix():
    assert np.array_equal(parse_matrix('sigma_x'), SIGMA_X)
    assert np.array_equal(parse_matrix({'scale': 2, 'matrix': 'sigma_minus'}), 2 * SIGMA_MINUS)
    assert np.array_equal(parse_matrix([[1, [0, 1]], [[0, -1], 0]]), np.array([[1, 1j], [-1j, 0]]))

    with pytest.raises(ModelException, match="Unknown matrix name"):
        parse_matrix('sigma_w')
    with pytest.raises(ModelException, match="2x2"):
        parse_matrix([[1, 2, 3], [4, 5, 6]])


def test_model_from_dict():
    model = ModelSpec.from_dict(DESK_DOC)
    assert model.name == 'desk'
    assert model.controls == ControlInterval(-1.0, 1.0)
    assert np.allclose(model.H(0.0, 0.5), 0.5 * np.diag([1, -1]) + 0.5 * SIGMA_X)
    assert np.array_equal(model.C(0.3, 0.0), SIGMA_MINUS)
    assert model.H(0.0, np.array([0.0, 1.0])).shape == (2, 2, 2)

    with pytest.raises(ModelException, match="not Hermitian"):
        ModelSpec.from_dict({'H': 'sigma_minus', 'C': 'zero'})
    with pytest.raises(ModelException, match="both 'H' and 'C'"):
        ModelSpec.from_dict({'H': 'sigma_x'})


def test_load_model(tmp_path):
    path = tmp_path / 'm.json'
    path.write_text(json.dumps(dict(DESK_DOC, observable={'kind': 'nondiagonal', 'alpha': 0.3})))
    doc = load_model(path)
    assert doc.observable.kind is ObservableKind.NONDIAGONAL
    assert doc.observable.alpha == 0.3
    assert np.array_equal(doc.rho0, EXCITED)

    path.write_text('{')
    with pytest.raises(ModelException, match="not valid JSON"):
        load_model(path)
    with pytest.raises(ModelException, match="Could not read"):
        load_model(tmp_path / 'missing.json')


def test_initial_state():
    assert np.allclose(parse_initial_state([1, 0, 0]), GROUND)
    assert np.array_equal(parse_initial_state('excited'), EXCITED)
    with pytest.raises(ModelException, match="Invalid initial state"):
        parse_initial_state([[1, 0], [0, 1]])


def test_observables():
    diag = ObservableSpec.diagonal()
    assert np.array_equal(diag.P0, GROUND)
    assert np.array_equal(diag.P1, EXCITED)

    obs = ObservableSpec.nondiagonal(np.pi / 4)
    assert np.allclose(obs.P0, 0.5 * np.ones((2, 2)))
    assert np.allclose(obs.P0 + obs.P1, IDENTITY)
    assert ObservableSpec.from_dict(obs.to_dict()).alpha == obs.alpha

    with pytest.raises(ModelException, match="angle"):
        ObservableSpec.nondiagonal(0.0)
    with pytest.raises(ModelException, match="projector"):
        ObservableSpec(SIGMA_X, IDENTITY - SIGMA_X)
    with pytest.raises(ModelException, match="differ"):
        ObservableSpec.diagonal(1.0, 1.0)


@pytest.mark.parametrize("h", [1e-1, 1e-2, 1e-4])
def test_unitary(h):
    blocks = build_unitary(h, 0.0, np.array([-1.0, 0.3, 1.0]), desk_model())
    assert blocks.L00.shape == (3, 2, 2)
    assert blocks.unitarity_error() < 1e-12


def test_polar_unitary():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4, 4)) + 1j * rng.normal(size=(5, 4, 4))
    stacked = polar_unitary(a)
    for i in range(5):
        assert np.max(np.abs(stacked[i] - polar(a[i])[0])) < 1e-10


def test_unitary_step_range():
    with pytest.raises(ModelException, match="Time step"):
        build_unitary(0.0, 0.0, 0.0, desk_model())


def test_unitary_residual_slope():
    model = desk_model()
    hs = np.array([1e-2, 1e-3, 1e-4])
    residuals = []
    for h in hs:
        H = model.H(0.0, 0.5)
        C = model.C(0.0, 0.5)
        first_order = UnitaryBlocks(
            L00=IDENTITY + h * (-1j * H - 0.5 * mul(C.conj().T, C)),
            L01=-np.sqrt(h) * C.conj().T,
            L10=np.sqrt(h) * C,
            L11=IDENTITY + h * (-1j * H - 0.5 * mul(C, C.conj().T)),
        ).assemble()
        exact = build_unitary(h, 0.0, 0.5, model).assemble()
        residuals.append(np.max(np.abs(exact - first_order)))
    slope = np.polyfit(np.log(hs), np.log(residuals), 1)[0]
    assert slope == pytest.approx(1.5, abs=0.2)


def _tensor_branches(U, obs, rho):
    beta = GROUND
    full = U @ np.kron(beta, rho) @ U.conj().T
    out = []
    for p in (obs.P0, obs.P1):
        m = (np.kron(p, IDENTITY) @ full).reshape(2, 2, 2, 2)
        out.append(np.einsum('iaib->ab', m))
    return out


@pytest.mark.parametrize("obs", [ObservableSpec.diagonal(), ObservableSpec.nondiagonal(0.7)])
def test_block_formula_matches_partial_trace(obs):
    rng = np.random.default_rng(5)
    model = desk_model()
    for rho in random_states(rng, 100):
        u = rng.uniform(-1, 1)
        blocks = build_unitary(0.01, rng.uniform(0, 1), u, model)
        l0, l1 = apply_branches(blocks, obs, rho)
        t0, t1 = _tensor_branches(blocks.assemble(), obs, rho)
        assert np.max(np.abs(l0 - t0)) < 1e-12
        assert np.max(np.abs(l1 - t1)) < 1e-12


def test_branch_probabilities():
    rng = np.random.default_rng(6)
    model = desk_model()
    obs = ObservableSpec.nondiagonal()
    rho = random_states(rng, 1000)
    u = rng.uniform(-1, 1, 1000)
    blocks = build_unitary(0.01, 0.2, u, model)
    l0, l1 = apply_branches(blocks, obs, rho)
    assert np.max(np.abs(trace(l0) + trace(l1) - 1.0)) < 1e-12

    e0, e1 = effect_operators(blocks, obs)
    assert np.max(np.abs(trace(mul(rho, e0)) - trace(l0))) < 1e-12
    assert np.max(np.abs(e0 + e1 - IDENTITY)) < 1e-12


def test_measurement_superops():
    blocks = build_unitary(0.01, 0.0, 0.0, desk_model())
    obs = ObservableSpec.diagonal()
    first, second = measurement_superops(blocks, obs)
    state = QubitState.excited()
    l0, l1 = apply_branches(blocks, obs, state.matrix)
    assert np.array_equal(first(state), l0)
    assert np.array_equal(second(state.matrix), l1)


@pytest.mark.parametrize("superop", [superop_L, superop_Theta, superop_R, superop_Q])
def test_superops_traceless(superop):
    rng = np.random.default_rng(7)
    model = desk_model()
    rho = random_states(rng, 1000)
    u = rng.uniform(-1, 1, 1000)
    out = superop(model, 0.5, u, rho)
    assert np.max(np.abs(trace(out))) < 1e-14


def test_superop_values():
    model = desk_model()
    assert np.allclose(superop_J(model, 0.0, 0.0, EXCITED), GROUND)
    assert np.allclose(superop_Q(model, 0.0, 0.0, EXCITED), GROUND - EXCITED)
    # No jumps out of the ground state.
    assert np.array_equal(superop_Q(model, 0.0, 0.0, GROUND), np.zeros((2, 2)))
    assert np.allclose(superop_L(model, 0.0, 0.0, EXCITED), GROUND - EXCITED)


@pytest.mark.parametrize("n", [64, 256, 1024])
@pytest.mark.parametrize("u", [-1.0, 0.3])
def test_event_rate_matches_jump_rate(n, u):
    rng = np.random.default_rng(n)
    model = desk_model()
    rho = random_states(rng, 200)
    _, l1 = apply_branches(build_unitary(1.0 / n, 0.0, u, model), ObservableSpec.diagonal(), rho)
    rate = trace(superop_J(model, 0.0, u, rho)).real
    assert np.max(np.abs(n * trace(l1).real - rate)) <= 10 / np.sqrt(n)


@pytest.mark.parametrize("u", [-1.0, 0.0, 0.7])
def test_jump_rate_bound(u):
    rng = np.random.default_rng(11)
    model = ModelSpec(
        linear_family(0.5 * SIGMA_Z, SIGMA_X), linear_family(SIGMA_MINUS, 0.4 * SIGMA_Z), ControlInterval(-1.0, 1.0),
    )
    C = model.C(0.0, u)
    _, vecs = np.linalg.eigh(dag(C) @ C)
    bound = float(rate_bound(model, 0.0, u))
    assert bound == pytest.approx(float(np.linalg.eigvalsh(dag(C) @ C)[-1]))

    for pure in (False, True):
        rho = random_states(rng, 500, pure=pure)
        assert np.all(trace(superop_J(model, 0.0, u, rho)).real <= bound + 1e-12)

    # Attained on the top eigenvector of C*C.
    top = np.outer(vecs[:, -1], vecs[:, -1].conj())
    assert trace(superop_J(model, 0.0, u, top)).real == pytest.approx(bound)
