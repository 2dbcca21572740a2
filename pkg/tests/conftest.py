import numpy as np
import pytest

from qtraj import config
from qtraj.model import ControlInterval, ModelSpec, constant_family, linear_family
from qtraj.qcore import SIGMA_MINUS, SIGMA_X, SIGMA_Z, ZERO


def desk_model() -> ModelSpec:
    """H(t, u) = σz/2 + u σx, C = σ⁻, u in [-1, 1]."""
    return ModelSpec(
        linear_family(0.5 * SIGMA_Z, SIGMA_X), constant_family(SIGMA_MINUS), ControlInterval(-1.0, 1.0), name='desk',
    )


def idle_model() -> ModelSpec:
    return ModelSpec.constant(ZERO, ZERO, name='idle', controls=ControlInterval(-1.0, 1.0))


@pytest.fixture
def desk():
    return desk_model()


@pytest.fixture
def idle():
    return idle_model()


@pytest.fixture
def isolated_config(tmp_path, monkeypatch):
    monkeypatch.setattr(config, 'get_config_dir', lambda: tmp_path)
    monkeypatch.setattr(config, '_CONFIG', None)
    yield tmp_path / config.CONFIG_FILE


DESK_DOC = {
    'name': 'desk',
    'H': {'form': 'linear', 'H0': {'scale': 0.5, 'matrix': 'sigma_z'}, 'H1': 'sigma_x'},
    'C': 'sigma_minus',
    'controls': [-1, 1],
    'observable': 'diagonal',
    'rho0': 'excited',
}


def assert_valid_states(rho: np.ndarray, tol: float = 1e-9) -> None:
    tr = np.trace(rho, axis1=-2, axis2=-1)
    assert np.max(np.abs(tr - 1.0)) <= tol
    assert np.max(np.abs(rho - np.conj(np.swapaxes(rho, -1, -2)))) <= 1e-12
    assert np.min(np.linalg.eigvalsh(rho)) >= -tol
