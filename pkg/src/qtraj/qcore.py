"""Exact 2x2 complex arithmetic for qubit states.

Every array helper accepts stacks shaped ``(..., 2, 2)`` and is written entry by entry so
a sample's result never depends on how many other samples share its batch.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np

from .const import TOL_BALL, TOL_HERMITIAN, TOL_POSITIVE, TOL_ROUNDTRIP, TOL_TRACE


class QcoreException(Exception):
    pass


class StateValidationError(QcoreException):
    pass


class OutOfBallError(QcoreException):
    pass


class NumericalDriftError(QcoreException):
    pass


Matrix2 = np.ndarray


def matrix2(a00: complex, a01: complex, a10: complex, a11: complex) -> Matrix2:
    return np.array([[a00, a01], [a10, a11]], dtype=complex)


IDENTITY = matrix2(1, 0, 0, 1)
ZERO = matrix2(0, 0, 0, 0)
SIGMA_X = matrix2(0, 1, 1, 0)
SIGMA_Y = matrix2(0, -1j, 1j, 0)
SIGMA_Z = matrix2(1, 0, 0, -1)
SIGMA_MINUS = matrix2(0, 1, 0, 0)
SIGMA_PLUS = matrix2(0, 0, 1, 0)

# |Ω><Ω| and |X><X| in the basis (Ω, X).
GROUND = matrix2(1, 0, 0, 0)
EXCITED = matrix2(0, 0, 0, 1)

NAMED_MATRICES: Dict[str, Matrix2] = {
    'I': IDENTITY,
    'identity': IDENTITY,
    'zero': ZERO,
    'sigma_x': SIGMA_X,
    'sigma_y': SIGMA_Y,
    'sigma_z': SIGMA_Z,
    'sigma_minus': SIGMA_MINUS,
    'sigma_plus': SIGMA_PLUS,
    'ground': GROUND,
    'excited': EXCITED,
}


def dag(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a00, a01, a10, a11 = a[..., 0, 0], a[..., 0, 1], a[..., 1, 0], a[..., 1, 1]
    b00, b01, b10, b11 = b[..., 0, 0], b[..., 0, 1], b[..., 1, 0], b[..., 1, 1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=complex)
    out[..., 0, 0] = a00 * b00 + a01 * b10
    out[..., 0, 1] = a00 * b01 + a01 * b11
    out[..., 1, 0] = a10 * b00 + a11 * b10
    out[..., 1, 1] = a10 * b01 + a11 * b11
    return out


def sandwich(a: np.ndarray, rho: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """a ρ b*, with b defaulting to a."""
    return mul(mul(a, rho), dag(a if b is None else b))


def trace(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] + a[..., 1, 1]


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return mul(a, b) - mul(b, a)


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return mul(a, b) + mul(b, a)


def scale(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Multiply each matrix of a stack by its own scalar."""
    return np.asarray(s)[..., None, None] * a


def hermitian_eigvalsh(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form (low, high) eigenvalues of the Hermitian part of ``a``."""
    d0 = a[..., 0, 0].real
    d1 = a[..., 1, 1].real
    off = 0.5 * (a[..., 0, 1] + np.conj(a[..., 1, 0]))
    mean = 0.5 * (d0 + d1)
    spread = np.sqrt((0.5 * (d0 - d1)) ** 2 + np.abs(off) ** 2)
    return mean - spread, mean + spread


def lambda_max(a: np.ndarray) -> np.ndarray:
    return hermitian_eigvalsh(a)[1]


def hermiticity_error(a: np.ndarray) -> np.ndarray:
    return np.max(np.abs(a - dag(a)), axis=(-2, -1))


def bloch_coords(a: np.ndarray) -> np.ndarray:
    """Bloch coordinates (x, y, z) of a state, or of a traceless increment.

    Inverse of Φ(x, y, z) = ½(1+x, y+iz; y−iz, 1−x) on its linear part.
    """
    out = np.empty(a.shape[:-2] + (3,))
    out[..., 0] = (a[..., 0, 0] - a[..., 1, 1]).real
    out[..., 1] = 2.0 * a[..., 0, 1].real
    out[..., 2] = 2.0 * a[..., 0, 1].imag
    return out


def bloch_matrices(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out = np.empty(v.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = 0.5 * (1.0 + x)
    out[..., 0, 1] = 0.5 * (y + 1j * z)
    out[..., 1, 0] = 0.5 * (y - 1j * z)
    out[..., 1, 1] = 0.5 * (1.0 - x)
    return out


def state_violations(rho: np.ndarray) -> np.ndarray:
    """Boolean mask of stacked matrices that fail the qubit-state invariants."""
    herm = hermiticity_error(rho) > TOL_HERMITIAN
    tr = np.abs(trace(rho) - 1.0) > TOL_TRACE
    low, _ = hermitian_eigvalsh(rho)
    neg = low < -TOL_POSITIVE
    big = np.max(np.abs(rho), axis=(-2, -1)) > 1.0
    return herm | tr | neg | big


def describe_violation(rho: Matrix2) -> Optional[str]:
    if hermiticity_error(rho) > TOL_HERMITIAN:
        return f"state is not Hermitian (error {float(hermiticity_error(rho)):.3g})"
    tr = trace(rho)
    if abs(tr - 1.0) > TOL_TRACE:
        return f"state trace deviates from 1 (trace {tr:.17g})"
    low, _ = hermitian_eigvalsh(rho)
    if low < -TOL_POSITIVE:
        return f"state is not positive semidefinite (smallest eigenvalue {float(low):.3g})"
    if np.max(np.abs(rho)) > 1.0:
        return "state has an entry of magnitude above 1"
    return None


@dataclass(frozen=True, eq=False)
class QubitState:
    matrix: Matrix2

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=complex)
        if m.shape != (2, 2) or not np.all(np.isfinite(m)):
            raise StateValidationError(f"state must be a finite 2x2 matrix, got shape {m.shape}")
        problem = describe_violation(m)
        if problem is not None:
            raise StateValidationError(problem)
        m.setflags(write=False)
        object.__setattr__(self, 'matrix', m)

    @classmethod
    def ground(cls) -> Self:
        return cls(GROUND)

    @classmethod
    def excited(cls) -> Self:
        return cls(EXCITED)

    def purity(self) -> float:
        return float(trace(mul(self.matrix, self.matrix)).real)

    def allclose(self, other: 'QubitState', atol: float = TOL_ROUNDTRIP) -> bool:
        return bool(np.max(np.abs(self.matrix - other.matrix)) <= atol)


@dataclass(frozen=True)
class BlochVector:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if self.norm() > 1.0 + TOL_BALL:
            raise OutOfBallError(f"Bloch vector {self.as_tuple()} lies outside the unit ball")

    @classmethod
    def from_array(cls, v: np.ndarray) -> Self:
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple())

    def norm(self) -> float:
        return float(np.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2))


def to_bloch(rho: QubitState) -> BlochVector:
    if not isinstance(rho, QubitState):
        rho = QubitState(rho)
    v = bloch_coords(rho.matrix)
    n = float(np.linalg.norm(v))
    # |v| = Tr ρ − 2 λ_min, so a validated state overshoots the ball by rounding only.
    if n > 1.0 + 2.0 * TOL_POSITIVE + TOL_TRACE:
        raise OutOfBallError(f"State maps outside the unit ball (norm {n:.17g})")
    if n > 1.0:
        v = v / n
    return BlochVector.from_array(v)


def from_bloch(v: BlochVector) -> QubitState:
    arr = v.as_array() if isinstance(v, BlochVector) else np.asarray(v, dtype=float)
    n = float(np.linalg.norm(arr))
    if n > 1.0 + TOL_BALL:
        raise OutOfBallError(f"Bloch vector {tuple(arr)} lies outside the unit ball (norm {n:.17g})")
    if n > 1.0:
        arr = arr / n
    return QubitState(bloch_matrices(arr))


def truncate(b: np.ndarray, k: float) -> np.ndarray:
    """Clamp the real and imaginary part of every entry to [-k, k]."""
    if k <= 0:
        raise QcoreException(f"Truncation level must be positive, got {k}")
    b = np.asarray(b, dtype=complex)
    return np.clip(b.real, -k, k) + 1j * np.clip(b.imag, -k, k)


def repair_states(rho: np.ndarray, tol: float) -> np.ndarray:
    """Clip eigenvalues to [0, 1] and renormalize, for a stack of nearly valid states.

    Matrices that already satisfy the state invariants are returned untouched.
    Raises NumericalDriftError when any matrix is farther than ``tol`` from a state.
    """
    rho = np.asarray(rho, dtype=complex)
    if not np.all(np.isfinite(rho)):
        raise NumericalDriftError("state has non-finite entries; reduce the step size")
    herm_err = hermiticity_error(rho)
    tr = trace(rho).real
    low, high = hermitian_eigvalsh(rho)

    if np.any(herm_err > tol):
        raise NumericalDriftError(
            f"state drifted from Hermitian by {float(np.max(herm_err)):.3g} (tolerance {tol:.3g}); reduce the step size")
    if np.any(np.abs(tr - 1.0) > tol):
        raise NumericalDriftError(
            f"state trace drifted by {float(np.max(np.abs(tr - 1.0))):.3g} (tolerance {tol:.3g}); reduce the step size")
    if np.any(low < -tol):
        raise NumericalDriftError(
            f"state eigenvalue reached {float(np.min(low)):.3g} (tolerance {tol:.3g}); reduce the step size")

    bad = state_violations(rho)
    if not np.any(bad):
        return rho

    herm = 0.5 * (rho + dag(rho))
    lo = np.clip(low, 0.0, 1.0)
    hi = np.clip(high, 0.0, 1.0)
    total = lo + hi
    lo = lo / total
    hi = hi / total

    mean = 0.5 * (herm[..., 0, 0].real + herm[..., 1, 1].real)
    spread = 0.5 * (high - low)
    centered = herm - scale(mean, IDENTITY)
    with np.errstate(divide='ignore', invalid='ignore'):
        gain = np.where(spread > 0.0, 0.5 * (hi - lo) / spread, 0.0)
    repaired = scale(0.5 * (hi + lo), IDENTITY) + scale(gain, centered)
    # Exact trace and Hermitian symmetry.
    repaired[..., 1, 0] = np.conj(repaired[..., 0, 1])
    top = np.clip(repaired[..., 0, 0].real, 0.0, 1.0)
    repaired[..., 0, 0] = top
    repaired[..., 1, 1] = 1.0 - top

    return np.where(bad[..., None, None], repaired, rho)


def psd_repair(rho: Matrix2, tol: float) -> QubitState:
    return QubitState(repair_states(np.asarray(rho, dtype=complex), tol))


def sample_bloch_ball(rng: np.random.Generator, size: int, pure: bool = False) -> np.ndarray:
    """Uniform points of the Bloch ball (or sphere), shape (size, 3)."""
    v = rng.normal(size=(size, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if not pure:
        v *= rng.random(size)[:, None] ** (1.0 / 3.0)
    return v


def random_states(rng: np.random.Generator, size: int, pure: bool = False) -> np.ndarray:
    return bloch_matrices(sample_bloch_ball(rng, size, pure))
