"""Resonance fluorescence: an atom driven by a laser and watched by a photon counter.

The environment of each interaction is laser ⊗ counter, so the 8x8 interaction unitary has
blocks L_uv indexed by u = laser + 2·counter, and U[a + 2u, b + 2v] = L_uv[a, b].
"""

import csv
from dataclasses import dataclass
import math
import pathlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np

from .const import REPAIR_FACTOR, TOL_HERMITIAN, TOL_ROUNDTRIP
from .continuous import JumpDynamics, JumpPath, PathEnsemble, run_jump_ensemble
from .discrete import DiscreteEnsemble, DiscreteTrajectory, Strategy, run_ensemble
from .model import ControlInterval, polar_unitary
from .qcore import (
    IDENTITY, SIGMA_MINUS, ZERO, Matrix2, QubitState, anticommutator, commutator, dag, hermiticity_error, lambda_max,
    mul, sandwich, scale, trace,
)


class FluorescenceException(Exception):
    pass


@dataclass(frozen=True)
class LaserProfile:
    """Laser intensity envelope f(t), complex, in units of √rate."""
    envelope: Callable[[float], complex]
    bound: float
    description: str = 'laser'

    def __call__(self, t: float) -> complex:
        return complex(self.envelope(t))

    @classmethod
    def constant(cls, value: complex) -> Self:
        return cls(lambda t: value, abs(value), f'const:{value:g}')

    @classmethod
    def sine(cls, amplitude: float, frequency: float) -> Self:
        """f(t) = amplitude · sin(frequency · t)."""
        return cls(lambda t: amplitude * math.sin(frequency * t), abs(amplitude), f'sin:{amplitude:g}:{frequency:g}')

    @classmethod
    def table(cls, path: Union[str, pathlib.Path]) -> Self:
        """Rows (t, Re f, Im f), linearly interpolated and held constant outside the table."""
        try:
            with open(path, encoding='utf-8', newline='') as fd:
                rows = [row for row in csv.reader(fd) if row and not row[0].lstrip().startswith('#')]
        except OSError as ex:
            raise FluorescenceException(f"Could not read the laser table: {ex}") from None

        try:
            values = np.array([[float(x) for x in row[:3]] for row in rows if _is_number(row[0])])
        except (ValueError, IndexError):
            raise FluorescenceException(f"Laser table {path} must have columns t, Re f, Im f") from None
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] != 3:
            raise FluorescenceException(f"Laser table {path} must have columns t, Re f, Im f")
        if np.any(np.diff(values[:, 0]) <= 0):
            raise FluorescenceException(f"Laser table {path} times must be strictly increasing")

        ts, re, im = values[:, 0], values[:, 1], values[:, 2]
        return cls(
            lambda t: complex(np.interp(t, ts, re), np.interp(t, ts, im)),
            float(np.max(np.hypot(re, im))),
            f'table:{path}',
        )

    @classmethod
    def parse(cls, spec: str) -> Self:
        """'const:<v>', 'sin:<amp>:<freq>' or the path of a CSV table."""
        parts = spec.split(':')
        try:
            if parts[0] == 'const' and len(parts) == 2:
                return cls.constant(float(parts[1]))
            elif parts[0] == 'sin' and len(parts) == 3:
                return cls.sine(float(parts[1]), float(parts[2]))
        except ValueError:
            raise FluorescenceException(f"Bad laser profile {spec!r}") from None
        if parts[0] in ('const', 'sin'):
            raise FluorescenceException(f"Bad laser profile {spec!r}; expected 'const:<v>' or 'sin:<amp>:<freq>'")
        return cls.table(spec)

    def check(self, T: float, points: int = 1001) -> None:
        values = np.array([self(t) for t in np.linspace(0.0, T, points)])
        if not np.all(np.isfinite(values)):
            raise FluorescenceException(f"Laser profile {self.description} is not finite on [0, {T:g}]")
        if np.max(np.abs(values)) > self.bound + TOL_ROUNDTRIP:
            raise FluorescenceException(f"Laser profile {self.description} exceeds its bound {self.bound:g}")


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


@dataclass(frozen=True, eq=False)
class FluorescenceModel:
    """Atom Hamiltonian H with laser (L10) and counter (L20) channel couplings.

    The remaining first-order blocks are fixed: L01 = −L10*, L02 = −L20*, and L11, L21, L31, L30 vanish.
    """
    H: Matrix2
    L10: Matrix2
    L20: Matrix2
    name: str = 'fluorescence'

    def __post_init__(self) -> None:
        for label in ('H', 'L10', 'L20'):
            m = np.asarray(getattr(self, label), dtype=complex)
            if m.shape != (2, 2) or not np.all(np.isfinite(m)):
                raise FluorescenceException(f"{label} must be a finite 2x2 matrix")
            object.__setattr__(self, label, m)
        if hermiticity_error(self.H) > TOL_HERMITIAN:
            raise FluorescenceException("H is not Hermitian")

    @classmethod
    def sigma_minus(cls, k_l: complex, k_c: complex, H: Optional[Matrix2] = None) -> Self:
        """L10 = k_l σ⁻, L20 = k_c σ⁻ with decay rates |k_l|² + |k_c|² = 1."""
        if abs(abs(k_l) ** 2 + abs(k_c) ** 2 - 1.0) > TOL_ROUNDTRIP:
            raise FluorescenceException(f"Decay rates must satisfy |k_l|² + |k_c|² = 1, got {k_l}, {k_c}")
        return cls(ZERO.copy() if H is None else H, k_l * SIGMA_MINUS, k_c * SIGMA_MINUS, 'sigma_minus')

    @classmethod
    def from_blocks(cls, H: Matrix2, blocks: Dict[str, Matrix2]) -> Self:
        """Builds the model from named first-order blocks, checking the channel constraints."""
        L10 = np.asarray(blocks.get('L10', ZERO), dtype=complex)
        L20 = np.asarray(blocks.get('L20', ZERO), dtype=complex)
        if 'L01' in blocks and np.max(np.abs(np.asarray(blocks['L01']) + dag(L10))) > TOL_ROUNDTRIP:
            raise FluorescenceException("Constraint violated: L01 must equal −L10*")
        if 'L02' in blocks and np.max(np.abs(np.asarray(blocks['L02']) + dag(L20))) > TOL_ROUNDTRIP:
            raise FluorescenceException("Constraint violated: L02 must equal −L20*")
        for label in ('L11', 'L21', 'L31', 'L30'):
            if label in blocks and np.max(np.abs(np.asarray(blocks[label]))) > TOL_ROUNDTRIP:
                raise FluorescenceException(f"Constraint violated: {label} must vanish")
        unknown = set(blocks) - {'L10', 'L20', 'L01', 'L02', 'L11', 'L21', 'L31', 'L30'}
        if unknown:
            raise FluorescenceException(f"Unknown blocks: {sorted(unknown)}")
        return cls(H, L10, L20)

    def dissipator(self) -> Matrix2:
        return mul(dag(self.L10), self.L10) + mul(dag(self.L20), self.L20)


def laser_state(hval: complex) -> QubitState:
    """(1/(1+|h|²))·(1, h; h̄, |h|²)."""
    w = abs(hval) ** 2
    m = np.array([[1.0, hval], [np.conj(hval), w]], dtype=complex) / (1.0 + w)
    return QubitState(m)


def build_fluorescence_unitary(h: float, m: FluorescenceModel) -> np.ndarray:
    """The 8x8 interaction unitary for step h, returned as blocks shaped (4, 4, 2, 2)."""
    if not 0.0 < h <= 1.0:
        raise FluorescenceException(f"Time step must lie in (0, 1], got {h}")
    sqrt_h = math.sqrt(h)
    H, A, B = m.H, m.L10, m.L20
    Ad, Bd = dag(A), dag(B)
    drift = -1j * H

    blocks = np.zeros((4, 4, 2, 2), dtype=complex)
    blocks[0, 0] = IDENTITY + h * (drift - 0.5 * m.dissipator())
    blocks[1, 0] = sqrt_h * A
    blocks[2, 0] = sqrt_h * B
    blocks[0, 1] = -sqrt_h * Ad
    blocks[0, 2] = -sqrt_h * Bd
    blocks[1, 1] = IDENTITY + h * (drift - 0.5 * mul(A, Ad))
    blocks[2, 2] = IDENTITY + h * (drift - 0.5 * mul(B, Bd))
    blocks[1, 2] = -0.5 * h * mul(A, Bd)
    blocks[2, 1] = -0.5 * h * mul(B, Ad)
    blocks[3, 3] = IDENTITY + h * drift

    u = polar_unitary(assemble_blocks(blocks))
    return split_blocks(u)


def assemble_blocks(blocks: np.ndarray) -> np.ndarray:
    size = blocks.shape[0]
    return blocks.transpose(0, 2, 1, 3).reshape(2 * size, 2 * size)


def split_blocks(u: np.ndarray) -> np.ndarray:
    size = u.shape[0] // 2
    return u.reshape(size, 2, size, 2).transpose(0, 2, 1, 3)


def fluorescence_branches(blocks: np.ndarray, hval: complex, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(ℒ₀(ρ), ℒ₁(ρ)) for the counter outcome, the laser traced out.

    X_uv = (a L_u0 ρ + b L_u1 ρ) L_v0* + (c L_u0 ρ + d L_u1 ρ) L_v1* with (a, b; c, d) the laser state,
    so the coherence b multiplies L_u1 ρ L_v0*.
    """
    beta = laser_state(hval).matrix.T
    left = [[mul(blocks[u, w], rho) for w in range(2)] for u in range(4)]

    def diagonal(u: int) -> np.ndarray:
        acc = 0
        for w in range(2):
            for v in range(2):
                if beta[w, v] != 0:
                    acc = acc + beta[w, v] * mul(left[u][w], dag(blocks[u, v]))
        return acc + np.zeros_like(rho)

    return diagonal(0) + diagonal(1), diagonal(2) + diagonal(3)


def fluorescence_superops(
        k: int, n: int, f: LaserProfile, m: FluorescenceModel,
) -> Tuple[Callable[[QubitState], Matrix2], Callable[[QubitState], Matrix2]]:
    blocks = build_fluorescence_unitary(1.0 / n, m)
    hval = f(k / n) / math.sqrt(n)

    def branch(i: int) -> Callable[[QubitState], Matrix2]:
        def apply(rho: Union[QubitState, Matrix2]) -> Matrix2:
            mat = rho.matrix if isinstance(rho, QubitState) else np.asarray(rho, dtype=complex)
            return fluorescence_branches(blocks, hval, mat)[i]
        return apply

    return branch(0), branch(1)


NO_CONTROL = Strategy.constant(0.0)
NO_CONTROL_INTERVAL = ControlInterval(0.0, 0.0)


def simulate_fluorescence_ensemble(
        m: FluorescenceModel, f: LaserProfile, n: int, T: float, rho0: Union[QubitState, Matrix2, None],
        samples: int, seed: int, record_steps: Optional[Sequence[int]] = None, threads: Optional[int] = None,
        progress: Optional[str] = None,
) -> DiscreteEnsemble:
    f.check(T)
    blocks = build_fluorescence_unitary(1.0 / n, m)
    scale_h = 1.0 / math.sqrt(n)

    def branches(t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return fluorescence_branches(blocks, f(t) * scale_h, rho)

    return run_ensemble(
        branches, NO_CONTROL, NO_CONTROL_INTERVAL, n, T, samples, seed, rho0, label='fluorescence',
        record_steps=record_steps, threads=threads, progress=progress,
    )


def simulate_fluorescence_discrete(
        m: FluorescenceModel, f: LaserProfile, n: int, T: float, rho0: Union[QubitState, Matrix2, None], seed: int,
) -> DiscreteTrajectory:
    return simulate_fluorescence_ensemble(m, f, n, T, rho0, 1, seed, threads=1).trajectory(0)


def fluorescence_dynamics(m: FluorescenceModel, f: LaserProfile) -> JumpDynamics:
    """R_fl(ρ) = −i[H,ρ] − ½{ΣL*L, ρ} + L10 ρ L10* + [f̄ L10 − f L10*, ρ] + Tr[J_fl(ρ)]ρ,
    with J_fl(ρ) = L20 ρ L20*.
    """
    dissipator = m.dissipator()
    A, Ad = m.L10, dag(m.L10)

    def jump(t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
        return sandwich(m.L20, rho)

    def drift(t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
        ft = f(t)
        drive = np.conj(ft) * A - ft * Ad
        out = -1j * commutator(m.H, rho) - 0.5 * anticommutator(dissipator, rho) + sandwich(A, rho)
        out = out + commutator(drive, rho)
        return out + scale(trace(jump(t, u, rho)).real, rho)

    bound = 1.01 * float(lambda_max(mul(dag(m.L20), m.L20)))
    return JumpDynamics(drift, jump, bound, NO_CONTROL_INTERVAL, m.name)


def integrate_fluorescence_ensemble(
        m: FluorescenceModel, f: LaserProfile, rho0: Union[QubitState, Matrix2, None], T: float, ode_dt: float,
        samples: int, seed: int, record_steps: Optional[Sequence[int]] = None, repair_factor: float = REPAIR_FACTOR,
        threads: Optional[int] = None, progress: Optional[str] = None,
) -> PathEnsemble:
    f.check(T)
    return run_jump_ensemble(
        fluorescence_dynamics(m, f), NO_CONTROL, rho0, T, ode_dt, samples, seed, record_steps=record_steps,
        repair_factor=repair_factor, threads=threads, progress=progress, label='fluorescence-limit',
    )


def integrate_fluorescence_limit(
        m: FluorescenceModel, f: LaserProfile, rho0: Union[QubitState, Matrix2, None], T: float, seed: int,
        ode_dt: float = 1e-4,
) -> JumpPath:
    return integrate_fluorescence_ensemble(m, f, rho0, T, ode_dt, 1, seed, threads=1).jump_path(0)


@dataclass
class PhotonStatistics:
    histogram: Dict[int, int]
    mean: float
    variance: float
    samples: int

    def to_dict(self) -> Dict[str, object]:
        return {
            'histogram': {str(k): v for k, v in sorted(self.histogram.items())},
            'mean': self.mean,
            'variance': self.variance,
            'samples': self.samples,
        }


PhotonSource = Union[DiscreteEnsemble, PathEnsemble, Sequence[Union[JumpPath, DiscreteTrajectory]]]


def event_counts(paths: PhotonSource) -> np.ndarray:
    if isinstance(paths, (DiscreteEnsemble, PathEnsemble)):
        return np.asarray(paths.event_counts, dtype=np.int64)
    counts: List[int] = []
    for path in paths:
        if isinstance(path, JumpPath):
            counts.append(path.jump_count)
        elif isinstance(path, DiscreteTrajectory):
            counts.append(path.event_count())
        else:
            raise FluorescenceException(f"Cannot count photons of {type(path).__name__}")
    return np.array(counts, dtype=np.int64)


def photon_statistics(paths: PhotonSource) -> PhotonStatistics:
    counts = event_counts(paths)
    if len(counts) == 0:
        raise FluorescenceException("Photon statistics need at least one path")
    values, freq = np.unique(counts, return_counts=True)
    return PhotonStatistics(
        histogram={int(v): int(c) for v, c in zip(values, freq)},
        mean=float(np.mean(counts)),
        variance=float(np.var(counts, ddof=1)) if len(counts) > 1 else 0.0,
        samples=len(counts),
    )
