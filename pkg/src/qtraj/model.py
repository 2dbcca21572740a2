from dataclasses import dataclass, field
from enum import Enum
import json
import pathlib
from typing import Any, Callable, Dict, Optional, Tuple, Union
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np

from .const import EPS_RATE, TOL_HERMITIAN, TOL_ROUNDTRIP
from .qcore import (
    EXCITED, GROUND, IDENTITY, NAMED_MATRICES, Matrix2, QcoreException, QubitState,
    anticommutator, bloch_matrices, commutator, dag, hermiticity_error, lambda_max, mul, sandwich, scale,
    trace,
)


class ModelException(Exception):
    pass


# (t, u) -> stack of 2x2 matrices shaped u.shape + (2, 2)
OperatorFamily = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ControlInterval:
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or self.lower > self.upper:
            raise ModelException(f"Invalid control interval [{self.lower}, {self.upper}]")

    def contains(self, u: Union[float, np.ndarray]) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all((u >= self.lower - TOL_HERMITIAN) & (u <= self.upper + TOL_HERMITIAN)))

    def clip(self, u: Union[float, np.ndarray]) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def grid(self, points: int) -> np.ndarray:
        if points < 1:
            raise ModelException("Control grid needs at least one point")
        if points == 1:
            return np.array([0.5 * (self.lower + self.upper)])
        return np.linspace(self.lower, self.upper, points)


def constant_family(m: Matrix2) -> OperatorFamily:
    m = np.asarray(m, dtype=complex)

    def family(t: float, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(m, np.shape(u) + (2, 2))

    return family


def linear_family(m0: Matrix2, m1: Matrix2) -> OperatorFamily:
    """u ↦ m0 + u·m1."""
    m0 = np.asarray(m0, dtype=complex)
    m1 = np.asarray(m1, dtype=complex)

    def family(t: float, u: np.ndarray) -> np.ndarray:
        return m0 + scale(np.asarray(u, dtype=float), m1)

    return family


def _parse_scalar(value: Any) -> complex:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ModelException(f"Complex numbers are written as [re, im], got {value!r}")
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, (int, float)):
        return complex(value)
    raise ModelException(f"Bad matrix entry: {value!r}")


def parse_matrix(value: Any) -> Matrix2:
    """A 2x2 matrix from JSON: a name, a nested list, or {"scale": s, "matrix": m}."""
    if isinstance(value, str):
        try:
            return NAMED_MATRICES[value].copy()
        except KeyError:
            raise ModelException(f"Unknown matrix name {value!r}; known: {sorted(NAMED_MATRICES)}") from None
    if isinstance(value, dict):
        if 'matrix' not in value:
            raise ModelException(f"Matrix object needs a 'matrix' key: {value!r}")
        return _parse_scalar(value.get('scale', 1.0)) * parse_matrix(value['matrix'])
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(r, (list, tuple)) for r in value):
        rows = [[_parse_scalar(x) for x in row] for row in value]
        if any(len(r) != 2 for r in rows):
            raise ModelException(f"Matrix must be 2x2: {value!r}")
        return np.array(rows, dtype=complex)
    raise ModelException(f"Bad matrix: {value!r}")


def parse_family(doc: Any, prefix: str) -> OperatorFamily:
    """H or C as a constant matrix or a named parametric family."""
    if not isinstance(doc, dict) or 'form' not in doc:
        return constant_family(parse_matrix(doc))

    form = doc['form']
    try:
        if form == 'constant':
            return constant_family(parse_matrix(doc.get('matrix', doc.get(f'{prefix}0'))))
        elif form == 'linear':
            return linear_family(parse_matrix(doc[f'{prefix}0']), parse_matrix(doc[f'{prefix}1']))
    except KeyError as ex:
        raise ModelException(f"Form {form!r} of {prefix} is missing {ex}") from None
    raise ModelException(f"Unknown form {form!r} for {prefix}; expected 'constant' or 'linear'")


@dataclass(frozen=True)
class ModelSpec:
    hamiltonian: OperatorFamily
    coupling: OperatorFamily
    controls: ControlInterval = ControlInterval(0.0, 0.0)
    continuous: bool = True
    name: str = 'model'
    document: Dict[str, Any] = field(default_factory=dict)

    def H(self, t: float, u: Union[float, np.ndarray]) -> np.ndarray:
        return self.hamiltonian(t, np.asarray(u, dtype=float))

    def C(self, t: float, u: Union[float, np.ndarray]) -> np.ndarray:
        return self.coupling(t, np.asarray(u, dtype=float))

    @classmethod
    def constant(cls, H: Matrix2, C: Matrix2, name: str = 'constant', **kwargs) -> Self:
        return cls(constant_family(H), constant_family(C), name=name, **kwargs)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> Self:
        if 'H' not in doc or 'C' not in doc:
            raise ModelException("Model needs both 'H' and 'C'")
        bounds = doc.get('controls', [0.0, 0.0])
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            raise ModelException(f"'controls' must be [u_min, u_max], got {bounds!r}")
        model = cls(
            hamiltonian=parse_family(doc['H'], 'H'),
            coupling=parse_family(doc['C'], 'C'),
            controls=ControlInterval(float(bounds[0]), float(bounds[1])),
            continuous=bool(doc.get('continuous', True)),
            name=str(doc.get('name', 'model')),
            document=doc,
        )
        model.check_hermitian()
        return model

    def check_hermitian(self, times: int = 5, controls: int = 5) -> None:
        us = self.controls.grid(controls)
        for t in np.linspace(0.0, 1.0, times):
            err = hermiticity_error(self.H(float(t), us))
            if np.any(err > TOL_HERMITIAN):
                raise ModelException(f"H(t={t:g}, u) is not Hermitian (error {float(np.max(err)):.3g})")


class ObservableKind(Enum):
    DIAGONAL = 'diagonal'
    NONDIAGONAL = 'nondiagonal'


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    P0: Matrix2
    P1: Matrix2
    eigenvalues: Tuple[float, float] = (0.0, 1.0)
    kind: ObservableKind = ObservableKind.DIAGONAL
    alpha: Optional[float] = None

    def __post_init__(self) -> None:
        for name, p in (('P0', self.P0), ('P1', self.P1)):
            if np.max(np.abs(mul(p, p) - p)) > TOL_ROUNDTRIP or hermiticity_error(p) > TOL_ROUNDTRIP:
                raise ModelException(f"{name} is not an orthogonal projector")
        if np.max(np.abs(self.P0 + self.P1 - IDENTITY)) > TOL_ROUNDTRIP:
            raise ModelException("Eigenprojectors do not sum to the identity")
        if self.eigenvalues[0] == self.eigenvalues[1]:
            raise ModelException("Observable eigenvalues must differ")
        if self.kind is ObservableKind.NONDIAGONAL:
            if abs(self.P0[0, 0]) <= TOL_ROUNDTRIP or abs(self.P1[0, 0]) <= TOL_ROUNDTRIP:
                raise ModelException(
                    "Non-diagonal observable is degenerate: both (P0)00 and (P1)00 must be nonzero")

    @classmethod
    def diagonal(cls, l0: float = 0.0, l1: float = 1.0) -> Self:
        return cls(GROUND.copy(), EXCITED.copy(), (l0, l1), ObservableKind.DIAGONAL)

    @classmethod
    def nondiagonal(cls, alpha: float = np.pi / 4, l0: float = 0.0, l1: float = 1.0) -> Self:
        if not 0.0 < alpha < np.pi / 2:
            raise ModelException(f"Observable angle must lie in (0, π/2), got {alpha}")
        c, s = np.cos(alpha), np.sin(alpha)
        p0 = np.array([[c * c, c * s], [c * s, s * s]], dtype=complex)
        return cls(p0, IDENTITY - p0, (l0, l1), ObservableKind.NONDIAGONAL, alpha)

    @classmethod
    def from_dict(cls, doc: Union[str, Dict[str, Any]]) -> Self:
        if isinstance(doc, str):
            doc = {'kind': doc}
        kind = doc.get('kind', 'diagonal')
        eig = doc.get('eigenvalues', [0.0, 1.0])
        if kind == ObservableKind.DIAGONAL.value:
            return cls.diagonal(float(eig[0]), float(eig[1]))
        elif kind == ObservableKind.NONDIAGONAL.value:
            return cls.nondiagonal(float(doc.get('alpha', np.pi / 4)), float(eig[0]), float(eig[1]))
        raise ModelException(f"Unknown observable kind {kind!r}")

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {'kind': self.kind.value, 'eigenvalues': list(self.eigenvalues)}
        if self.alpha is not None:
            doc['alpha'] = self.alpha
        return doc


def parse_initial_state(value: Any) -> Matrix2:
    """Initial state from JSON: a matrix name, a Bloch vector [x, y, z], or a matrix."""
    if isinstance(value, (list, tuple)) and len(value) == 3:
        m = bloch_matrices(np.array(value, dtype=float))
    else:
        m = parse_matrix(value)
    try:
        return QubitState(m).matrix.copy()
    except QcoreException as ex:
        raise ModelException(f"Invalid initial state: {ex}") from None


@dataclass(frozen=True)
class ModelDocument:
    model: ModelSpec
    observable: ObservableSpec
    rho0: Matrix2


def load_model(path: Union[str, pathlib.Path]) -> ModelDocument:
    try:
        with open(path, encoding='utf-8') as fd:
            doc = json.load(fd)
    except OSError as ex:
        raise ModelException(f"Could not read the model file: {ex}") from None
    except ValueError as ex:
        raise ModelException(f"Model file is not valid JSON: {ex}") from None

    return ModelDocument(
        model=ModelSpec.from_dict(doc),
        observable=ObservableSpec.from_dict(doc.get('observable', 'diagonal')),
        rho0=parse_initial_state(doc.get('rho0', 'excited')),
    )


@dataclass(frozen=True, eq=False)
class UnitaryBlocks:
    """Blocks L_ij of the interaction unitary in the basis Ω⊗Ω, X⊗Ω, Ω⊗X, X⊗X.

    The environment index selects the block, so U[2i + a, 2j + b] = L_ij[a, b].
    """
    L00: np.ndarray
    L01: np.ndarray
    L10: np.ndarray
    L11: np.ndarray

    @classmethod
    def from_matrix(cls, u: np.ndarray) -> Self:
        return cls(u[..., 0:2, 0:2], u[..., 0:2, 2:4], u[..., 2:4, 0:2], u[..., 2:4, 2:4])

    def assemble(self) -> np.ndarray:
        top = np.concatenate([self.L00, self.L01], axis=-1)
        bottom = np.concatenate([self.L10, self.L11], axis=-1)
        return np.concatenate([top, bottom], axis=-2)

    def unitarity_error(self) -> float:
        u = self.assemble()
        eye = np.eye(4)
        return float(np.max(np.abs(np.conj(np.swapaxes(u, -1, -2)) @ u - eye)))


def polar_unitary(a: np.ndarray) -> np.ndarray:
    """Closest unitary (polar factor) of each matrix in a stack."""
    w, _, vh = np.linalg.svd(a)
    return w @ vh


def build_unitary(h: float, t: float, u: Union[float, np.ndarray], model: ModelSpec) -> UnitaryBlocks:
    if not 0.0 < h <= 1.0:
        raise ModelException(f"Time step must lie in (0, 1], got {h}")

    H = model.H(t, u)
    C = model.C(t, u)
    err = hermiticity_error(H)
    if np.any(err > TOL_HERMITIAN):
        raise ModelException(f"H(t={t:g}, u) is not Hermitian (error {float(np.max(err)):.3g})")

    CdC = mul(dag(C), C)
    CCd = mul(C, dag(C))
    sqrt_h = np.sqrt(h)
    first_order = UnitaryBlocks(
        L00=IDENTITY + h * (-1j * H - 0.5 * CdC),
        L01=-sqrt_h * dag(C),
        L10=sqrt_h * C,
        L11=IDENTITY + h * (-1j * H - 0.5 * CCd),
    )
    return UnitaryBlocks.from_matrix(polar_unitary(first_order.assemble()))


def apply_branches(blocks: UnitaryBlocks, obs: ObservableSpec, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized post-measurement states (ℒ₀(ρ), ℒ₁(ρ)) for reference state |Ω><Ω|.

    ℒᵢ(ρ) = Σ_ab (Pᵢ)_ba L_a0 ρ L_b0*.
    """
    cols = (blocks.L00, blocks.L10)
    left = [mul(c, rho) for c in cols]
    terms = [[mul(left[a], dag(cols[b])) for b in range(2)] for a in range(2)]

    out = []
    for p in (obs.P0, obs.P1):
        acc = p[0, 0] * terms[0][0]
        acc = acc + p[1, 0] * terms[0][1]
        acc = acc + p[0, 1] * terms[1][0]
        acc = acc + p[1, 1] * terms[1][1]
        out.append(acc)
    return out[0], out[1]


def effect_operators(blocks: UnitaryBlocks, obs: ObservableSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Effects Eᵢ with Tr ℒᵢ(ρ) = Tr[ρ Eᵢ]."""
    cols = (blocks.L00, blocks.L10)
    out = []
    for p in (obs.P0, obs.P1):
        acc = 0
        for a in range(2):
            for b in range(2):
                acc = acc + p[b, a] * mul(dag(cols[b]), cols[a])
        out.append(acc)
    return out[0], out[1]


def measurement_superops(
        blocks: UnitaryBlocks, obs: ObservableSpec,
) -> Tuple[Callable[[QubitState], Matrix2], Callable[[QubitState], Matrix2]]:
    def branch(i: int) -> Callable[[QubitState], Matrix2]:
        def apply(rho: Union[QubitState, Matrix2]) -> Matrix2:
            m = rho.matrix if isinstance(rho, QubitState) else np.asarray(rho, dtype=complex)
            return apply_branches(blocks, obs, m)[i]
        return apply

    return branch(0), branch(1)


def lindblad(H: np.ndarray, C: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return -1j * commutator(H, rho) - 0.5 * anticommutator(mul(dag(C), C), rho) + sandwich(C, rho)


def innovation(C: np.ndarray, rho: np.ndarray) -> np.ndarray:
    drive = mul(C, rho) + mul(rho, dag(C))
    return drive - scale(trace(drive).real, rho)


def jump_update(J: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """J/Tr[J] − ρ where the rate exceeds EPS_RATE, else 0."""
    rate = trace(J).real
    on = rate > EPS_RATE
    safe = np.where(on, rate, 1.0)
    return np.where(on[..., None, None], scale(1.0 / safe, J) - rho, 0.0)


def superop_J(model: ModelSpec, t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
    return sandwich(model.C(t, u), rho)


def superop_L(model: ModelSpec, t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
    return lindblad(model.H(t, u), model.C(t, u), rho)


def superop_Theta(model: ModelSpec, t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
    return innovation(model.C(t, u), rho)


def superop_R(model: ModelSpec, t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
    J = superop_J(model, t, u, rho)
    return superop_L(model, t, u, rho) + scale(trace(J).real, rho) - J


def superop_Q(model: ModelSpec, t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> np.ndarray:
    return jump_update(superop_J(model, t, u, rho), rho)


def rate_bound(model: ModelSpec, t: float, u: Union[float, np.ndarray]) -> np.ndarray:
    """λ_max(C*C), the largest Tr[J(t, u, ρ)] over states."""
    C = model.C(t, u)
    return lambda_max(mul(dag(C), C))
