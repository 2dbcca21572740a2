"""Finite-horizon optimal control of the measured qubit.

V^N = φ and V^k(ρ) = min_u { p V^{k+1}(ρ₀) + q V^{k+1}(ρ₁) + c(k, ρ, u) }, where ρᵢ = ℒᵢ(ρ)/Tr ℒᵢ(ρ),
p = Tr ℒ₀(ρ) and q = Tr ℒ₁(ρ) for the interaction of step k with control u.
"""

from dataclasses import dataclass, field
import itertools
import json
import math
import pathlib
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .const import EPS_BRANCH
from .continuous import integrate_diffusive_ensemble, record_steps_for
from .discrete import Strategy, StrategyKind, simulate_chain_ensemble, state_matrix
from .model import ControlInterval, ModelSpec, ObservableSpec, apply_branches, build_unitary, innovation, lindblad
from .qcore import Matrix2, QubitState, bloch_coords, bloch_matrices, dag, scale, trace


class OptimalException(Exception):
    pass


# (stage or time, stack of states, control) -> cost per state
RunningCost = Callable[[float, np.ndarray, Union[float, np.ndarray]], np.ndarray]
# stack of states -> cost per state
TerminalCost = Callable[[np.ndarray], np.ndarray]


def _running_form(doc: Dict[str, Any]) -> RunningCost:
    form = doc.get('form', 'zero')
    if form == 'zero':
        return lambda k, rho, u: np.zeros(rho.shape[:-2])
    elif form == 'constant':
        value = float(doc['value'])
        return lambda k, rho, u: np.full(rho.shape[:-2], value)
    elif form == 'quadratic_control':
        weight = float(doc.get('weight', 1.0))
        return lambda k, rho, u: np.broadcast_to(weight * np.square(u), rho.shape[:-2]).astype(float)
    raise OptimalException(f"Unknown running cost form {form!r}; expected 'zero', 'constant' or 'quadratic_control'")


def _terminal_form(doc: Dict[str, Any]) -> TerminalCost:
    form = doc.get('form')
    if form == 'constant':
        value = float(doc['value'])
        return lambda rho: np.full(rho.shape[:-2], value)
    elif form == 'bloch_linear':
        offset = float(doc.get('offset', 0.0))
        weights = np.array(doc.get('weights', [0.0, 0.0, 0.0]), dtype=float)
        if weights.shape != (3,):
            raise OptimalException(f"'weights' must hold three numbers, got {doc.get('weights')!r}")
        return lambda rho: offset + bloch_coords(rho) @ weights
    elif form == 'one_minus_fidelity':
        target = np.array(doc.get('target', [1.0, 0.0, 0.0]), dtype=float)
        norm = float(np.linalg.norm(target)) if target.shape == (3,) else 0.0
        if norm == 0.0:
            raise OptimalException(f"'target' must be a nonzero Bloch vector, got {doc.get('target')!r}")
        target = target / norm
        return lambda rho: 1.0 - 0.5 * (1.0 + bloch_coords(rho) @ target)
    raise OptimalException(
        f"Unknown terminal cost form {form!r}; expected 'constant', 'bloch_linear' or 'one_minus_fidelity'")


@dataclass(frozen=True)
class CostSpec:
    running: RunningCost
    terminal: TerminalCost
    document: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> Self:
        try:
            running = _running_form(doc.get('running', {'form': 'zero'}))
            terminal = _terminal_form(doc['terminal'])
        except KeyError as ex:
            raise OptimalException(f"Cost is missing {ex}") from None
        except (TypeError, ValueError) as ex:
            raise OptimalException(f"Bad cost: {ex}") from None
        return cls(running, terminal, doc)

    @classmethod
    def from_json(cls, path: Union[str, pathlib.Path]) -> Self:
        try:
            with open(path, encoding='utf-8') as fd:
                return cls.from_dict(json.load(fd))
        except OSError as ex:
            raise OptimalException(f"Could not read the cost file: {ex}") from None
        except ValueError as ex:
            raise OptimalException(f"Cost file is not valid JSON: {ex}") from None

    def check(self, controls: np.ndarray, samples: int = 64) -> None:
        rng = np.random.default_rng(0)
        v = rng.normal(size=(samples, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= rng.random(samples)[:, None] ** (1.0 / 3.0)
        states = bloch_matrices(v)
        if not np.all(np.isfinite(self.terminal(states))):
            raise OptimalException("Terminal cost is not finite on the Bloch ball")
        for u in controls:
            if not np.all(np.isfinite(self.running(0, states, float(u)))):
                raise OptimalException(f"Running cost is not finite at u = {u:g}")


def control_grid(interval: ControlInterval, points: int) -> np.ndarray:
    return interval.grid(points)


def _check_controls(model: ModelSpec, controls: Sequence[float]) -> np.ndarray:
    grid = np.asarray(controls, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise OptimalException("Control grid must be a nonempty list of values")
    if np.any(np.diff(grid) <= 0):
        raise OptimalException("Control grid must be strictly increasing")
    if not model.controls.contains(grid):
        raise OptimalException(
            f"Control grid leaves the admissible interval [{model.controls.lower:g}, {model.controls.upper:g}]")
    return grid


@dataclass(frozen=True, eq=False)
class BlochGrid:
    """Cartesian grid over the cube [-1, 1]³; points outside the ball take their nearest inside value."""
    spacing: float
    axis: np.ndarray
    inside: np.ndarray
    points: np.ndarray
    nearest: np.ndarray

    @classmethod
    def cube(cls, spacing: float) -> Self:
        if not 0.0 < spacing <= 1.0:
            raise OptimalException(f"Grid spacing must lie in (0, 1], got {spacing}")
        cells = int(round(2.0 / spacing))
        if abs(cells * spacing - 2.0) > 1e-9:
            raise OptimalException(f"Grid spacing {spacing} does not divide [-1, 1]")
        axis = np.linspace(-1.0, 1.0, cells + 1)
        mesh = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
        inside = np.sum(mesh * mesh, axis=1) <= 1.0 + 1e-12
        points = mesh[inside]
        _, nearest = cKDTree(points).query(mesh)
        return cls(spacing, axis, inside.reshape((cells + 1,) * 3), points, nearest)

    @property
    def size(self) -> int:
        return len(self.points)

    def states(self) -> np.ndarray:
        return bloch_matrices(self.points)

    def filled(self, values: np.ndarray) -> np.ndarray:
        return values[self.nearest].reshape(self.inside.shape)

    def interpolator(self, values: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        table = RegularGridInterpolator((self.axis,) * 3, self.filled(values), method='linear')

        def interpolate(v: np.ndarray) -> np.ndarray:
            v = np.clip(np.asarray(v, dtype=float), -1.0, 1.0)
            return table(v.reshape(-1, 3)).reshape(v.shape[:-1])

        return interpolate

    def lipschitz(self, values: np.ndarray) -> float:
        """Largest difference quotient between neighboring points inside the ball."""
        full = self.filled(values)
        slope = 0.0
        for ax in range(3):
            diff = np.abs(np.diff(full, axis=ax))
            both = np.logical_and(
                np.take(self.inside, range(self.inside.shape[ax] - 1), axis=ax),
                np.take(self.inside, range(1, self.inside.shape[ax]), axis=ax),
            )
            if np.any(both):
                slope = max(slope, float(np.max(diff[both])) / self.spacing)
        return slope


@dataclass(frozen=True)
class NodeBranches:
    p: np.ndarray
    q: np.ndarray
    states0: np.ndarray
    states1: np.ndarray


def node_branches(
        model: ModelSpec, obs: ObservableSpec, n: int, k: int, u: float, rho: np.ndarray,
) -> NodeBranches:
    """Branch probabilities and post-measurement states; dead branches keep ρ."""
    l0, l1 = apply_branches(build_unitary(1.0 / n, k / n, u, model), obs, rho)
    p = trace(l0).real
    q = trace(l1).real

    def normalized(l: np.ndarray, prob: np.ndarray) -> np.ndarray:
        live = prob > EPS_BRANCH
        out = scale(1.0 / np.where(live, prob, 1.0), l)
        out = 0.5 * (out + dag(out))
        return np.where(live[..., None, None], out, rho)

    return NodeBranches(p, q, normalized(l0, p), normalized(l1, q))


def expected_cost(
        branches: NodeBranches, v0: np.ndarray, v1: np.ndarray, running: np.ndarray,
) -> np.ndarray:
    v0 = np.where(branches.p > EPS_BRANCH, v0, 0.0)
    v1 = np.where(branches.q > EPS_BRANCH, v1, 0.0)
    return branches.p * v0 + branches.q * v1 + running


@dataclass
class ValueGrid:
    horizon: int
    n: int
    grid: BlochGrid
    controls: np.ndarray
    values: np.ndarray
    policy: np.ndarray

    def value(self, k: int, v: np.ndarray) -> np.ndarray:
        return self.grid.interpolator(self.values[k])(v)

    def interpolation_budget(self) -> float:
        """δ times the slopes of the interpolated stages V^1 .. V^{N-1}."""
        return sum(self.grid.spacing * self.grid.lipschitz(self.values[k]) for k in range(1, self.horizon))

    def extract_policy(self, interval: ControlInterval) -> 'Policy':
        return Policy(self.grid, self.policy, interval, self.n)


@dataclass(frozen=True, eq=False)
class Policy:
    grid: BlochGrid
    table: np.ndarray
    interval: ControlInterval
    n: int

    def lookup(self, k: int, v: np.ndarray) -> np.ndarray:
        k = min(max(int(k), 0), self.table.shape[0] - 1)
        return self.interval.clip(self.grid.interpolator(self.table[k])(v))

    def as_strategy(self) -> Strategy:
        def law(t: float, rho: np.ndarray) -> np.ndarray:
            return self.lookup(int(round(t * self.n)), bloch_coords(rho))
        return Strategy.markovian(law, name='dp-policy', continuous=False)


def hjb_stage(
        model: ModelSpec, obs: ObservableSpec, cost: CostSpec, k: int, n: int, controls: np.ndarray,
        states: np.ndarray, next_value: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Candidate values, one row per control, of the stage-k minimization at the given states."""
    out = np.empty((len(controls), states.shape[0]))
    for j, u in enumerate(controls):
        b = node_branches(model, obs, n, k, float(u), states)
        out[j] = expected_cost(b, next_value(b.states0), next_value(b.states1), cost.running(k, states, float(u)))
    if not np.all(np.isfinite(out)):
        raise OptimalException(f"Cost is not finite at stage {k}")
    return out


def hjb_backward(
        model: ModelSpec, obs: ObservableSpec, cost: CostSpec, N: int, n: int, controls: Sequence[float],
        grid: BlochGrid,
) -> ValueGrid:
    if N < 1:
        raise OptimalException(f"Horizon must be at least 1 step, got {N}")
    controls = _check_controls(model, controls)
    cost.check(controls)

    states = grid.states()
    values = np.empty((N + 1, grid.size))
    policy = np.empty((N, grid.size))
    values[N] = cost.terminal(states)
    if not np.all(np.isfinite(values[N])):
        raise OptimalException("Terminal cost is not finite on the grid")

    for k in range(N - 1, -1, -1):
        if k == N - 1:
            def next_value(s: np.ndarray) -> np.ndarray:
                return cost.terminal(s)
        else:
            interpolate = grid.interpolator(values[k + 1])

            def next_value(s: np.ndarray) -> np.ndarray:
                return interpolate(bloch_coords(s))

        candidates = hjb_stage(model, obs, cost, k, n, controls, states, next_value)
        best = np.argmin(candidates, axis=0)
        values[k] = candidates[best, np.arange(grid.size)]
        policy[k] = controls[best]

    return ValueGrid(N, n, grid, controls, values, policy)


History = Tuple[int, ...]


class _Tree:
    """Exact outcome tree below ρ0, with the branch computations of each node cached."""

    def __init__(self, model: ModelSpec, obs: ObservableSpec, cost: CostSpec, N: int, n: int, controls: np.ndarray):
        self.model = model
        self.obs = obs
        self.cost = cost
        self.N = N
        self.n = n
        self.controls = controls
        self.cache: Dict[Tuple[int, int, bytes], Tuple[NodeBranches, float]] = {}

    def branches(self, k: int, j: int, rho: np.ndarray) -> Tuple[NodeBranches, float]:
        key = (k, j, rho.tobytes())
        if key not in self.cache:
            u = float(self.controls[j])
            b = node_branches(self.model, self.obs, self.n, k, u, rho[None])
            running = float(self.cost.running(k, rho[None], u)[0])
            if not math.isfinite(running):
                raise OptimalException(f"Running cost is not finite at stage {k}, u = {u:g}")
            self.cache[key] = (b, running)
        return self.cache[key]

    def terminal(self, rho: np.ndarray) -> float:
        value = float(self.cost.terminal(rho[None])[0])
        if not math.isfinite(value):
            raise OptimalException("Terminal cost is not finite")
        return value

    def combine(self, b: NodeBranches, v0: float, v1: float, running: float) -> float:
        return float(expected_cost(b, np.array([v0]), np.array([v1]), np.array([running]))[0])

    def optimal(self, k: int, rho: np.ndarray, history: History) -> Tuple[float, Dict[History, float]]:
        if k == self.N:
            return self.terminal(rho), {}
        best: Optional[Tuple[float, Dict[History, float]]] = None
        for j in range(len(self.controls)):
            b, running = self.branches(k, j, rho)
            v0, p0 = self.optimal(k + 1, b.states0[0], history + (0,)) if b.p[0] > EPS_BRANCH else (0.0, {})
            v1, p1 = self.optimal(k + 1, b.states1[0], history + (1,)) if b.q[0] > EPS_BRANCH else (0.0, {})
            value = self.combine(b, v0, v1, running)
            if best is None or value < best[0]:
                best = (value, {history: float(self.controls[j]), **p0, **p1})
        return best

    def evaluate(self, k: int, rho: np.ndarray, node: int, table: Sequence[int]) -> float:
        if k == self.N:
            return self.terminal(rho)
        b, running = self.branches(k, table[node], rho)
        v0 = self.evaluate(k + 1, b.states0[0], 2 * node + 1, table) if b.p[0] > EPS_BRANCH else 0.0
        v1 = self.evaluate(k + 1, b.states1[0], 2 * node + 2, table) if b.q[0] > EPS_BRANCH else 0.0
        return self.combine(b, v0, v1, running)


def node_history(node: int) -> History:
    """Outcome history of a node in heap order (children of i are 2i+1 and 2i+2)."""
    out: List[int] = []
    while node > 0:
        out.append((node - 1) % 2)
        node = (node - 1) // 2
    return tuple(reversed(out))


@dataclass
class TreeSolution:
    value: float
    policy: Dict[History, float]

    def as_strategy(self) -> Strategy:
        def law(k: int, outcomes: History) -> float:
            return self.policy.get(outcomes, next(iter(self.policy.values())))
        return Strategy.history(law, name='tree-policy')


def hjb_exact_tree(
        model: ModelSpec, obs: ObservableSpec, cost: CostSpec, N: int, n: int, controls: Sequence[float],
        rho0: Union[QubitState, Matrix2, None] = None,
) -> TreeSolution:
    """Dynamic programming on the exact reachable outcome tree of ρ0 (no grid)."""
    if N < 1:
        raise OptimalException(f"Horizon must be at least 1 step, got {N}")
    controls = _check_controls(model, controls)
    tree = _Tree(model, obs, cost, N, n, controls)
    value, policy = tree.optimal(0, state_matrix(rho0), ())
    return TreeSolution(value, policy)


BRUTE_FORCE_LIMIT = 10 ** 6


def brute_force_tree(
        model: ModelSpec, obs: ObservableSpec, cost: CostSpec, N: int, n: int, controls: Sequence[float],
        rho0: Union[QubitState, Matrix2, None] = None,
) -> TreeSolution:
    """Minimum expected cost over every outcome-history feedback strategy, by enumeration."""
    controls = _check_controls(model, controls)
    if not 1 <= N <= 4 or len(controls) > 3:
        raise OptimalException("Enumeration needs 1 <= N <= 4 and at most 3 controls")
    nodes = 2 ** N - 1
    if len(controls) ** nodes > BRUTE_FORCE_LIMIT:
        raise OptimalException(f"{len(controls)}^{nodes} strategies exceed the enumeration limit {BRUTE_FORCE_LIMIT}")

    tree = _Tree(model, obs, cost, N, n, controls)
    start = state_matrix(rho0)
    best_value = math.inf
    best_table: Tuple[int, ...] = (0,) * nodes
    for table in itertools.product(range(len(controls)), repeat=nodes):
        value = tree.evaluate(0, start, 0, table)
        if value < best_value:
            best_value, best_table = value, table

    return TreeSolution(best_value, {node_history(i): float(controls[j]) for i, j in enumerate(best_table)})


def evaluate_strategy_mc(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, cost: CostSpec, N: int, n: int, M: int, seed: int,
        rho0: Union[QubitState, Matrix2, None] = None, threads: Optional[int] = None,
) -> Tuple[float, float]:
    """Sample mean and standard error of Σ_k c(k, ρ_k, u_k) + φ(ρ_N) over M chains."""
    if M < 100:
        raise OptimalException(f"Monte Carlo evaluation needs at least 100 samples, got {M}")
    ens = simulate_chain_ensemble(model, obs, strategy, n, N / n, M, seed, rho0, threads=threads)
    if ens.states.shape[1] != N + 1:
        raise OptimalException(f"Expected {N} steps, simulated {ens.states.shape[1] - 1}")

    total = cost.terminal(ens.states[:, N])
    for k in range(N):
        total = total + cost.running(k, ens.states[:, k], ens.controls[:, k + 1])
    if not np.all(np.isfinite(total)):
        raise OptimalException("Cost is not finite along the simulated chains")
    mean = float(np.mean(total))
    se = float(np.std(total, ddof=1) / math.sqrt(M))
    return mean, se


@dataclass(frozen=True)
class ScalarField:
    """A scalar function on Bloch coordinates with its gradient and Hessian.

    Missing derivatives are taken by central finite differences with the given step.
    """
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    step: float = 1e-5
    name: str = 'field'

    @classmethod
    def constant(cls, c: float) -> Self:
        return cls(
            lambda v: np.full(v.shape[:-1], c),
            lambda v: np.zeros(v.shape),
            lambda v: np.zeros(v.shape + (3,)),
            name=f'const:{c:g}',
        )

    @classmethod
    def coordinate(cls, i: int) -> Self:
        e = np.eye(3)[i]
        return cls(
            lambda v: v[..., i],
            lambda v: np.broadcast_to(e, v.shape).copy(),
            lambda v: np.zeros(v.shape + (3,)),
            name=f'x{i + 1}',
        )

    @classmethod
    def coordinate_square(cls, i: int) -> Self:
        e = np.eye(3)[i]
        hess = 2.0 * np.outer(e, e)
        return cls(
            lambda v: v[..., i] ** 2,
            lambda v: 2.0 * v[..., i, None] * e,
            lambda v: np.broadcast_to(hess, v.shape + (3,)).copy(),
            name=f'x{i + 1}^2',
        )

    def grad(self, v: np.ndarray) -> np.ndarray:
        if self.gradient is not None:
            return self.gradient(v)
        h = self.step
        out = np.empty(v.shape)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[..., i] = (self.value(v + e) - self.value(v - e)) / (2.0 * h)
        return out

    def hess(self, v: np.ndarray) -> np.ndarray:
        if self.hessian is not None:
            return self.hessian(v)
        h = self.step
        out = np.empty(v.shape + (3,))
        for i in range(3):
            for j in range(3):
                ei = np.zeros(3)
                ej = np.zeros(3)
                ei[i] = h
                ej[j] = h
                out[..., i, j] = (
                    self.value(v + ei + ej) - self.value(v + ei - ej)
                    - self.value(v - ei + ej) + self.value(v - ei - ej)
                ) / (4.0 * h * h)
        return out


def generator_values(
        f: ScalarField, t: float, u: Union[float, np.ndarray], rho: np.ndarray, model: ModelSpec,
) -> np.ndarray:
    """𝒜^{u,t} f at each state: ½ Σ Θ_i Θ_j ∂_ij f + Σ L_i ∂_i f in Bloch coordinates."""
    H = model.H(t, u)
    C = model.C(t, u)
    drift = bloch_coords(lindblad(H, C, rho))
    noise = bloch_coords(innovation(C, rho))
    v = bloch_coords(rho)
    return 0.5 * np.einsum('...i,...ij,...j->...', noise, f.hess(v), noise) + np.sum(drift * f.grad(v), axis=-1)


def generator_apply(f: ScalarField, t: float, u: float, v: Any, model: ModelSpec) -> float:
    arr = v.as_array() if hasattr(v, 'as_array') else np.asarray(v, dtype=float)
    return float(generator_values(f, t, u, bloch_matrices(arr)[None], model)[0])


@dataclass
class ResidualWindow:
    start: float
    end: float
    mean: float
    se: float


@dataclass
class MartingaleReport:
    control: float
    dt: float
    samples: int
    windows: List[ResidualWindow]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'control': self.control,
            'dt': self.dt,
            'samples': self.samples,
            'windows': [w.__dict__ for w in self.windows],
        }


def martingale_residual(
        model: ModelSpec, u: float, f: ScalarField, rho0: Union[QubitState, Matrix2, None], t_grid: Sequence[float],
        M: int, seed: int, dt: float = 1e-4, threads: Optional[int] = None,
) -> MartingaleReport:
    """Mean and SE of f(ρ_b) − f(ρ_a) − ∫_a^b 𝒜f(ρ_s) ds over diffusive paths.

    One window [a, b] per consecutive pair of t_grid.
    """
    times = np.asarray(t_grid, dtype=float)
    if len(times) < 2 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise OptimalException("Time grid must be increasing with at least two points")
    if M < 2:
        raise OptimalException("Martingale residuals need at least two paths")

    recorded = record_steps_for(times, dt)
    slots = {s: i for i, s in enumerate(recorded)}
    integrals = np.zeros((M, len(recorded)))

    def observer_factory(part: range) -> Callable[[int, float, np.ndarray, np.ndarray], None]:
        acc = np.zeros(len(part))

        def observe(k: int, t: float, controls: np.ndarray, rho: np.ndarray) -> None:
            acc[:] += dt * generator_values(f, t, u, rho, model)
            slot = slots.get(k + 1)
            if slot is not None:
                integrals[part.start:part.stop, slot] = acc

        return observe

    ens = integrate_diffusive_ensemble(
        model, Strategy.constant(u), rho0, dt, float(times[-1]), M, seed, record_steps=recorded,
        threads=threads, observer_factory=observer_factory, label='martingale',
    )

    values = f.value(bloch_coords(ens.states))
    windows = []
    for a, b in zip(times[:-1], times[1:]):
        ia, ib = slots[int(round(a / dt))], slots[int(round(b / dt))]
        r = values[:, ib] - values[:, ia] - (integrals[:, ib] - integrals[:, ia])
        windows.append(ResidualWindow(float(a), float(b), float(np.mean(r)), float(np.std(r, ddof=1) / math.sqrt(M))))
    return MartingaleReport(float(u), dt, M, windows)


def hjb_hamiltonian(
        f: ScalarField, t: float, v: Any, model: ModelSpec, cost: CostSpec, controls: Sequence[float],
) -> Tuple[float, float]:
    """min_u {𝒜^{u,t} f(v) + c(t, v, u)} over the control grid, with its smallest minimizer."""
    controls = _check_controls(model, controls)
    arr = v.as_array() if hasattr(v, 'as_array') else np.asarray(v, dtype=float)
    rho = bloch_matrices(arr)[None]
    candidates = np.array([
        generator_values(f, t, float(u), rho, model)[0] + cost.running(t, rho, float(u))[0] for u in controls
    ])
    best = int(np.argmin(candidates))
    return float(candidates[best]), float(controls[best])


def generator_feedback(
        f: ScalarField, model: ModelSpec, cost: CostSpec, controls: Sequence[float],
) -> Strategy:
    """The Markovian strategy choosing, at each state, the minimizer of the HJB Hamiltonian of f."""
    grid = _check_controls(model, controls)

    def law(t: float, rho: np.ndarray) -> np.ndarray:
        candidates = np.stack([
            generator_values(f, t, float(u), rho, model) + cost.running(t, rho, float(u)) for u in grid
        ])
        return grid[np.argmin(candidates, axis=0)]

    return Strategy.markovian(law, name=f'hjb-feedback:{f.name}', continuous=False)
