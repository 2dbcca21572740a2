"""The controlled repeated-measurement chain of a qubit.

A single engine drives every discrete simulation: it advances a stack of samples one measurement
at a time, each sample drawing from its own random substream, so a path computed alone is
bit-identical to the same sample computed inside an ensemble.
"""

from dataclasses import dataclass
from enum import Enum
import math
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple, Union
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np

from .const import EPS_BRANCH
from .model import (
    ControlInterval, ModelSpec, ObservableKind, ObservableSpec, apply_branches, build_unitary, effect_operators,
)
from .parallel import run_chunked, substream
from .qcore import EXCITED, Matrix2, QubitState, bloch_coords, dag, hermitian_eigvalsh, scale, trace

if TYPE_CHECKING:
    from .continuous import PoissonField


class DiscreteException(Exception):
    pass


class StrategyKind(Enum):
    DETERMINISTIC = 'deterministic'
    MARKOVIAN = 'markovian'
    HISTORY = 'history'


@dataclass(frozen=True)
class Strategy:
    """A control law.

    Deterministic laws map a time to a control. Markovian laws map a time and a stack of states
    to one control per state. History laws map a step index and the tuple of past outcomes of one
    sample to a control; given the initial state, the outcomes fix every past state.
    """
    kind: StrategyKind
    law: Callable
    name: str = 'strategy'
    continuous: bool = True

    @classmethod
    def deterministic(cls, law: Callable[[float], float], name: str = 'deterministic', continuous: bool = True) -> Self:
        return cls(StrategyKind.DETERMINISTIC, law, name, continuous)

    @classmethod
    def markovian(
            cls, law: Callable[[float, np.ndarray], np.ndarray], name: str = 'markovian', continuous: bool = True,
    ) -> Self:
        return cls(StrategyKind.MARKOVIAN, law, name, continuous)

    @classmethod
    def history(cls, law: Callable[[int, Tuple[int, ...]], float], name: str = 'history') -> Self:
        return cls(StrategyKind.HISTORY, law, name, False)

    @classmethod
    def constant(cls, u: float) -> Self:
        return cls.deterministic(lambda t: u, name=f'const:{u:g}')

    def controls(
            self, t: float, rho: np.ndarray, step: int = 0, outcomes: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        batch = rho.shape[:-2]
        if self.kind is StrategyKind.DETERMINISTIC:
            return np.full(batch, float(self.law(t)))
        elif self.kind is StrategyKind.MARKOVIAN:
            return np.array(np.broadcast_to(np.asarray(self.law(t, rho), dtype=float), batch))
        else:
            if outcomes is None:
                raise DiscreteException(f"Strategy {self.name!r} needs the outcome history")
            return np.array([float(self.law(step, tuple(int(i) for i in row))) for row in outcomes])


@dataclass(frozen=True)
class Outcome:
    index: int
    probability: float

    def __post_init__(self) -> None:
        if self.index not in (0, 1) or not 0.0 <= self.probability <= 1.0 + 1e-12:
            raise DiscreteException(f"Invalid outcome {self.index} with probability {self.probability}")


# (t, u, stack of states) -> unnormalized branches (ℒ₀(ρ), ℒ₁(ρ))
BranchMap = Callable[[float, Union[float, np.ndarray], np.ndarray], Tuple[np.ndarray, np.ndarray]]


def model_branches(model: ModelSpec, obs: ObservableSpec, n: int) -> BranchMap:
    h = 1.0 / n

    def branches(t: float, u: Union[float, np.ndarray], rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return apply_branches(build_unitary(h, t, u, model), obs, rho)

    return branches


def state_matrix(rho: Union[QubitState, Matrix2, None]) -> Matrix2:
    if rho is None:
        return EXCITED.copy()
    if isinstance(rho, QubitState):
        return rho.matrix.copy()
    return QubitState(np.asarray(rho, dtype=complex)).matrix.copy()


def step_count(n: int, T: float) -> int:
    if n < 1:
        raise DiscreteException(f"Steps per unit time must be at least 1, got {n}")
    if not T > 0:
        raise DiscreteException(f"Horizon must be positive, got {T}")
    return int(math.floor(n * T + 1e-9))


def select_branches(p: np.ndarray, q: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Outcome 1 iff the draw falls below q; branches of probability <= EPS_BRANCH are never taken."""
    dead = (p <= EPS_BRANCH) & (q <= EPS_BRANCH)
    if np.any(dead):
        raise DiscreteException(
            f"Both branch probabilities vanish (p={float(p[dead][0]):.3g}, q={float(q[dead][0]):.3g}); "
            "the model is inconsistent")
    return np.where(q <= EPS_BRANCH, False, np.where(p <= EPS_BRANCH, True, draws))


def normalize_branch(l0: np.ndarray, l1: np.ndarray, p: np.ndarray, q: np.ndarray, one: np.ndarray) -> np.ndarray:
    chosen = np.where(one[..., None, None], l1, l0)
    prob = np.where(one, q, p)
    out = scale(1.0 / prob, chosen)
    return 0.5 * (out + dag(out))


class _Uniforms:
    """Per-sample uniforms, drawn from each substream in blocks of consecutive steps."""

    BLOCK = 4096

    def __init__(self, rngs: Sequence[np.random.Generator], steps: int) -> None:
        self.rngs = rngs
        self.steps = steps
        self.start = 0
        self.block = np.empty((len(rngs), 0))

    def at(self, k: int) -> np.ndarray:
        if k >= self.start + self.block.shape[1]:
            self.start = k
            size = min(self.BLOCK, self.steps - k)
            self.block = np.stack([rng.random(size) for rng in self.rngs])
        return self.block[:, k - self.start]


@dataclass
class _ChainRecord:
    states: np.ndarray
    controls: np.ndarray
    outcomes: np.ndarray
    p: np.ndarray
    q: np.ndarray
    event_counts: np.ndarray
    first_event_states: np.ndarray
    w: Optional[np.ndarray]
    quadratic_variation: Optional[np.ndarray]


def _run_chain(
        branches: BranchMap, strategy: Strategy, interval: ControlInterval, n: int, steps: int, rho0: Matrix2,
        rngs: Sequence[np.random.Generator], record_steps: np.ndarray, track_increments: bool,
        cell_minima: Optional[np.ndarray] = None, field_height: float = 0.0,
) -> _ChainRecord:
    m = len(rngs)
    slots = np.full(steps + 1, -1)
    slots[record_steps] = np.arange(len(record_steps))
    r = len(record_steps)

    out = _ChainRecord(
        states=np.empty((m, r, 2, 2), dtype=complex),
        controls=np.full((m, r), np.nan),
        outcomes=np.full((m, r), -1, dtype=np.int8),
        p=np.full((m, r), np.nan),
        q=np.full((m, r), np.nan),
        event_counts=np.zeros(m, dtype=np.int64),
        first_event_states=np.full((m, 2, 2), np.nan, dtype=complex),
        w=np.zeros((m, r)) if track_increments else None,
        quadratic_variation=np.zeros((m, r)) if track_increments else None,
    )

    rho = np.array(np.broadcast_to(rho0, (m, 2, 2)))
    history = np.empty((m, steps), dtype=np.int8) if strategy.kind is StrategyKind.HISTORY else None
    uniforms = _Uniforms(rngs, steps) if cell_minima is None else None
    w_sum = np.zeros(m)
    qv_sum = np.zeros(m)

    if slots[0] >= 0:
        out.states[:, slots[0]] = rho

    for k in range(steps):
        t = k / n
        u = strategy.controls(t, rho, k, None if history is None else history[:, :k])
        if not interval.contains(u):
            bad = u[(u < interval.lower) | (u > interval.upper)][0]
            raise DiscreteException(
                f"Strategy {strategy.name!r} returned control {bad:g} outside [{interval.lower:g}, {interval.upper:g}]")

        uarg = float(u[0]) if strategy.kind is StrategyKind.DETERMINISTIC else u
        l0, l1 = branches(t, uarg, rho)
        p = trace(l0).real
        q = trace(l1).real

        if cell_minima is None:
            one = select_branches(p, q, uniforms.at(k) < q)
        else:
            if np.any(p <= 0.0):
                raise DiscreteException("Tr ℒ₀ is not positive; the coupling region is undefined")
            height = -n * np.log(p)
            if np.any(height > field_height):
                raise DiscreteException(
                    f"Coupling region of height {float(np.max(height)):.6g} exceeds the Poisson field "
                    f"height {field_height:.6g}")
            one = select_branches(p, q, cell_minima[:, k] < height)

        rho = normalize_branch(l0, l1, p, q, one)

        first = one & (out.event_counts == 0)
        out.first_event_states[first] = rho[first]
        out.event_counts += one
        if history is not None:
            history[:, k] = one

        if track_increments:
            if np.any(p <= EPS_BRANCH) or np.any(q <= EPS_BRANCH):
                raise DiscreteException(
                    "Degenerate observable: a branch probability vanished, so X_k is undefined "
                    "(a non-diagonal observable with (P0)00 and (P1)00 nonzero is required)")
            x = (one - q) / np.sqrt(p * q)
            w_sum += x
            qv_sum += x * x

        slot = slots[k + 1]
        if slot >= 0:
            out.states[:, slot] = rho
            out.controls[:, slot] = u
            out.outcomes[:, slot] = one
            out.p[:, slot] = p
            out.q[:, slot] = q
            if track_increments:
                out.w[:, slot] = w_sum / math.sqrt(n)
                out.quadratic_variation[:, slot] = qv_sum / n

    return out


@dataclass
class DiscreteTrajectory:
    """One sample path; row k holds ρ_k and the control, outcome and branch probabilities that produced it."""
    n: int
    horizon: float
    seed: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    outcomes: np.ndarray
    p: np.ndarray
    q: np.ndarray
    sample: int = 0

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def state(self, k: int) -> QubitState:
        return QubitState(self.states[k])

    def outcome(self, k: int) -> Outcome:
        """The outcome of the measurement producing ρ_k, k >= 1."""
        i = int(self.outcomes[k])
        return Outcome(i, float(self.q[k] if i == 1 else self.p[k]))

    def bloch(self) -> np.ndarray:
        return bloch_coords(self.states)

    def event_count(self) -> int:
        return int(np.sum(self.outcomes[1:] == 1))


@dataclass
class DiscreteEnsemble:
    n: int
    horizon: float
    seed: int
    steps: np.ndarray
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    outcomes: np.ndarray
    p: np.ndarray
    q: np.ndarray
    event_counts: np.ndarray
    first_event_states: np.ndarray
    w: Optional[np.ndarray] = None
    quadratic_variation: Optional[np.ndarray] = None

    @property
    def samples(self) -> int:
        return self.states.shape[0]

    def index_of(self, time: float) -> int:
        idx = int(np.argmin(np.abs(self.times - time)))
        if abs(self.times[idx] - time) > 0.5 / self.n + 1e-12:
            raise DiscreteException(f"Time {time:g} was not recorded")
        return idx

    def bloch(self, time: float) -> np.ndarray:
        return bloch_coords(self.states[:, self.index_of(time)])

    def trajectory(self, i: int) -> DiscreteTrajectory:
        if len(self.steps) != int(self.steps[-1]) + 1:
            raise DiscreteException("Only ensembles recording every step hold full trajectories")
        return DiscreteTrajectory(
            n=self.n, horizon=self.horizon, seed=self.seed, times=self.times, states=self.states[i],
            controls=self.controls[i], outcomes=self.outcomes[i], p=self.p[i], q=self.q[i], sample=i,
        )


def _concat(parts: List[_ChainRecord], name: str) -> Optional[np.ndarray]:
    values = [getattr(part, name) for part in parts]
    if values[0] is None:
        return None
    return np.concatenate(values, axis=0)


def _record_steps(steps: int, record_steps: Optional[Sequence[int]]) -> np.ndarray:
    if record_steps is None:
        return np.arange(steps + 1)
    out = np.unique(np.asarray(record_steps, dtype=int))
    if len(out) == 0 or out[0] < 0 or out[-1] > steps:
        raise DiscreteException(f"Recorded steps must lie in [0, {steps}]")
    return out


def record_steps_for(times: Sequence[float], n: int) -> List[int]:
    return sorted({0} | {int(round(t * n)) for t in times})


def run_ensemble(
        branches: BranchMap, strategy: Strategy, interval: ControlInterval, n: int, T: float, samples: int,
        seed: int, rho0: Union[QubitState, Matrix2, None] = None, label: str = 'discrete',
        record_steps: Optional[Sequence[int]] = None, track_increments: bool = False,
        threads: Optional[int] = None, progress: Optional[str] = None,
        field_height: Optional[float] = None,
) -> DiscreteEnsemble:
    """Simulate ``samples`` chains with the given branch maps; sample i uses substream (seed, label, i)."""
    steps = step_count(n, T)
    if samples < 1:
        raise DiscreteException("At least one sample is required")
    start = state_matrix(rho0)
    recorded = _record_steps(steps, record_steps)

    def run(part: range) -> _ChainRecord:
        rngs = [substream(seed, label, i) for i in part]
        minima = None
        if field_height is not None:
            from .continuous import sample_poisson_field
            minima = np.stack([
                sample_poisson_field((0.0, T, field_height), rng).cell_minima(n, steps) for rng in rngs
            ])
        return _run_chain(
            branches, strategy, interval, n, steps, start, rngs, recorded, track_increments,
            cell_minima=minima, field_height=field_height or 0.0,
        )

    parts = run_chunked(run, samples, threads, progress)
    return DiscreteEnsemble(
        n=n, horizon=T, seed=seed, steps=recorded, times=recorded / n,
        states=_concat(parts, 'states'), controls=_concat(parts, 'controls'), outcomes=_concat(parts, 'outcomes'),
        p=_concat(parts, 'p'), q=_concat(parts, 'q'), event_counts=_concat(parts, 'event_counts'),
        first_event_states=_concat(parts, 'first_event_states'), w=_concat(parts, 'w'),
        quadratic_variation=_concat(parts, 'quadratic_variation'),
    )


def measure_step(
        rho: QubitState, t: float, u: float, h: float, model: ModelSpec, obs: ObservableSpec,
        rng: np.random.Generator,
) -> Tuple[QubitState, Outcome]:
    l0, l1 = apply_branches(build_unitary(h, t, u, model), obs, rho.matrix)
    p = trace(l0).real
    q = trace(l1).real
    one = select_branches(np.array([p]), np.array([q]), np.array([rng.random() < q]))
    nxt = normalize_branch(l0[None], l1[None], np.array([p]), np.array([q]), one)[0]
    i = int(one[0])
    return QubitState(nxt), Outcome(i, float(q if i else p))


def simulate_chain(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n: int, T: float, seed: int,
        rho0: Union[QubitState, Matrix2, None] = None,
) -> DiscreteTrajectory:
    return simulate_chain_ensemble(model, obs, strategy, n, T, 1, seed, rho0, threads=1).trajectory(0)


def simulate_chain_ensemble(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n: int, T: float, samples: int, seed: int,
        rho0: Union[QubitState, Matrix2, None] = None, record_steps: Optional[Sequence[int]] = None,
        track_increments: bool = False, threads: Optional[int] = None, progress: Optional[str] = None,
) -> DiscreteEnsemble:
    return run_ensemble(
        model_branches(model, obs, n), strategy, model.controls, n, T, samples, seed, rho0,
        label='discrete', record_steps=record_steps, track_increments=track_increments,
        threads=threads, progress=progress,
    )


@dataclass
class IncrementProcess:
    times: np.ndarray
    x: np.ndarray
    w: np.ndarray
    quadratic_variation: np.ndarray


def increments(traj: DiscreteTrajectory) -> IncrementProcess:
    """X_{k+1} = (𝟏₁ − q)/√(qp), W_n(k/n) = Σ X/√n and [W_n, W_n](k/n) = Σ X²/n."""
    p = traj.p[1:]
    q = traj.q[1:]
    if np.any(p <= 0.0) or np.any(q <= 0.0) or np.any(p >= 1.0) or np.any(q >= 1.0):
        raise DiscreteException(
            "Degenerate observable: branch probabilities must lie in (0, 1) at every step "
            "(a non-diagonal observable with (P0)00 and (P1)00 nonzero is required)")
    x = ((traj.outcomes[1:] == 1) - q) / np.sqrt(p * q)
    w = np.concatenate([[0.0], np.cumsum(x)]) / math.sqrt(traj.n)
    qv = np.concatenate([[0.0], np.cumsum(x * x)]) / traj.n
    return IncrementProcess(traj.times, x, w, qv)


@dataclass
class ChainDecomposition:
    """ρ_{k+1} − ρ_k = drift_k / n + martingale_k · X_{k+1}."""
    drift: np.ndarray
    martingale: np.ndarray
    x: np.ndarray

    def reconstruct(self, n: int) -> np.ndarray:
        return self.drift / n + scale(self.x, self.martingale)


def chain_decomposition(traj: DiscreteTrajectory, model: ModelSpec, obs: ObservableSpec) -> ChainDecomposition:
    inc = increments(traj)
    h = 1.0 / traj.n
    drift = np.empty((traj.steps, 2, 2), dtype=complex)
    martingale = np.empty((traj.steps, 2, 2), dtype=complex)
    for k in range(traj.steps):
        rho = traj.states[k]
        l0, l1 = apply_branches(build_unitary(h, k / traj.n, float(traj.controls[k + 1]), model), obs, rho)
        p = trace(l0).real
        q = trace(l1).real
        drift[k] = traj.n * (l0 + l1 - rho)
        martingale[k] = math.sqrt(p / q) * l1 - math.sqrt(q / p) * l0
    return ChainDecomposition(drift, martingale, inc.x)


def coupling_height_bound(
        model: ModelSpec, obs: ObservableSpec, n: int, T: float, points: int = 101,
) -> float:
    """Height of a Poisson field covering every coupling region, −n ln min Tr ℒ₀, with a 1.01 margin."""
    h = 1.0 / n
    us = model.controls.grid(points)
    worst = 1.0
    for t in np.linspace(0.0, T, points):
        e0, _ = effect_operators(build_unitary(h, float(t), us, model), obs)
        low, _ = hermitian_eigvalsh(e0)
        worst = min(worst, float(np.min(low)))
    if worst <= 0.0:
        raise DiscreteException("Tr ℒ₀ can vanish; the coupling regions are unbounded")
    return 1.01 * -n * math.log(worst)


def coupled_chain(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n: int, T: float, field: 'PoissonField',
        rho0: Union[QubitState, Matrix2, None] = None,
) -> DiscreteTrajectory:
    """The chain driven by a Poisson field: outcome 1 iff the field has a point in G_k(ρ_k)."""
    if obs.kind is not ObservableKind.DIAGONAL:
        raise DiscreteException("The Poisson coupling needs a diagonal observable")
    steps = step_count(n, T)
    if field.t0 > 0.0 or field.t1 < steps / n - 1e-12:
        raise DiscreteException(f"Poisson field [{field.t0:g}, {field.t1:g}] does not cover [0, {T:g}]")
    record = _run_chain(
        model_branches(model, obs, n), strategy, model.controls, n, steps, state_matrix(rho0),
        [np.random.default_rng(0)], np.arange(steps + 1), False,
        cell_minima=field.cell_minima(n, steps)[None], field_height=field.height,
    )
    return DiscreteTrajectory(
        n=n, horizon=T, seed=field.seed, times=np.arange(steps + 1) / n, states=record.states[0],
        controls=record.controls[0], outcomes=record.outcomes[0], p=record.p[0], q=record.q[0],
    )


def coupled_chain_ensemble(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n: int, T: float, samples: int, seed: int,
        rho0: Union[QubitState, Matrix2, None] = None, record_steps: Optional[Sequence[int]] = None,
        threads: Optional[int] = None, progress: Optional[str] = None,
) -> DiscreteEnsemble:
    if obs.kind is not ObservableKind.DIAGONAL:
        raise DiscreteException("The Poisson coupling needs a diagonal observable")
    return run_ensemble(
        model_branches(model, obs, n), strategy, model.controls, n, T, samples, seed, rho0,
        label='coupled', record_steps=record_steps, threads=threads, progress=progress,
        field_height=coupling_height_bound(model, obs, n, T),
    )
