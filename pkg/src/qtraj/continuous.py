from dataclasses import dataclass
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union
try:
    from typing import Self  # type: ignore
except ImportError:
    from typing_extensions import Self  # type: ignore

import numpy as np

from .const import MAX_FIELD_AREA, MAX_INTENSITY, REPAIR_FACTOR, TOL_POSITIVE
from .discrete import Strategy, StrategyKind, state_matrix
from .model import (
    ControlInterval, ModelSpec, innovation, jump_update, lindblad, rate_bound, superop_J, superop_R,
)
from .parallel import run_chunked, substream
from .qcore import Matrix2, NumericalDriftError, QubitState, bloch_coords, dag, repair_states, scale, trace


class ContinuousException(Exception):
    pass


class StepSizeError(ContinuousException):
    pass


def cell_minimum_marks(times: np.ndarray, marks: np.ndarray, n: int, steps: int) -> np.ndarray:
    """Smallest mark in each cell (k/n, (k+1)/n], +inf for empty cells."""
    out = np.full(steps, np.inf)
    for i in range(len(times)):
        k = int(math.ceil(times[i] * n)) - 1
        if 0 <= k < steps and marks[i] < out[k]:
            out[k] = marks[i]
    return out


try:
    from numba import jit  # type: ignore

    cell_minimum_marks = jit(nopython=True, nogil=True)(cell_minimum_marks)
except ImportError as ex:
    print("Using a slow Poisson field scan; consider installing qtraj[jit]")


@dataclass(frozen=True, eq=False)
class PoissonField:
    """Points of a homogeneous unit-rate Poisson process on [t0, t1] x [0, height], sorted by time."""
    t0: float
    t1: float
    height: float
    times: np.ndarray
    marks: np.ndarray
    seed: Optional[int] = None

    @property
    def area(self) -> float:
        return self.height * (self.t1 - self.t0)

    def __len__(self) -> int:
        return len(self.times)

    def cell_minima(self, n: int, steps: int) -> np.ndarray:
        return cell_minimum_marks(self.times, self.marks, n, steps)


def sample_poisson_field(
        rect: Tuple[float, float, float], seed: Union[int, np.random.Generator],
) -> PoissonField:
    t0, t1, height = rect
    if t1 < t0 or height < 0:
        raise ContinuousException(f"Invalid Poisson field rectangle [{t0}, {t1}] x [0, {height}]")
    area = height * (t1 - t0)
    if area >= MAX_FIELD_AREA:
        raise ContinuousException(f"Poisson field area {area:.3g} is too large")

    if isinstance(seed, np.random.Generator):
        rng, seed_value = seed, None
    else:
        rng, seed_value = np.random.Generator(np.random.Philox(seed)), seed

    count = int(rng.poisson(area)) if area > 0 else 0
    times = t0 + (t1 - t0) * rng.random(count)
    marks = height * rng.random(count)
    order = np.argsort(times, kind='stable')
    return PoissonField(t0, t1, height, times[order], marks[order], seed_value)


def intensity_bound(model: ModelSpec, strategy: Optional[Strategy], T: float, points: int = 101) -> float:
    """K = 1.01 max λ_max(C*C) over a (t, u) grid, so Tr[J(t, u, ρ)] <= K for every state.

    A deterministic strategy fixes u at each t, so only its own controls enter the maximum.
    """
    grid = model.controls.grid(points)
    open_loop = strategy is not None and strategy.kind is StrategyKind.DETERMINISTIC
    worst = 0.0
    for t in np.linspace(0.0, T, points):
        us = np.array([float(strategy.law(float(t)))]) if open_loop else grid
        worst = max(worst, float(np.max(rate_bound(model, float(t), us))))
    bound = 1.01 * worst
    if not np.isfinite(bound) or bound > MAX_INTENSITY:
        raise ContinuousException(f"Jump intensity bound {bound:.3g} is too large; check the coupling C(t, u)")
    return bound


def repair_tolerance(dt: float, repair_factor: float = REPAIR_FACTOR) -> float:
    return max(TOL_POSITIVE, repair_factor * dt)


def _renormalize(rho: np.ndarray, tol: float, dt: float) -> np.ndarray:
    rho = scale(1.0 / trace(rho).real, rho)
    rho = 0.5 * (rho + dag(rho))
    try:
        return repair_states(rho, tol)
    except NumericalDriftError as ex:
        raise StepSizeError(f"{ex} (dt = {dt:g})") from None


def _check_controls(strategy: Strategy, interval: ControlInterval, u: np.ndarray) -> None:
    if not interval.contains(u):
        bad = u[(u < interval.lower) | (u > interval.upper)][0]
        raise ContinuousException(
            f"Strategy {strategy.name!r} returned control {bad:g} outside [{interval.lower:g}, {interval.upper:g}]")


def _control_arg(strategy: Strategy, u: np.ndarray) -> Union[float, np.ndarray]:
    return float(u[0]) if strategy.kind is StrategyKind.DETERMINISTIC else u


def step_count(dt: float, T: float) -> int:
    if not 0.0 < dt <= 1e-2:
        raise ContinuousException(f"Time step must lie in (0, 1e-2], got {dt}")
    if not T > 0:
        raise ContinuousException(f"Horizon must be positive, got {T}")
    return int(math.floor(T / dt + 1e-9))


class _Normals:
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
            self.block = np.stack([rng.standard_normal(size) for rng in self.rngs])
        return self.block[:, k - self.start]


# Called before each step with (step, time, controls, states).
StepObserver = Callable[[int, float, np.ndarray, np.ndarray], None]


@dataclass
class _DiffusiveRecord:
    states: np.ndarray
    controls: np.ndarray
    increments: np.ndarray


def _run_diffusive(
        model: ModelSpec, strategy: Strategy, rho0: Matrix2, dt: float, steps: int,
        rngs: Sequence[np.random.Generator], recorded: np.ndarray, tol: float,
        observer: Optional[StepObserver] = None,
) -> _DiffusiveRecord:
    m = len(rngs)
    slots = np.full(steps + 1, -1)
    slots[recorded] = np.arange(len(recorded))
    out = _DiffusiveRecord(
        states=np.empty((m, len(recorded), 2, 2), dtype=complex),
        controls=np.full((m, len(recorded)), np.nan),
        increments=np.full((m, len(recorded)), np.nan),
    )

    rho = np.array(np.broadcast_to(rho0, (m, 2, 2)))
    normals = _Normals(rngs, steps)
    sqrt_dt = math.sqrt(dt)
    if slots[0] >= 0:
        out.states[:, slots[0]] = rho

    for k in range(steps):
        t = k * dt
        u = strategy.controls(t, rho)
        _check_controls(strategy, model.controls, u)
        if observer is not None:
            observer(k, t, u, rho)

        uarg = _control_arg(strategy, u)
        H = model.H(t, uarg)
        C = model.C(t, uarg)
        dw = sqrt_dt * normals.at(k)
        rho = rho + dt * lindblad(H, C, rho) + scale(dw, innovation(C, rho))
        rho = _renormalize(rho, tol, dt)

        slot = slots[k + 1]
        if slot >= 0:
            out.states[:, slot] = rho
            out.controls[:, slot] = u
            out.increments[:, slot] = dw

    return out


@dataclass
class DiffusivePath:
    dt: float
    horizon: float
    seed: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: np.ndarray
    sample: int = 0

    def state(self, k: int) -> QubitState:
        return QubitState(self.states[k])

    def bloch(self) -> np.ndarray:
        return bloch_coords(self.states)


@dataclass
class JumpPath:
    dt: float
    horizon: float
    seed: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    jumps_in_step: np.ndarray
    candidate_times: np.ndarray
    candidate_marks: np.ndarray
    accepted: np.ndarray
    jump_times: np.ndarray
    compensator: np.ndarray
    sample: int = 0

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)

    def state(self, k: int) -> QubitState:
        return QubitState(self.states[k])

    def bloch(self) -> np.ndarray:
        return bloch_coords(self.states)


@dataclass
class PathEnsemble:
    """Ensemble of integrator paths recorded at selected steps; jump fields are set for jump paths."""
    dt: float
    horizon: float
    seed: int
    steps: np.ndarray
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: Optional[np.ndarray] = None
    jumps_in_step: Optional[np.ndarray] = None
    jump_times: Optional[List[np.ndarray]] = None
    compensators: Optional[List[np.ndarray]] = None
    candidates: Optional[List[Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None
    first_jump_states: Optional[np.ndarray] = None

    @property
    def samples(self) -> int:
        return self.states.shape[0]

    @property
    def jump_counts(self) -> np.ndarray:
        if self.jump_times is None:
            raise ContinuousException("Diffusive paths have no jumps")
        return np.array([len(j) for j in self.jump_times], dtype=np.int64)

    @property
    def event_counts(self) -> np.ndarray:
        return self.jump_counts

    def index_of(self, time: float) -> int:
        idx = int(np.argmin(np.abs(self.times - time)))
        if abs(self.times[idx] - time) > 0.5 * self.dt + 1e-12:
            raise ContinuousException(f"Time {time:g} was not recorded")
        return idx

    def bloch(self, time: float) -> np.ndarray:
        return bloch_coords(self.states[:, self.index_of(time)])

    def _full(self) -> None:
        if len(self.steps) != int(self.steps[-1]) + 1:
            raise ContinuousException("Only ensembles recording every step hold full paths")

    def diffusive_path(self, i: int) -> DiffusivePath:
        self._full()
        return DiffusivePath(
            self.dt, self.horizon, self.seed, self.times, self.states[i], self.controls[i], self.increments[i], i)

    def jump_path(self, i: int) -> JumpPath:
        self._full()
        ct, cm, acc = self.candidates[i]
        return JumpPath(
            self.dt, self.horizon, self.seed, self.times, self.states[i], self.controls[i], self.jumps_in_step[i],
            ct, cm, acc, self.jump_times[i], self.compensators[i], i,
        )


def _recorded(steps: int, record_steps: Optional[Sequence[int]]) -> np.ndarray:
    if record_steps is None:
        return np.arange(steps + 1)
    out = np.unique(np.asarray(record_steps, dtype=int))
    if len(out) == 0 or out[0] < 0 or out[-1] > steps:
        raise ContinuousException(f"Recorded steps must lie in [0, {steps}]")
    return out


def record_steps_for(times: Sequence[float], dt: float) -> List[int]:
    return sorted({0} | {int(round(t / dt)) for t in times})


def _markov_only(strategy: Strategy) -> None:
    if strategy.kind is StrategyKind.HISTORY:
        raise ContinuousException("Integrators take deterministic or Markovian strategies only")


def integrate_diffusive_ensemble(
        model: ModelSpec, strategy: Strategy, rho0: Union[QubitState, Matrix2, None], dt: float, T: float,
        samples: int, seed: int, record_steps: Optional[Sequence[int]] = None,
        repair_factor: float = REPAIR_FACTOR, threads: Optional[int] = None, progress: Optional[str] = None,
        observer_factory: Optional[Callable[[range], StepObserver]] = None, label: str = 'diffusive',
) -> PathEnsemble:
    """Euler–Maruyama with trace renormalization and state repair; sample i uses substream (seed, label, i).

    ``observer_factory`` builds a per-chunk observer called before every step.
    """
    _markov_only(strategy)
    steps = step_count(dt, T)
    start = state_matrix(rho0)
    recorded = _recorded(steps, record_steps)
    tol = repair_tolerance(dt, repair_factor)

    def run(part: range) -> _DiffusiveRecord:
        rngs = [substream(seed, label, i) for i in part]
        observer = observer_factory(part) if observer_factory is not None else None
        return _run_diffusive(model, strategy, start, dt, steps, rngs, recorded, tol, observer)

    parts = run_chunked(run, samples, threads, progress)
    return PathEnsemble(
        dt=dt, horizon=T, seed=seed, steps=recorded, times=recorded * dt,
        states=np.concatenate([p.states for p in parts]),
        controls=np.concatenate([p.controls for p in parts]),
        increments=np.concatenate([p.increments for p in parts]),
    )


def integrate_diffusive(
        model: ModelSpec, strategy: Strategy, rho0: Union[QubitState, Matrix2, None], dt: float, T: float,
        seed: int, repair_factor: float = REPAIR_FACTOR,
) -> DiffusivePath:
    return integrate_diffusive_ensemble(
        model, strategy, rho0, dt, T, 1, seed, repair_factor=repair_factor, threads=1).diffusive_path(0)


@dataclass(frozen=True)
class JumpDynamics:
    """Drift R and jump operator J of a jump equation, with a bound on Tr J."""
    drift: Callable[[float, Union[float, np.ndarray], np.ndarray], np.ndarray]
    jump: Callable[[float, Union[float, np.ndarray], np.ndarray], np.ndarray]
    bound: float
    controls: ControlInterval
    name: str = 'jump'

    @classmethod
    def from_model(cls, model: ModelSpec, strategy: Optional[Strategy], T: float) -> Self:
        return cls(
            drift=lambda t, u, rho: superop_R(model, t, u, rho),
            jump=lambda t, u, rho: superop_J(model, t, u, rho),
            bound=intensity_bound(model, strategy, T),
            controls=model.controls,
            name=model.name,
        )


def _rk4(
        dyn: JumpDynamics, strategy: Strategy, t: float, h: float, rho: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One RK4 step of dρ = R dt; returns the new states, ∫Tr J dt over the step, and the first-stage controls."""
    def stage(s: float, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = strategy.controls(s, r)
        _check_controls(strategy, dyn.controls, u)
        uarg = _control_arg(strategy, u)
        return dyn.drift(s, uarg, r), trace(dyn.jump(s, uarg, r)).real, u

    k1, r1, u1 = stage(t, rho)
    k2, r2, _ = stage(t + 0.5 * h, rho + (0.5 * h) * k1)
    k3, r3, _ = stage(t + 0.5 * h, rho + (0.5 * h) * k2)
    k4, r4, _ = stage(t + h, rho + h * k3)
    nxt = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    rate = (h / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
    return nxt, rate, u1


@dataclass
class _JumpRecord:
    states: np.ndarray
    controls: np.ndarray
    jumps_in_step: np.ndarray
    jump_times: List[np.ndarray]
    compensators: List[np.ndarray]
    candidates: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]
    first_jump_states: np.ndarray


def _run_jump(
        dyn: JumpDynamics, strategy: Strategy, rho0: Matrix2, dt: float, steps: int,
        rngs: Sequence[np.random.Generator], recorded: np.ndarray, tol: float,
) -> _JumpRecord:
    m = len(rngs)
    end = steps * dt
    fields = [sample_poisson_field((0.0, end, dyn.bound), rng) for rng in rngs]

    # All candidates of the chunk, grouped by grid cell (k dt, (k+1) dt].
    owner = np.concatenate([np.full(len(f), i, dtype=np.int64) for i, f in enumerate(fields)] + [np.empty(0, np.int64)])
    ctimes = np.concatenate([f.times for f in fields] + [np.empty(0)])
    cmarks = np.concatenate([f.marks for f in fields] + [np.empty(0)])
    cells = np.clip(np.ceil(ctimes / dt).astype(np.int64) - 1, 0, max(steps - 1, 0))
    order = np.lexsort((ctimes, owner, cells))
    owner, ctimes, cmarks, cells = owner[order], ctimes[order], cmarks[order], cells[order]
    bounds = np.searchsorted(cells, np.arange(steps + 1), side='left')
    accepted = np.zeros(len(ctimes), dtype=bool)

    slots = np.full(steps + 1, -1)
    slots[recorded] = np.arange(len(recorded))
    out_states = np.empty((m, len(recorded), 2, 2), dtype=complex)
    out_controls = np.full((m, len(recorded)), np.nan)
    out_jumps = np.zeros((m, len(recorded)), dtype=np.int64)
    first_jump = np.full((m, 2, 2), np.nan, dtype=complex)
    jump_times: List[List[float]] = [[] for _ in range(m)]
    compensators: List[List[float]] = [[] for _ in range(m)]

    rho = np.array(np.broadcast_to(rho0, (m, 2, 2)))
    lam = np.zeros(m)
    if slots[0] >= 0:
        out_states[:, slots[0]] = rho

    for k in range(steps):
        t0 = k * dt
        t1 = (k + 1) * dt
        nxt, inc, u = _rk4(dyn, strategy, t0, dt, rho)
        lam_next = lam + inc
        jumped = np.zeros(m, dtype=np.int64)

        lo, hi = bounds[k], bounds[k + 1]
        j = lo
        while j < hi:
            i = int(owner[j])
            r = rho[i:i + 1]
            li = lam[i]
            s = t0
            while j < hi and owner[j] == i:
                tc = float(ctimes[j])
                if tc > s:
                    r, step_inc, _ = _rk4(dyn, strategy, s, tc - s, r)
                    li += step_inc[0]
                    r = _renormalize(r, tol, dt)
                uc = strategy.controls(tc, r)
                J = dyn.jump(tc, _control_arg(strategy, uc), r)
                rate = trace(J).real[0]
                if rate > dyn.bound:
                    raise ContinuousException(
                        f"Jump intensity {rate:.6g} at t = {tc:.6g} exceeds the intensity bound {dyn.bound:.6g}")
                if cmarks[j] < rate:
                    accepted[order[j]] = True
                    r = _renormalize(r + jump_update(J, r), tol, dt)
                    jumped[i] += 1
                    jump_times[i].append(tc)
                    compensators[i].append(li)
                    if len(jump_times[i]) == 1:
                        first_jump[i] = r[0]
                s = tc
                j += 1
            if t1 > s:
                r, step_inc, _ = _rk4(dyn, strategy, s, t1 - s, r)
                li += step_inc[0]
            nxt[i] = r[0]
            lam_next[i] = li

        rho = _renormalize(nxt, tol, dt)
        lam = lam_next

        slot = slots[k + 1]
        if slot >= 0:
            out_states[:, slot] = rho
            out_controls[:, slot] = u
            out_jumps[:, slot] = jumped

    candidates = []
    for i, f in enumerate(fields):
        base = sum(len(g) for g in fields[:i])
        candidates.append((f.times, f.marks, accepted[base:base + len(f)]))

    return _JumpRecord(
        states=out_states, controls=out_controls, jumps_in_step=out_jumps,
        jump_times=[np.array(t) for t in jump_times], compensators=[np.array(c) for c in compensators],
        candidates=candidates, first_jump_states=first_jump,
    )


def run_jump_ensemble(
        dyn: JumpDynamics, strategy: Strategy, rho0: Union[QubitState, Matrix2, None], T: float, ode_dt: float,
        samples: int, seed: int, record_steps: Optional[Sequence[int]] = None, repair_factor: float = REPAIR_FACTOR,
        threads: Optional[int] = None, progress: Optional[str] = None, label: str = 'jump',
) -> PathEnsemble:
    """Thinning integrator: RK4 for dρ = R dt between candidates, ρ ← ρ + Q at accepted candidates."""
    _markov_only(strategy)
    steps = step_count(ode_dt, T)
    start = state_matrix(rho0)
    recorded = _recorded(steps, record_steps)
    tol = repair_tolerance(ode_dt, repair_factor)

    def run(part: range) -> _JumpRecord:
        rngs = [substream(seed, label, i) for i in part]
        return _run_jump(dyn, strategy, start, ode_dt, steps, rngs, recorded, tol)

    parts = run_chunked(run, samples, threads, progress)
    return PathEnsemble(
        dt=ode_dt, horizon=T, seed=seed, steps=recorded, times=recorded * ode_dt,
        states=np.concatenate([p.states for p in parts]),
        controls=np.concatenate([p.controls for p in parts]),
        jumps_in_step=np.concatenate([p.jumps_in_step for p in parts]),
        jump_times=[t for p in parts for t in p.jump_times],
        compensators=[c for p in parts for c in p.compensators],
        candidates=[c for p in parts for c in p.candidates],
        first_jump_states=np.concatenate([p.first_jump_states for p in parts]),
    )


def integrate_jump_ensemble(
        model: ModelSpec, strategy: Strategy, rho0: Union[QubitState, Matrix2, None], T: float, ode_dt: float,
        samples: int, seed: int, record_steps: Optional[Sequence[int]] = None, repair_factor: float = REPAIR_FACTOR,
        threads: Optional[int] = None, progress: Optional[str] = None,
) -> PathEnsemble:
    return run_jump_ensemble(
        JumpDynamics.from_model(model, strategy, T), strategy, rho0, T, ode_dt, samples, seed,
        record_steps=record_steps, repair_factor=repair_factor, threads=threads, progress=progress,
    )


def integrate_jump(
        model: ModelSpec, strategy: Strategy, rho0: Union[QubitState, Matrix2, None], T: float, ode_dt: float,
        seed: int, repair_factor: float = REPAIR_FACTOR,
) -> JumpPath:
    return integrate_jump_ensemble(
        model, strategy, rho0, T, ode_dt, 1, seed, repair_factor=repair_factor, threads=1).jump_path(0)


def rescaled_waits(paths: Union[JumpPath, PathEnsemble], first_only: bool = False) -> np.ndarray:
    """Compensator increments ∫Tr J dt between consecutive jumps.

    Under the correct intensity these are Exp(1) before censoring at the horizon. Completed waits of a
    finite window are biased short; with ``first_only`` each path contributes only its first wait, which
    is Exp(1) truncated at ∫₀ᵀ Tr J dt.
    """
    if isinstance(paths, JumpPath):
        comps = [paths.compensator]
    elif paths.compensators is not None:
        comps = paths.compensators
    else:
        raise ContinuousException("Diffusive paths have no jumps")
    waits = [np.diff(np.concatenate([[0.0], c])) for c in comps]
    if first_only:
        waits = [w[:1] for w in waits]
    return np.concatenate(waits + [np.empty(0)])
