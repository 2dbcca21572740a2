"""Statistical checks of the discrete-to-continuous convergence."""

from dataclasses import dataclass, field
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.special import kolmogi

from .continuous import PathEnsemble, integrate_diffusive_ensemble, integrate_jump_ensemble
from .continuous import record_steps_for as continuous_record_steps
from .discrete import DiscreteEnsemble, Strategy, StrategyKind, simulate_chain_ensemble
from .discrete import record_steps_for as discrete_record_steps
from .model import ModelSpec, ObservableKind, ObservableSpec
from .parallel import derive_seed
from .qcore import Matrix2, QubitState


class HarnessException(Exception):
    pass


COORDINATES = ('x', 'y', 'z')


def ks_distance(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise HarnessException("KS distance needs two nonempty samples")
    return float(stats.ks_2samp(a, b).statistic)


def ks_null_threshold(m1: int, m2: int, alpha: float = 0.01) -> float:
    """Asymptotic (1 − alpha) quantile of the two-sample KS distance under equal laws."""
    return float(kolmogi(alpha)) * math.sqrt((m1 + m2) / (m1 * m2))


def ks_noise(m1: int, m2: int) -> float:
    """Standard deviation of the two-sample KS distance under equal laws."""
    return float(stats.kstwobign.std()) * math.sqrt((m1 + m2) / (m1 * m2))


Samples = Union[DiscreteEnsemble, PathEnsemble, np.ndarray]


def _bloch_at(paths: Samples, time: Optional[float]) -> np.ndarray:
    if isinstance(paths, np.ndarray):
        return paths
    if time is None:
        raise HarnessException("A time is required to read an ensemble")
    return paths.bloch(time)


def empirical_moments(paths: Samples, time: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Mean Bloch vector and unbiased 3×3 covariance across paths at the given time."""
    v = _bloch_at(paths, time)
    if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 2:
        raise HarnessException("Moments need at least two Bloch samples")
    return v.mean(axis=0), np.cov(v, rowvar=False, ddof=1)


@dataclass
class Checkpoint:
    n: int
    time: float
    distances: Tuple[float, float, float]
    mean_gap: float
    covariance_gap: float

    @property
    def max_distance(self) -> float:
        return max(self.distances)


@dataclass
class ConvergenceReport:
    model: str
    observable: str
    strategy: str
    n_list: List[int]
    times: List[float]
    samples: int
    seed: int
    reference: Dict[str, Any]
    checkpoints: List[Checkpoint]
    threshold: float
    noise: float
    discrete_samples: Dict[Tuple[int, float], np.ndarray] = field(default_factory=dict, repr=False)
    reference_samples: Dict[float, np.ndarray] = field(default_factory=dict, repr=False)

    def distance(self, n: int, time: float) -> float:
        for c in self.checkpoints:
            if c.n == n and abs(c.time - time) < 1e-12:
                return c.max_distance
        raise HarnessException(f"No checkpoint at n = {n}, t = {time:g}")

    def trend(self, time: Optional[float] = None) -> List[float]:
        t = self.times[-1] if time is None else time
        return [self.distance(n, t) for n in self.n_list]

    @property
    def non_increasing(self) -> bool:
        d = self.trend()
        return all(b <= a + 2.0 * self.noise for a, b in zip(d[:-1], d[1:]))

    @property
    def improved(self) -> bool:
        d = self.trend()
        return len(d) > 1 and d[-1] < d[0] - 2.0 * self.noise

    @property
    def within_threshold(self) -> bool:
        return all(c.max_distance <= self.threshold for c in self.checkpoints)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model,
            'observable': self.observable,
            'strategy': self.strategy,
            'n_list': self.n_list,
            'times': self.times,
            'samples': self.samples,
            'seed': self.seed,
            'reference': self.reference,
            'ks_null_threshold': self.threshold,
            'ks_noise': self.noise,
            'checkpoints': [
                {
                    'n': c.n,
                    'time': c.time,
                    'ks': dict(zip(COORDINATES, c.distances)),
                    'mean_gap': c.mean_gap,
                    'covariance_gap': c.covariance_gap,
                }
                for c in self.checkpoints
            ],
            'non_increasing': self.non_increasing,
            'improved': self.improved,
        }


def _reference(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, rho0: Union[QubitState, Matrix2, None],
        T: float, times: Sequence[float], M: int, seed: int, dt: float, threads: Optional[int], progress: bool,
) -> PathEnsemble:
    recorded = continuous_record_steps(times, dt)
    if obs.kind is ObservableKind.DIAGONAL:
        return integrate_jump_ensemble(
            model, strategy, rho0, T, dt, M, seed, record_steps=recorded, threads=threads,
            progress='jump reference' if progress else None,
        )
    return integrate_diffusive_ensemble(
        model, strategy, rho0, dt, T, M, seed, record_steps=recorded, threads=threads,
        progress='diffusive reference' if progress else None,
    )


def run_convergence(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n_list: Sequence[int], times: Sequence[float],
        M: int, seed: int, reference_dt: float = 1e-4, rho0: Union[QubitState, Matrix2, None] = None,
        threads: Optional[int] = None, progress: bool = False,
) -> ConvergenceReport:
    """KS distances per Bloch coordinate between discrete chains and the matching continuous limit.

    A non-diagonal observable is compared with the diffusive equation, a diagonal one with the jump equation.
    """
    if not n_list or not times:
        raise HarnessException("At least one n and one checkpoint time are required")
    if M < 2:
        raise HarnessException("At least two samples are required")
    if strategy.kind is StrategyKind.HISTORY:
        raise HarnessException("Convergence runs take deterministic or Markovian strategies")
    if obs.kind is ObservableKind.NONDIAGONAL and min(abs(obs.P0[0, 0]), abs(obs.P1[0, 0])) == 0.0:
        raise HarnessException("Degenerate observable: the diffusive limit needs (P0)00 and (P1)00 nonzero")

    times = sorted(float(t) for t in times)
    T = times[-1]
    ref_seed = derive_seed(seed, 'reference')
    ref = _reference(model, obs, strategy, rho0, T, times, M, ref_seed, reference_dt, threads, progress)
    ref_samples = {t: ref.bloch(t) for t in times}
    ref_moments = {t: empirical_moments(v) for t, v in ref_samples.items()}

    checkpoints = []
    disc_samples = {}
    for n in sorted(int(n) for n in n_list):
        ens = simulate_chain_ensemble(
            model, obs, strategy, n, T, M, derive_seed(seed, 'n', n), rho0,
            record_steps=discrete_record_steps(times, n), threads=threads,
            progress=f'n = {n}' if progress else None,
        )
        for t in times:
            v = ens.bloch(t)
            disc_samples[(n, t)] = v
            mean, cov = empirical_moments(v)
            ref_mean, ref_cov = ref_moments[t]
            checkpoints.append(Checkpoint(
                n=n, time=t,
                distances=tuple(ks_distance(v[:, i], ref_samples[t][:, i]) for i in range(3)),
                mean_gap=float(np.max(np.abs(mean - ref_mean))),
                covariance_gap=float(np.max(np.abs(cov - ref_cov))),
            ))

    return ConvergenceReport(
        model=model.name, observable=obs.kind.value, strategy=strategy.name,
        n_list=sorted(int(n) for n in n_list), times=times, samples=M, seed=seed,
        reference={
            'integrator': 'jump' if obs.kind is ObservableKind.DIAGONAL else 'diffusive',
            'dt': reference_dt,
            'seed': ref_seed,
        },
        checkpoints=checkpoints, threshold=ks_null_threshold(M, M), noise=ks_noise(M, M),
        discrete_samples=disc_samples, reference_samples=ref_samples,
    )


@dataclass
class DonskerRow:
    n: int
    samples: int
    w_mean: float
    w_se: float
    qv_error: float
    qv_error_se: float

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def donsker_statistics(
        model: ModelSpec, obs: ObservableSpec, strategy: Strategy, n_list: Sequence[int], M: int, seed: int,
        T: float = 1.0, rho0: Union[QubitState, Matrix2, None] = None, threads: Optional[int] = None,
) -> List[DonskerRow]:
    """Mean and SE of W_n(T) and of ([W_n, W_n]_T − T)² across chains, for each n."""
    if M < 2:
        raise HarnessException("At least two samples are required")
    rows = []
    for n in n_list:
        ens = simulate_chain_ensemble(
            model, obs, strategy, int(n), T, M, derive_seed(seed, 'donsker', int(n)), rho0,
            record_steps=[0, int(round(T * n))], track_increments=True, threads=threads,
        )
        w = ens.w[:, -1]
        err = (ens.quadratic_variation[:, -1] - ens.times[-1]) ** 2
        rows.append(DonskerRow(
            n=int(n), samples=M,
            w_mean=float(np.mean(w)), w_se=float(np.std(w, ddof=1) / math.sqrt(M)),
            qv_error=float(np.mean(err)), qv_error_se=float(np.std(err, ddof=1) / math.sqrt(M)),
        ))
    return rows


@dataclass
class GoodnessOfFit:
    statistic: float
    pvalue: float

    def passed(self, level: float = 0.01) -> bool:
        return self.pvalue > level


def poisson_count_test(counts: Sequence[int], mean: float, min_expected: float = 5.0) -> GoodnessOfFit:
    """χ² goodness of fit of counts to Poisson(mean); sparse tail bins are pooled."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0 or mean <= 0.0:
        raise HarnessException("Poisson test needs counts and a positive mean")
    m = counts.size
    top = int(max(counts.max(), stats.poisson.ppf(1.0 - 1e-9, mean)))
    observed = np.bincount(counts, minlength=top + 1).astype(float)
    expected = m * stats.poisson.pmf(np.arange(top + 1), mean)
    expected[-1] += m * stats.poisson.sf(top, mean)

    obs_bins: List[float] = []
    exp_bins: List[float] = []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0.0 or acc_o > 0.0:
        if not exp_bins:
            raise HarnessException("Too few samples for a χ² test")
        obs_bins[-1] += acc_o
        exp_bins[-1] += acc_e
    if len(exp_bins) < 2:
        raise HarnessException("Too few populated bins for a χ² test")

    exp_arr = np.array(exp_bins)
    exp_arr *= m / exp_arr.sum()
    res = stats.chisquare(np.array(obs_bins), exp_arr)
    return GoodnessOfFit(float(res.statistic), float(res.pvalue))


def exponential_wait_test(waits: Sequence[float]) -> GoodnessOfFit:
    """One-sample KS test of waits against Exp(1)."""
    waits = np.asarray(waits, dtype=float)
    if waits.size == 0:
        raise HarnessException("Exponential test needs at least one wait")
    res = stats.kstest(waits, 'expon')
    return GoodnessOfFit(float(res.statistic), float(res.pvalue))
