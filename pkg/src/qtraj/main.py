import argparse
from functools import wraps
from importlib import metadata as importlib_metadata
import math
import os
import pathlib
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import ConfigException, get_config_file, get_float, get_int
from .continuous import (
    ContinuousException, PathEnsemble, StepSizeError, integrate_diffusive_ensemble, integrate_jump_ensemble,
)
from .continuous import step_count as integrator_steps
from .discrete import DiscreteException, Strategy, coupled_chain_ensemble, simulate_chain_ensemble
from .discrete import step_count as chain_steps
from .fluorescence import (
    FluorescenceException, FluorescenceModel, LaserProfile, integrate_fluorescence_ensemble, photon_statistics,
    simulate_fluorescence_ensemble,
)
from .harness import HarnessException, run_convergence
from .model import (
    ControlInterval, ModelDocument, ModelException, ObservableKind, ObservableSpec, load_model, parse_initial_state,
)
from .optimal import (
    BlochGrid, CostSpec, OptimalException, brute_force_tree, evaluate_strategy_mc, hjb_backward, hjb_exact_tree,
)
from .qcore import NumericalDriftError, QcoreException, bloch_coords
from .records import (
    RecordsException, ensure_dir, fmt, write_jumps, write_report, write_run, write_trajectories, write_value_grid,
)


SEED_ENV = 'QTRAJ_SEED'

# Flags that fall back to config.ini when omitted.
CONFIG_DEFAULTS: Dict[str, Tuple[str, str, Callable[[str, str], Any]]] = {
    'dt': ('integrator', 'diffusive_dt', get_float),
    'ode_dt': ('integrator', 'ode_dt', get_float),
    'repair_factor': ('integrator', 'repair_factor', get_float),
    'controls': ('optimal', 'controls', get_int),
    'grid_spacing': ('optimal', 'grid_spacing', get_float),
    'digits': ('output', 'digits', get_int),
}

DRIFT_EXIT = 3
CONFIG_EXIT = 2


def package_version() -> str:
    try:
        return importlib_metadata.version('qtraj')
    except importlib_metadata.PackageNotFoundError:
        return 'unknown'


def parse_seed(value: str) -> int:
    try:
        seed = int(value, 0)
    except ValueError:
        raise ConfigException(f"Seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigException(f"Seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return parse_seed(env) if env else parse_seed(str(seed))


def _clamped_gain(axis: int, gain: float, interval: ControlInterval) -> Callable[[float, np.ndarray], np.ndarray]:
    def law(t: float, rho: np.ndarray) -> np.ndarray:
        return interval.clip(gain * bloch_coords(rho)[..., axis])
    return law


def parse_strategy(spec: str, interval: ControlInterval) -> Strategy:
    """Strategy mini-language.

    det:const:<v>, det:zero, det:sin[:<amp>[:<freq>]] (amp·sin(freq·t), defaults 0.5 and 1),
    markov:bloch_<x|y|z>_gain:<g> (g times a Bloch coordinate, clamped to the control interval).
    """
    parts = spec.split(':')
    try:
        params = [float(p) for p in parts[2:]]
    except ValueError:
        raise ConfigException(f"Bad strategy parameters in {spec!r}") from None

    if parts[0] == 'det' and len(parts) >= 2:
        name = parts[1]
        if name == 'zero' and not params:
            return Strategy.deterministic(lambda t: 0.0, name=spec)
        if name == 'const' and len(params) == 1:
            value = params[0]
            return Strategy.deterministic(lambda t: value, name=spec)
        if name == 'sin' and len(params) <= 2:
            amp, freq = (params + [0.5, 1.0][len(params):])
            return Strategy.deterministic(lambda t: amp * math.sin(freq * t), name=spec)
    elif parts[0] == 'markov' and len(parts) == 3:
        name = parts[1]
        axes = {'bloch_x_gain': 0, 'bloch_y_gain': 1, 'bloch_z_gain': 2}
        if name in axes:
            return Strategy.markovian(_clamped_gain(axes[name], params[0], interval), name=spec)

    raise ConfigException(
        f"Unknown strategy {spec!r}; expected det:const:<v>, det:zero, det:sin[:<amp>[:<freq>]] "
        f"or markov:bloch_<x|y|z>_gain:<g>")


def positive_int(value: str) -> int:
    out = int(value)
    if out < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return out


def positive_float(value: str) -> float:
    out = float(value)
    if not out > 0.0 or not math.isfinite(out):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return out


def int_list(value: str) -> List[int]:
    try:
        return [positive_int(v) for v in value.split(',')]
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of positive integers, got {value}") from None


def float_list(value: str) -> List[float]:
    try:
        return [positive_float(v) for v in value.split(',')]
    except (ValueError, argparse.ArgumentTypeError):
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of positive numbers, got {value}") from None


def _load(model: str, obs: Optional[str], alpha: Optional[float]) -> ModelDocument:
    doc = load_model(model)
    if obs is None:
        return doc
    observable = ObservableSpec.diagonal() if obs == 'diagonal' else ObservableSpec.nondiagonal(
        math.pi / 4 if alpha is None else alpha)
    return ModelDocument(doc.model, observable, doc.rho0)


def _record_every(steps: int, every: int) -> List[int]:
    return sorted(set(range(0, steps + 1, every)) | {steps})


def with_run(f: Callable) -> Callable:
    """Resolves seed and config defaults, creates the output directory and writes run.json."""
    @wraps(f)
    def wrapper(out: str, seed: int, threads: Optional[int], **kwargs: Any) -> None:
        seed = resolve_seed(seed)
        if threads is None:
            threads = get_int('run', 'threads')
        for key, (section, name, getter) in CONFIG_DEFAULTS.items():
            if key in kwargs and kwargs[key] is None:
                kwargs[key] = getter(section, name)

        out_dir = ensure_dir(out)
        results = f(out_dir=out_dir, seed=seed, threads=threads or None, **kwargs)
        # run.json omits --threads.
        config = {
            'command': f.__name__[len('cmd_'):].replace('_', '-'),
            'version': package_version(),
            'seed': seed,
            'out': str(out),
            **kwargs,
        }
        path = write_run(out_dir, config, results)
        print(f"Wrote {path}")

    return wrapper


@with_run
def cmd_simulate_discrete(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, obs: Optional[str],
        alpha: Optional[float], strategy: str, n: int, t: float, samples: int, every: int, coupled: bool,
        digits: int,
) -> Dict[str, Any]:
    doc = _load(model, obs, alpha)
    strat = parse_strategy(strategy, doc.model.controls)
    steps = chain_steps(n, t)
    print(f"Simulating {samples} chains of {steps} steps...")
    if coupled:
        ens = coupled_chain_ensemble(
            doc.model, doc.observable, strat, n, t, samples, seed, doc.rho0,
            record_steps=_record_every(steps, every), threads=threads, progress='chains')
    else:
        ens = simulate_chain_ensemble(
            doc.model, doc.observable, strat, n, t, samples, seed, doc.rho0,
            record_steps=_record_every(steps, every), threads=threads, progress='chains')
    write_trajectories(out_dir / 'trajectories.csv', ens, digits)
    return {'mean_events': float(np.mean(ens.event_counts))}


@with_run
def cmd_simulate_diffusive(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, strategy: str, dt: float,
        t: float, samples: int, every: int, repair_factor: float, digits: int,
) -> Dict[str, Any]:
    doc = load_model(model)
    strat = parse_strategy(strategy, doc.model.controls)
    steps = integrator_steps(dt, t)
    print(f"Integrating {samples} diffusive paths of {steps} steps...")
    ens = integrate_diffusive_ensemble(
        doc.model, strat, doc.rho0, dt, t, samples, seed, record_steps=_record_every(steps, every),
        repair_factor=repair_factor, threads=threads, progress='paths')
    write_trajectories(out_dir / 'trajectories.csv', ens, digits)
    return {}


def _write_jump_outputs(out_dir: pathlib.Path, ens: PathEnsemble, digits: int) -> Dict[str, Any]:
    write_trajectories(out_dir / 'trajectories.csv', ens, digits)
    write_jumps(out_dir / 'jumps.csv', ens, digits)
    return {'photons': photon_statistics(ens).to_dict()}


@with_run
def cmd_simulate_jump(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, strategy: str, ode_dt: float,
        t: float, samples: int, every: int, repair_factor: float, digits: int,
) -> Dict[str, Any]:
    doc = load_model(model)
    strat = parse_strategy(strategy, doc.model.controls)
    steps = integrator_steps(ode_dt, t)
    print(f"Integrating {samples} jump paths of {steps} steps...")
    ens = integrate_jump_ensemble(
        doc.model, strat, doc.rho0, t, ode_dt, samples, seed, record_steps=_record_every(steps, every),
        repair_factor=repair_factor, threads=threads, progress='paths')
    return _write_jump_outputs(out_dir, ens, digits)


@with_run
def cmd_converge(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, obs: Optional[str],
        alpha: Optional[float], strategy: str, n: List[int], times: List[float], samples: int, dt: float,
        ode_dt: float, digits: int,
) -> Dict[str, Any]:
    doc = _load(model, obs, alpha)
    strat = parse_strategy(strategy, doc.model.controls)
    ref_dt = ode_dt if doc.observable.kind is ObservableKind.DIAGONAL else dt
    report = run_convergence(
        doc.model, doc.observable, strat, n, times, samples, seed, reference_dt=ref_dt, rho0=doc.rho0,
        threads=threads, progress=True)

    print(f"{'n':>8}{'t':>10}{'KS x':>12}{'KS y':>12}{'KS z':>12}")
    for c in report.checkpoints:
        print(f"{c.n:>8}{c.time:>10g}" + ''.join(f'{d:>12.4f}' for d in c.distances))
    print(f"KS null threshold (99%): {report.threshold:.4f}, noise: {report.noise:.4f}")
    print(f"Non-increasing: {report.non_increasing}, improved: {report.improved}")

    write_report(out_dir, report, digits)
    return {'non_increasing': report.non_increasing, 'improved': report.improved}


def _initial_state(value: str) -> np.ndarray:
    if ',' in value:
        try:
            return parse_initial_state([float(v) for v in value.split(',')])
        except ValueError:
            raise ConfigException(f"Bad initial state {value!r}") from None
    return parse_initial_state(value)


@with_run
def cmd_fluorescence(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], k_laser: float, k_counter: float, laser: str,
        rho0: str, level: str, n: int, t: float, ode_dt: float, samples: int, every: int, digits: int,
) -> Dict[str, Any]:
    m = FluorescenceModel.sigma_minus(k_laser, k_counter)
    profile = LaserProfile.parse(laser)
    start = _initial_state(rho0)
    results: Dict[str, Any] = {}

    if level in ('discrete', 'both'):
        steps = chain_steps(n, t)
        print(f"Simulating {samples} discrete fluorescence chains...")
        ens = simulate_fluorescence_ensemble(
            m, profile, n, t, start, samples, seed, record_steps=_record_every(steps, every), threads=threads,
            progress='chains')
        write_trajectories(out_dir / 'discrete_trajectories.csv', ens, digits)
        results['discrete'] = photon_statistics(ens).to_dict()

    if level in ('limit', 'both'):
        steps = integrator_steps(ode_dt, t)
        print(f"Integrating {samples} fluorescence limit paths...")
        ens = integrate_fluorescence_ensemble(
            m, profile, start, t, ode_dt, samples, seed, record_steps=_record_every(steps, every),
            threads=threads, progress='paths')
        write_trajectories(out_dir / 'limit_trajectories.csv', ens, digits)
        write_jumps(out_dir / 'limit_jumps.csv', ens, digits)
        results['limit'] = photon_statistics(ens).to_dict()

    for key, stats in results.items():
        print(f"{key}: mean photons {stats['mean']:.6g}, histogram {stats['histogram']}")
    return results


def _optimal_setup(
        model: str, obs: Optional[str], alpha: Optional[float], cost: str, controls: int,
) -> Tuple[ModelDocument, CostSpec, np.ndarray]:
    doc = _load(model, obs, alpha)
    return doc, CostSpec.from_json(cost), doc.model.controls.grid(controls)


@with_run
def cmd_hjb(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, obs: Optional[str],
        alpha: Optional[float], cost: str, horizon: int, n: int, controls: int, grid_spacing: float,
        exact_tree: bool, brute_force: bool, digits: int,
) -> Dict[str, Any]:
    doc, cost_spec, grid = _optimal_setup(model, obs, alpha, cost, controls)

    if exact_tree or brute_force:
        solve = hjb_exact_tree if exact_tree else brute_force_tree
        solution = solve(doc.model, doc.observable, cost_spec, horizon, n, grid, doc.rho0)
        print(f"V0 = {fmt(solution.value, digits)}")
        return {
            'value': solution.value,
            'policy': {''.join(map(str, h)) or 'root': u for h, u in sorted(solution.policy.items())},
        }

    print(f"Solving {horizon} stages over a grid of spacing {grid_spacing:g}...")
    values = hjb_backward(doc.model, doc.observable, cost_spec, horizon, n, grid, BlochGrid.cube(grid_spacing))
    write_value_grid(out_dir / 'value_grid.csv', values, digits)
    v0 = float(values.value(0, bloch_coords(doc.rho0)))
    budget = values.interpolation_budget()
    print(f"V0 = {fmt(v0, digits)} (interpolation budget {budget:.6g})")
    return {'value': v0, 'interpolation_budget': budget}


@with_run
def cmd_evaluate_policy(
        out_dir: pathlib.Path, seed: int, threads: Optional[int], model: str, obs: Optional[str],
        alpha: Optional[float], cost: str, horizon: int, n: int, samples: int, strategy: str, controls: int,
        grid_spacing: float, digits: int,
) -> Dict[str, Any]:
    doc, cost_spec, grid = _optimal_setup(model, obs, alpha, cost, controls)
    results: Dict[str, Any] = {}
    if strategy == 'dp':
        values = hjb_backward(doc.model, doc.observable, cost_spec, horizon, n, grid, BlochGrid.cube(grid_spacing))
        strat = values.extract_policy(doc.model.controls).as_strategy()
        results['value'] = float(values.value(0, bloch_coords(doc.rho0)))
        results['interpolation_budget'] = values.interpolation_budget()
    else:
        strat = parse_strategy(strategy, doc.model.controls)

    mean, se = evaluate_strategy_mc(
        doc.model, doc.observable, strat, cost_spec, horizon, n, samples, seed, doc.rho0, threads=threads)
    results.update(mean=mean, se=se)
    print(f"Mean cost {fmt(mean, digits)} ± {fmt(se, digits)}")
    if 'value' in results:
        holds = results['value'] <= mean + 3.0 * se + results['interpolation_budget']
        results['bound_holds'] = holds
        print(f"DP value {fmt(results['value'], digits)}; within budget: {holds}")
    return results


def cmd_config_file() -> None:
    print(get_config_file())


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="Output directory", required=True)
    p.add_argument("--seed", help=f"64-bit seed (overridden by ${SEED_ENV})", type=str, default='0')
    p.add_argument("--threads", help="Worker threads (default: config, 0 = all cores)", type=int)
    p.add_argument("--digits", help="Significant digits of output floats", type=positive_int)


def _add_model_args(p: argparse.ArgumentParser, observable: bool = True) -> None:
    p.add_argument("--model", help="Model JSON file", required=True)
    if observable:
        p.add_argument("--obs", help="Observable (default: the model file's)", choices=['diagonal', 'nondiagonal'])
        p.add_argument("--alpha", help="Angle of the non-diagonal observable", type=float)


def _add_integrator_args(p: argparse.ArgumentParser, dt_name: str) -> None:
    p.add_argument(f"--{dt_name.replace('_', '-')}", dest=dt_name, help="Integrator step", type=positive_float)
    p.add_argument("--repair-factor", help="Repair tolerance per unit step", type=positive_float)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Simulate and control quantum trajectories of a measured qubit")

    parser.add_argument('--version', action='version', version=package_version())

    subparsers = parser.add_subparsers(metavar="<command>")
    subparsers.required = True

    discrete_p = subparsers.add_parser(
        "simulate-discrete",
        help="Simulate the repeated-measurement chain",
    )
    _add_model_args(discrete_p)
    _add_run_args(discrete_p)
    discrete_p.add_argument("--strategy", help="Control strategy", default='det:zero')
    discrete_p.add_argument("--n", help="Interactions per unit time", type=positive_int, required=True)
    discrete_p.add_argument("--t", help="Horizon", type=positive_float, default=1.0)
    discrete_p.add_argument("--samples", help="Number of chains", type=positive_int, default=1)
    discrete_p.add_argument("--every", help="Record every k-th step", type=positive_int, default=1)
    discrete_p.add_argument("--coupled", help="Drive outcomes with a Poisson field", action="store_true")
    discrete_p.set_defaults(func=cmd_simulate_discrete)

    diffusive_p = subparsers.add_parser(
        "simulate-diffusive",
        help="Integrate the diffusive equation",
    )
    _add_model_args(diffusive_p, observable=False)
    _add_run_args(diffusive_p)
    _add_integrator_args(diffusive_p, 'dt')
    diffusive_p.add_argument("--strategy", help="Control strategy", default='det:zero')
    diffusive_p.add_argument("--t", help="Horizon", type=positive_float, default=1.0)
    diffusive_p.add_argument("--samples", help="Number of paths", type=positive_int, default=1)
    diffusive_p.add_argument("--every", help="Record every k-th step", type=positive_int, default=1)
    diffusive_p.set_defaults(func=cmd_simulate_diffusive)

    jump_p = subparsers.add_parser(
        "simulate-jump",
        help="Integrate the jump equation by thinning",
    )
    _add_model_args(jump_p, observable=False)
    _add_run_args(jump_p)
    _add_integrator_args(jump_p, 'ode_dt')
    jump_p.add_argument("--strategy", help="Control strategy", default='det:zero')
    jump_p.add_argument("--t", help="Horizon", type=positive_float, default=1.0)
    jump_p.add_argument("--samples", help="Number of paths", type=positive_int, default=1)
    jump_p.add_argument("--every", help="Record every k-th step", type=positive_int, default=1)
    jump_p.set_defaults(func=cmd_simulate_jump)

    converge_p = subparsers.add_parser(
        "converge",
        help="Compare discrete chains with their continuous limit",
    )
    _add_model_args(converge_p)
    _add_run_args(converge_p)
    converge_p.add_argument("--strategy", help="Control strategy", default='det:zero')
    converge_p.add_argument("--n", help="Comma-separated interaction rates", type=int_list, default=[256, 1024, 4096])
    converge_p.add_argument("--times", help="Comma-separated checkpoint times", type=float_list, default=[1.0])
    converge_p.add_argument("--samples", help="Samples per ensemble", type=positive_int, default=4000)
    converge_p.add_argument("--dt", help="Diffusive reference step", type=positive_float)
    converge_p.add_argument("--ode-dt", help="Jump reference step", type=positive_float)
    converge_p.set_defaults(func=cmd_converge)

    fluorescence_p = subparsers.add_parser(
        "fluorescence",
        help="Simulate resonance fluorescence photon counting",
    )
    _add_run_args(fluorescence_p)
    fluorescence_p.add_argument("--k-laser", help="Laser channel decay rate", type=float, default=math.sqrt(0.5))
    fluorescence_p.add_argument("--k-counter", help="Counter channel decay rate", type=float, default=math.sqrt(0.5))
    fluorescence_p.add_argument("--laser", help="const:<v>, sin:<amp>:<freq> or a CSV table", default='const:0')
    fluorescence_p.add_argument("--rho0", help="Initial state: a name or x,y,z", default='excited')
    fluorescence_p.add_argument("--level", choices=['discrete', 'limit', 'both'], default='both')
    fluorescence_p.add_argument("--n", help="Interactions per unit time", type=positive_int, default=1024)
    fluorescence_p.add_argument("--t", help="Horizon", type=positive_float, default=1.0)
    fluorescence_p.add_argument("--ode-dt", help="Limit integrator step", type=positive_float)
    fluorescence_p.add_argument("--samples", help="Number of runs", type=positive_int, default=1)
    fluorescence_p.add_argument("--every", help="Record every k-th step", type=positive_int, default=1)
    fluorescence_p.set_defaults(func=cmd_fluorescence)

    hjb_p = subparsers.add_parser(
        "hjb",
        help="Solve the finite-horizon control problem by dynamic programming",
    )
    _add_model_args(hjb_p)
    _add_run_args(hjb_p)
    hjb_p.add_argument("--cost", help="Cost JSON file", required=True)
    hjb_p.add_argument("--horizon", help="Number of stages N", type=positive_int, required=True)
    hjb_p.add_argument("--n", help="Interactions per unit time", type=positive_int, default=10)
    hjb_p.add_argument("--controls", help="Points of the control grid", type=positive_int)
    hjb_p.add_argument("--grid-spacing", help="Bloch grid spacing", type=positive_float)
    method = hjb_p.add_mutually_exclusive_group()
    method.add_argument("--exact-tree", help="Solve on the exact outcome tree of rho0", action="store_true")
    method.add_argument("--brute-force", help="Enumerate every feedback strategy", action="store_true")
    hjb_p.set_defaults(func=cmd_hjb)

    evaluate_p = subparsers.add_parser(
        "evaluate-policy",
        help="Monte Carlo estimate of the expected cost of a strategy",
    )
    _add_model_args(evaluate_p)
    _add_run_args(evaluate_p)
    evaluate_p.add_argument("--cost", help="Cost JSON file", required=True)
    evaluate_p.add_argument("--horizon", help="Number of stages N", type=positive_int, required=True)
    evaluate_p.add_argument("--n", help="Interactions per unit time", type=positive_int, default=10)
    evaluate_p.add_argument("--samples", help="Number of chains (at least 100)", type=positive_int, default=1000)
    evaluate_p.add_argument("--strategy", help="Control strategy, or 'dp' for the grid DP policy", default='dp')
    evaluate_p.add_argument("--controls", help="Points of the control grid", type=positive_int)
    evaluate_p.add_argument("--grid-spacing", help="Bloch grid spacing", type=positive_float)
    evaluate_p.set_defaults(func=cmd_evaluate_policy)

    config_file_p = subparsers.add_parser(
        "config-file",
        help="Print the path of config.ini",
    )
    config_file_p.set_defaults(func=cmd_config_file)

    args = parser.parse_args(argv)

    kwargs = vars(args)
    func = kwargs.pop('func')

    try:
        func(**kwargs)
    except (NumericalDriftError, StepSizeError) as ex:
        print(ex)
        return DRIFT_EXIT
    except (
        ConfigException, ModelException, QcoreException, DiscreteException, ContinuousException,
        FluorescenceException, OptimalException, HarnessException, RecordsException,
    ) as ex:
        print(ex)
        return CONFIG_EXIT

    return 0
