"""CSV and JSON output of simulation results."""

import csv
import json
import math
import pathlib
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .continuous import PathEnsemble
from .discrete import DiscreteEnsemble
from .harness import ConvergenceReport
from .optimal import ValueGrid
from .qcore import bloch_coords


class RecordsException(Exception):
    pass


PathLike = Union[str, pathlib.Path]

TRAJECTORY_HEADER = ['sample', 'step', 't', 'x', 'y', 'z', 'u', 'outcome']
JUMPS_HEADER = ['sample', 'jump_time']
VALUE_GRID_HEADER = ['k', 'x', 'y', 'z', 'V', 'u']
SAMPLES_HEADER = ['sample', 'x', 'y', 'z']


def fmt(value: Any, digits: int = 17) -> str:
    """Floats with `digits` significant digits; NaN becomes an empty cell."""
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ''
    return f'{value:.{digits}g}'


def to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, pathlib.PurePath):
        return str(value)
    return value


def write_json(path: PathLike, data: Dict[str, Any]) -> None:
    try:
        with open(path, 'w', encoding='utf-8') as fd:
            json.dump(to_jsonable(data), fd, separators=(',', ':'), sort_keys=True)
            fd.write('\n')
    except OSError as ex:
        raise RecordsException(f"Could not write {path}: {ex}") from None


def _write_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    try:
        with open(path, 'w', encoding='utf-8', newline='') as fd:
            writer = csv.writer(fd, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as ex:
        raise RecordsException(f"Could not write {path}: {ex}") from None


def trajectory_rows(
        ens: Union[DiscreteEnsemble, PathEnsemble], digits: int = 17,
) -> Iterable[List[str]]:
    """Row k of a sample holds ρ_k with the control and outcome that produced it; row 0 has neither."""
    bloch = bloch_coords(ens.states)
    if isinstance(ens, DiscreteEnsemble):
        outcomes = ens.outcomes
    elif ens.jumps_in_step is not None:
        outcomes = ens.jumps_in_step
    else:
        outcomes = None

    for i in range(ens.samples):
        for r, step in enumerate(ens.steps):
            first = r == 0 and step == 0
            outcome = '' if outcomes is None or first else str(int(outcomes[i, r]))
            yield [
                str(i), str(int(step)), fmt(ens.times[r], digits),
                fmt(bloch[i, r, 0], digits), fmt(bloch[i, r, 1], digits), fmt(bloch[i, r, 2], digits),
                '' if first else fmt(ens.controls[i, r], digits), outcome,
            ]


def write_trajectories(path: PathLike, ens: Union[DiscreteEnsemble, PathEnsemble], digits: int = 17) -> None:
    _write_rows(path, TRAJECTORY_HEADER, trajectory_rows(ens, digits))


def write_jumps(path: PathLike, ens: PathEnsemble, digits: int = 17) -> None:
    if ens.jump_times is None:
        raise RecordsException("Diffusive paths have no jumps")
    rows = ([str(i), fmt(t, digits)] for i, times in enumerate(ens.jump_times) for t in times)
    _write_rows(path, JUMPS_HEADER, rows)


def write_value_grid(path: PathLike, grid: ValueGrid, digits: int = 17) -> None:
    """One row per stage and grid point; the terminal stage has no control."""
    def rows() -> Iterable[List[str]]:
        points = grid.grid.points
        for k in range(grid.horizon + 1):
            for j, (x, y, z) in enumerate(points):
                u = '' if k == grid.horizon else fmt(grid.policy[k, j], digits)
                yield [str(k), fmt(x, digits), fmt(y, digits), fmt(z, digits), fmt(grid.values[k, j], digits), u]

    _write_rows(path, VALUE_GRID_HEADER, rows())


def write_samples(path: PathLike, bloch: np.ndarray, digits: int = 17) -> None:
    rows = ([str(i)] + [fmt(c, digits) for c in v] for i, v in enumerate(bloch))
    _write_rows(path, SAMPLES_HEADER, rows)


def _time_tag(t: float) -> str:
    return f'{t:.17g}'.replace('.', 'p').replace('-', 'm')


def write_report(out_dir: PathLike, report: ConvergenceReport, digits: int = 17) -> List[pathlib.Path]:
    """report.json plus the raw Bloch samples behind every checkpoint."""
    out = pathlib.Path(out_dir)
    written = [out / 'report.json']
    write_json(written[0], report.to_dict())
    for t, v in report.reference_samples.items():
        written.append(out / f'reference_t{_time_tag(t)}.csv')
        write_samples(written[-1], v, digits)
    for (n, t), v in report.discrete_samples.items():
        written.append(out / f'discrete_n{n}_t{_time_tag(t)}.csv')
        write_samples(written[-1], v, digits)
    return written


def write_run(out_dir: PathLike, config: Dict[str, Any], results: Optional[Dict[str, Any]] = None) -> pathlib.Path:
    path = pathlib.Path(out_dir) / 'run.json'
    doc = {'config': config}
    if results is not None:
        doc['results'] = results
    write_json(path, doc)
    return path


def ensure_dir(path: PathLike) -> pathlib.Path:
    out = pathlib.Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise RecordsException(f"Could not create {out}: {ex}") from None
    return out
