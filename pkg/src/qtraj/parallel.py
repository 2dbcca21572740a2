from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar
import zlib

import numpy as np
import psutil
import tqdm

from .const import CHUNK_SIZE


T = TypeVar('T')


def label_key(label: str) -> int:
    return zlib.crc32(label.encode())


def substream(seed: int, label: str, index: int) -> np.random.Generator:
    """Counter-based generator owned by one sample of one experiment."""
    seq = np.random.SeedSequence(seed, spawn_key=(label_key(label), index))
    return np.random.Generator(np.random.Philox(seq))


def substreams(seed: int, label: str, indices: Sequence[int]) -> List[np.random.Generator]:
    return [substream(seed, label, i) for i in indices]


def derive_seed(seed: int, *labels: object) -> int:
    """A 64-bit seed for a sub-experiment, e.g. one n of a convergence study."""
    key = tuple(label_key(str(label)) for label in labels)
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, dtype=np.uint64)[0])


def default_threads() -> int:
    return psutil.cpu_count(logical=True) or 1


def chunks(samples: int, chunk_size: int = CHUNK_SIZE) -> List[range]:
    return [range(start, min(start + chunk_size, samples)) for start in range(0, samples, chunk_size)]


def run_chunked(
        func: Callable[[range], T], samples: int, threads: Optional[int] = None,
        desc: Optional[str] = None,
) -> List[T]:
    """Apply ``func`` to consecutive chunks of sample indices; results keep chunk order."""
    parts = chunks(samples)
    workers = threads if threads and threads > 0 else default_threads()
    workers = max(1, min(workers, len(parts)))

    with tqdm.tqdm(desc=desc, total=samples, unit='path', disable=desc is None) as t:
        if workers == 1:
            results = []
            for part in parts:
                results.append(func(part))
                t.update(len(part))
            return results

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(func, part) for part in parts]
            results = []
            for part, future in zip(parts, futures):
                results.append(future.result())
                t.update(len(part))
            return results
