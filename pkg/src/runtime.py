"""Defines functions used for controlling the runtime of an analysis: seeding, random substreams and parallelism."""

import os
import random
from typing import Any, Callable, Iterable

import numpy as np
from joblib import Parallel, delayed

# Spawn-key namespaces, so that different consumers of the master seed never share a stream.
BOOTSTRAP_STREAM = 1
EM_ITERATION_STREAM = 2
U_DRAW_STREAM = 3
SENSITIVITY_DRAW_STREAM = 4
SIMULATION_STREAM = 5
BENCHMARK_STREAM = 6
POPULATION_STREAM = 7
SENSITIVITY_GRID_STREAM = 8


def set_universal_seed(seed: int) -> None:
    """Sets a given seed across the random number generators of the standard library and NumPy.

    The toolkit itself only draws from explicit generators (see `generator`), this only guards third party code
    that falls back to global state.

    Args:
        seed (int): The seed passed to the various libraries.
    """

    random.seed(seed)
    np.random.seed(seed % 2**32)


def generator(seed: int, *key: int) -> np.random.Generator:
    """Returns a NumPy generator for the substream of `seed` identified by `key`.

    The same `(seed, key)` pair always yields the same stream, regardless of which worker asks for it or in which order.

    Args:
        seed (int): The master seed.
        *key (int): The spawn key identifying the consumer, e.g. ``(BOOTSTRAP_STREAM, replicate)``.

    Returns:
        np.random.Generator: A PCG64 generator.
    """

    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """Derives a child integer seed from a master seed, for consumers that take a seed instead of a generator.

    Args:
        seed (int): The master seed.
        *key (int): The spawn key identifying the consumer.

    Returns:
        int: A 63-bit child seed.
    """

    state = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key)).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def get_worker_count(requested: int | None = None) -> int:
    """Returns the number of workers to run concurrent tasks on.

    If no count is requested, returns the available parallelism of the machine.

    Args:
        requested (int | None): The worker count requested by the user, if any.

    Returns:
        int: The number of workers, at least 1.
    """

    if requested is None or requested <= 0:
        return max(1, os.cpu_count() or 1)

    return int(requested)


def parallel_map(function: Callable[[Any], Any], items: Iterable[Any], workers: int = 1) -> list[Any]:
    """Applies `function` to every item, possibly concurrently, and returns the results in input order.

    Args:
        function (Callable[[Any], Any]): The task to run per item.
        items (Iterable[Any]): The task inputs.
        workers (int, optional): The maximum number of concurrent tasks. Defaults to 1 (sequential).

    Returns:
        list[Any]: The results, ordered like `items`.
    """

    items = list(items)

    if workers <= 1 or len(items) <= 1:
        return [function(item) for item in items]

    return Parallel(n_jobs=min(workers, len(items)), prefer="threads")(delayed(function)(item) for item in items)
