import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def spawn_generators(seed: int, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


class JobPool:
    def __init__(self, jobs: int = 1, name: str = "pipeline"):
        self.jobs = max(int(jobs), 1)
        self.name = name

    def map(self, fn: Callable[[T, np.random.Generator], R], items: Sequence[T], seed: int) -> List[R]:
        """fn(item, rng) for every item; results come back in input order."""
        items = list(items)
        generators = spawn_generators(seed, len(items))
        if self.jobs == 1 or len(items) <= 1:
            return [fn(item, rng) for item, rng in zip(items, generators)]
        logger.debug(f"Running {len(items)} {self.name} jobs on {self.jobs} workers")
        with ThreadPoolExecutor(max_workers=self.jobs, thread_name_prefix=self.name) as executor:
            futures = [executor.submit(fn, item, rng) for item, rng in zip(items, generators)]
            return [future.result() for future in futures]
