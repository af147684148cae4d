"""Counter-based random streams for reproducible parallel runs."""

from __future__ import annotations

import numpy as np

_WORD = 1 << 64


def spawn_rng(master_seed: int, task_index: int = 0) -> np.random.Generator:
    """Independent stream keyed by (master_seed, task_index).

    Philox is counter-based, so streams with distinct keys never overlap and
    the draws of a task cannot depend on which worker executes it or in what
    order tasks are scheduled.
    """
    key = np.array([master_seed % _WORD, task_index % _WORD], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
