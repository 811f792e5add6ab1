"""Deterministic seed derivation.

Every random draw in a run flows from (run_seed, namespace, position...)
through SeedSequence, so any part of a run can be reproduced or resumed
without carrying generator state around.
"""

from __future__ import annotations

import numpy as np

# namespaces for the independent streams of one run
NS_MODEL_INIT = 1
NS_BATCH_META = 2
NS_ORDINARY_GEN = 3
NS_EPISODE = 4
NS_GATES = 5
NS_EVAL = 6
NS_AGENT_RESET = 11


def derive_seed(*parts: int) -> int:
    ss = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(ss.generate_state(1, np.uint64)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(p) for p in parts)))
