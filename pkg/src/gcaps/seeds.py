"""Random-stream derivation: every consumer gets its own generator keyed by
(root seed, role, index), so adding a stream never perturbs the others."""

from __future__ import annotations

import numpy as np

SEED_ROLE_INIT = 0        # parameter initialization
SEED_ROLE_SHUFFLE = 1     # epoch shuffling
SEED_ROLE_AUGMENT = 2     # augmentation draws
SEED_ROLE_SYNTHETIC = 3   # synthetic dataset content
SEED_ROLE_TRIALS = 4      # analysis trial tensors


def derived_rng(root_seed: int, role: int, index: int = 0) -> np.random.Generator:
    """One independent random stream per (root seed, role, index) triple."""
    return np.random.default_rng(np.random.SeedSequence((root_seed, role, index)))
