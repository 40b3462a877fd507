"""Random valid responses and small shared utilities for the tests."""

import numpy as np

from grpo_plan.grammar import MAX_LEN, N_X, N_Y, VOCAB
from grpo_plan.world import MAX_DECISION_FILLERS, MAX_SLOT_FILLERS, SLOT_NAMES

FILLERS = np.flatnonzero(VOCAB.is_filler)
LATS = np.flatnonzero(VOCAB.is_lat)
LONS = np.flatnonzero(VOCAB.is_lon)


def random_think(rng, p_empty=0.2):
    """Token ids of a grammar-valid think body (possibly empty)."""
    budget = MAX_LEN - 17
    while True:
        if rng.random() < p_empty:
            return []
        ids = []
        for d in range(len(SLOT_NAMES) - 1):
            if rng.random() < 0.5:
                ids.append(VOCAB.slot_open[d])
                ids += list(rng.choice(FILLERS, rng.integers(1, MAX_SLOT_FILLERS + 1)))
                ids.append(VOCAB.SLOT_CLOSE)
        ids.append(VOCAB.slot_open[-1])
        ids += list(rng.choice(FILLERS, rng.integers(0, MAX_DECISION_FILLERS + 1)))
        ids += [int(rng.choice(LATS)), int(rng.choice(LONS))]
        ids.append(VOCAB.SLOT_CLOSE)
        if len(ids) <= budget:
            return [int(t) for t in ids]


def random_bins(rng):
    return np.stack([rng.integers(0, N_X, 6), rng.integers(0, N_Y, 6)], axis=1).ravel()


def assemble(think, bins):
    ids = [VOCAB.THINK_OPEN, *think, VOCAB.THINK_CLOSE, VOCAB.TRAJ_OPEN]
    for k, b in enumerate(bins):
        ids.append(VOCAB.x_token(b) if k % 2 == 0 else VOCAB.y_token(b))
    return ids + [VOCAB.TRAJ_CLOSE, VOCAB.EOS]


def random_valid_ids(rng, p_empty=0.2):
    return assemble(random_think(rng, p_empty), random_bins(rng))
