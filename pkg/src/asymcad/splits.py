"""Case-level train/val/test assignment.

The published fractions 65/15/25 sum to 105%, so they are normalized to
sum to one before use; counts use largest-remainder rounding.
"""

from __future__ import annotations

import numpy as np


class ConfigError(Exception):
    pass


SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.65, 0.15, 0.25)


def split_counts(n: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    total = float(sum(fractions))
    norm = [f / total for f in fractions]
    raw = [n * f for f in norm]
    counts = [int(x) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    for i in sorted(range(3), key=lambda i: -remainders[i])[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def split_cases(case_ids: list, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> dict:
    """Disjoint case-level assignment, deterministic per seed."""
    if len(case_ids) < 3:
        raise ConfigError("need at least 3 cases to split")
    rng = np.random.default_rng(seed)
    order = list(np.array(case_ids, dtype=object)[rng.permutation(len(case_ids))])
    n_train, n_val, n_test = split_counts(len(case_ids), fractions)
    tags = {}
    for i, cid in enumerate(order):
        if i < n_train:
            tags[cid] = "train"
        elif i < n_train + n_val:
            tags[cid] = "val"
        else:
            tags[cid] = "test"
    return tags
