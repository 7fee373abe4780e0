"""Synthetic block-structured interaction data for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import IdIndex, Interactions, RatingRecord


def two_block_pairs(
    n_users: int = 200,
    n_items: int = 300,
    mean_degree: float = 15.0,
    in_block: float = 0.98,
    skew: float = 1.2,
    seed: int = 0,
) -> np.ndarray:
    """Unique (user, item) pairs where users in block k mostly pick items in block k.

    Users and items are split in halves. User activity is log-normal around
    ``mean_degree`` and item popularity within a block follows a power law
    with exponent ``skew``, giving heavy-tailed degrees on both sides.
    """
    rng = np.random.default_rng(seed)
    ub = np.arange(n_users) >= n_users // 2
    blocks = [np.arange(n_items // 2), np.arange(n_items // 2, n_items)]
    pop = []
    for items in blocks:
        w = (1.0 + rng.permutation(items.size)) ** -skew
        pop.append(w / w.sum())
    activity = np.clip(rng.lognormal(np.log(mean_degree) - 0.32, 0.8, n_users), 2, n_items // 4).astype(int)
    pairs = []
    for u in range(n_users):
        own = int(ub[u])
        n_in = rng.binomial(activity[u], in_block)
        for block, k in ((own, n_in), (1 - own, activity[u] - n_in)):
            if k <= 0:
                continue
            k = min(k, blocks[block].size)
            chosen = rng.choice(blocks[block], size=k, replace=False, p=pop[block])
            pairs.extend((u, int(i)) for i in chosen)
    return np.array(sorted(pairs), dtype=np.int64)


def two_block_interactions(n_users: int = 200, n_items: int = 300, seed: int = 0, **kw) -> Interactions:
    pairs = two_block_pairs(n_users, n_items, seed=seed, **kw)
    users = IdIndex(f"u{u}" for u in range(n_users))
    items = IdIndex(f"i{i}" for i in range(n_items))
    return Interactions(users, items, pairs, "all")


def two_block_records(n_users: int = 200, n_items: int = 300, seed: int = 0, **kw) -> list[RatingRecord]:
    rng = np.random.default_rng(seed + 1)
    pairs = two_block_pairs(n_users, n_items, seed=seed, **kw)
    return [RatingRecord(f"u{u}", f"i{i}", float(rng.integers(1, 6))) for u, i in pairs]


def block_of(node: int, n: int) -> int:
    return int(node >= n // 2)
