"""Parameter sets for generating synthetic drifting-interest data."""

from __future__ import annotations

import numpy as np

from .model import HsmmParams


def block_theta(K: int, n_items: int, concentration: float = 0.9, seed: int = 0) -> np.ndarray:
    """Item distributions whose mass sits mostly on disjoint item blocks.

    State ``k`` puts ``concentration`` of its mass on block ``k`` (items split
    evenly) and spreads the rest over all other items. Within-block weights are
    random so that rankings inside a block are informative.
    """
    if n_items < K:
        raise ValueError("need at least one item per state")
    rng = np.random.default_rng(seed)
    blocks = np.array_split(np.arange(n_items), K)
    theta = np.zeros((K, n_items))
    for k, block in enumerate(blocks):
        inside = rng.dirichlet(np.full(block.size, 2.0))
        outside = np.setdiff1d(np.arange(n_items), block)
        theta[k, block] = concentration * inside
        if outside.size:
            theta[k, outside] = (1 - concentration) * rng.dirichlet(np.full(outside.size, 2.0))
        else:
            theta[k, block] = inside
    return theta


def u_shaped_durations(M: int, edge: float = 0.45) -> np.ndarray:
    """Length-``M`` distribution with ``edge`` mass at both ends and the rest spread in between."""
    if M < 2:
        return np.ones(1)
    d = np.full(M, (1 - 2 * edge) / max(M - 2, 1)) if M > 2 else np.zeros(M)
    d[0] = d[-1] = edge if M > 2 else 0.5
    return d / d.sum()


def drifting_interest_params(K: int = 4, M: int = 4, n_items: int = 40, r: float = 4.0, mean_count: float = 6.0,
                             concentration: float = 0.9, edge: float = 0.45, seed: int = 0) -> HsmmParams:
    """HSMM with block item tastes, U-shaped stays and uniform switching between states.

    Every state shares the same duration law; the count law is NB with shape ``r``
    and mean ``mean_count`` for all (k, d).
    """
    pi = np.full(K, 1.0 / K)
    trans = (np.ones((K, K)) - np.eye(K)) / (K - 1)
    dur = np.tile(u_shaped_durations(M, edge), (K, 1))
    p = mean_count / (mean_count + r)
    return HsmmParams(pi, trans, dur, block_theta(K, n_items, concentration, seed),
                      np.full((K, M), r), np.full((K, M), p))


def recovery_params(K: int = 3, M: int = 3, n_items: int = 20, seed: int = 0) -> HsmmParams:
    """Well-separated states with distinct duration shapes, for recovery experiments."""
    shapes = np.array([[0.7, 0.2, 0.1], [0.1, 0.2, 0.7], [0.2, 0.6, 0.2]])
    rng = np.random.default_rng(seed)
    dur = np.vstack([shapes[k % 3][:M] for k in range(K)]) if M == 3 else rng.dirichlet(np.ones(M), size=K)
    dur = dur / dur.sum(axis=1, keepdims=True)
    trans = (np.ones((K, K)) - np.eye(K)) / max(K - 1, 1)
    return HsmmParams(np.full(K, 1.0 / K), trans, dur, block_theta(K, n_items, 0.95, seed),
                      np.full((K, M), 3.0), np.full((K, M), 0.7))
