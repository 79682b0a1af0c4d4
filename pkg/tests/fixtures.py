"""Random parameter and data generators shared by the test modules."""

import numpy as np

from hsmmrec.dataset import from_dense
from hsmmrec.model import HsmmParams


def random_params(rng, K, M, n_items, allow_self=False, r=(0.5, 3.0), p=(0.1, 0.8)):
    pi = rng.dirichlet(np.ones(K))
    if allow_self or K == 1:
        A = rng.dirichlet(np.ones(K), size=K)
    else:
        A = np.zeros((K, K))
        for j in range(K):
            A[j, np.arange(K) != j] = rng.dirichlet(np.ones(K - 1))
    return HsmmParams(pi, A, rng.dirichlet(np.ones(M), size=K), rng.dirichlet(np.ones(n_items), size=K),
                      rng.uniform(*r, (K, M)), rng.uniform(*p, (K, M)), allow_self or K == 1)


def random_fixture(seed, max_T=5, max_K=3, max_M=3, max_items=4, allow_self=False, users=1):
    """Small random (params, dense counts, dataset) triple for oracle comparisons."""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, max_T + 1))
    K = int(rng.integers(2, max_K + 1))
    M = 1 if allow_self else int(rng.integers(1, max_M + 1))
    n_items = int(rng.integers(1, max_items + 1))
    params = random_params(rng, K, M, n_items, allow_self)
    x = rng.poisson(rng.uniform(0.3, 2.0), (users, T, n_items))
    return params, x, from_dense(x)
