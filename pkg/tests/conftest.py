import numpy as np
import pytest

from graphtok.graphs import Graph, build_csr


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_graph(n=8, seed=0, d_x=5, num_classes=2):
    """Connected-ish random graph with features and labels for unit tests."""
    r = np.random.default_rng(seed)
    pairs = [(i, (i + 1) % n) for i in range(n)]
    extra = r.integers(0, n, size=(n, 2))
    pairs.extend((int(u), int(v)) for u, v in extra if u != v)
    indptr, indices = build_csr(n, np.array(pairs))
    labels = r.integers(0, num_classes, size=n)
    g = Graph(num_nodes=n, indptr=indptr, indices=indices,
              features=r.normal(size=(n, d_x)), labels=labels)
    g.train_mask = np.zeros(n, dtype=bool)
    g.train_mask[: n // 2] = True
    g.valid_mask = np.zeros(n, dtype=bool)
    g.valid_mask[n // 2 : 3 * n // 4] = True
    g.test_mask = ~(g.train_mask | g.valid_mask)
    return g


@pytest.fixture
def graph8():
    return small_graph()
