import numpy as np
import pytest

from reidpipe.store import EmbeddingSet, SampleMeta


def build_set(features, pids=None, camids=None, splits=None, domains=None, camstyle=None, indices=None):
    """EmbeddingSet from arrays with per-column defaults."""
    features = np.asarray(features, dtype=np.float32)
    n = features.shape[0]
    pids = list(pids) if pids is not None else [0] * n
    camids = list(camids) if camids is not None else [0] * n
    splits = list(splits) if splits is not None else ["gallery"] * n
    domains = list(domains) if domains is not None else ["target"] * n
    camstyle = list(camstyle) if camstyle is not None else [False] * n
    indices = list(indices) if indices is not None else list(range(n))
    meta = [
        SampleMeta(indices[i], int(pids[i]), int(camids[i]), domains[i], splits[i], bool(camstyle[i]))
        for i in range(n)
    ]
    return EmbeddingSet(features, meta)


@pytest.fixture
def nprng():
    return np.random.default_rng(20240817)
