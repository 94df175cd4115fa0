import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mbf.model import ArchConfig, init_model


def toy_arch(dropout=0.0):
    return ArchConfig(input_dim=10, hidden_dims=[8], shared_dim=4, private_dim=2, dropout=dropout)


def toy_batches(M=2, K=2, B=4, seed=0, dim=10):
    rng = np.random.default_rng(seed)
    labeled = [(rng.poisson(1.0, size=(B, dim)).astype(float), rng.integers(0, K, size=B))
               for _ in range(M)]
    unlabeled = [rng.poisson(1.0, size=(B, dim)).astype(float) for _ in range(M)]
    return labeled, unlabeled


def domain_probe_accuracy(datasets, seed=0):
    """Train a raw-feature linear domain classifier; report held-out accuracy."""
    X = np.vstack([ds.unlabeled.toarray() for ds in datasets])
    y = np.concatenate([np.full(ds.unlabeled.shape[0], d) for d, ds in enumerate(datasets)])
    idx = np.random.default_rng(seed).permutation(len(y))
    half = len(y) // 2
    clf = LogisticRegression(max_iter=2000).fit(X[idx[:half]], y[idx[:half]])
    return clf.score(X[idx[half:]], y[idx[half:]])


@pytest.fixture
def toy_model():
    return init_model(toy_arch(), num_domains=2, num_classes=2, rng_seed=0)


@pytest.fixture
def batches():
    return toy_batches()
