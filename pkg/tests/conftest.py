import numpy as np
import pytest

import nomadmf as nm

# The desk-scale benchmark preset shared by the integration and
# acceptance tests (matches the CLI `synthetic` preset).
PRESET_DATA = dict(
    n_users=2000, n_items=500, k_true=10, noise_sd=0.1, nnz=120000, exponent=3.0, seed=42
)
PRESET_PARAMS = dict(k=10, lam=0.01, alpha=0.04, beta=0.03, reg_mode="plain")
PRESET_TEST_FRACTION = 0.1
PRESET_SPLIT_SEED = 1


@pytest.fixture(scope="session")
def preset_dataset():
    entries, W_true, H_true = nm.generate_synthetic(nm.SyntheticSpec(**PRESET_DATA))
    train, test = nm.split_train_test(entries, PRESET_TEST_FRACTION, seed=PRESET_SPLIT_SEED)
    return entries, train, test, W_true, H_true


@pytest.fixture(scope="session")
def preset_params():
    return nm.HyperParams(**PRESET_PARAMS)


@pytest.fixture
def shard_for():
    def make(entries, p):
        return nm.shard(entries, nm.partition_rows(entries.m, p))

    return make


def random_instance(rng, m, n, k, density=0.6, value_sd=1.0):
    """A dense-ish random rating instance with every row/column nonempty."""
    mask = rng.random((m, n)) < density
    for i in range(m):
        if not mask[i].any():
            mask[i, rng.integers(n)] = True
    for j in range(n):
        if not mask[:, j].any():
            mask[rng.integers(m), j] = True
    users, items = np.nonzero(mask)
    values = value_sd * rng.standard_normal(len(users))
    return nm.Entries(users, items, values, m=m, n=n)
