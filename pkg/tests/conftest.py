import numpy as np
import pytest

from ctpf import process_spec, simulate, simulate_dataset
from ctpf.processes import Dataset
from ctpf.rng import PATH, substream
from ctpf.sde import TimeGrid


class ZeroRng:
    """Stand-in generator whose normal draws are all zero (forces dW = 0)."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def regular_gbm_dataset(gap: float, horizon: float, n_sequences: int,
                        seed: int, dt_sim: float = 1e-4) -> Dataset:
    """GBM sequences observed on a fixed regular grid (gap, 2*gap, ..., T)."""
    spec = process_spec("gbm", horizon=horizon)
    grid = TimeGrid(np.arange(gap, horizon + 1e-9, gap))
    seqs = [simulate(spec, grid, dt_sim, substream(seed, PATH, j), seed=seed)
            for j in range(n_sequences)]
    return Dataset(spec=spec, intensity=1.0 / gap, dt_sim=dt_sim, seed=seed,
                   sequences=seqs)


@pytest.fixture(scope="session")
def gbm_small_dataset():
    """Six short sparse GBM sequences (lambda=2, T=2)."""
    spec = process_spec("gbm", horizon=2.0)
    return simulate_dataset(spec, 2.0, 6, 1e-4, seed=7)


@pytest.fixture(scope="session")
def gbm_regular_dataset():
    """Regular-grid GBM data in the regime where the filter tracks tightly."""
    return regular_gbm_dataset(gap=0.1, horizon=2.0, n_sequences=6, seed=42)
