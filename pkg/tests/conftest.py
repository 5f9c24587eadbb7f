import numpy as np
import pytest

from sbd.kernels import warmup
from sbd.model import DenoiserConfig, DenoiserModel


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    warmup(np.float32)
    warmup(np.float64)


def tiny_model(seed=0, vocab=5, L=12, dtype=np.float32, n_layers=2,
               n_heads=2, d_model=16):
    cfg = DenoiserConfig(vocab_size=vocab, max_len=L, n_layers=n_layers,
                         n_heads=n_heads, d_model=d_model)
    return DenoiserModel(cfg, seed=seed, dtype=dtype)


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))
