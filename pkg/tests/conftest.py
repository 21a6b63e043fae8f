import numpy as np
import pytest

from dern.model import ExpertWeights, MoeLayer, MoeModel


def random_expert(rng, d, h, scale=None):
    s_in = scale or 1.0 / np.sqrt(d)
    s_out = scale or 1.0 / np.sqrt(h)
    return ExpertWeights(
        (s_in * rng.standard_normal((h, d))).astype(np.float32),
        (s_in * rng.standard_normal((h, d))).astype(np.float32),
        (s_out * rng.standard_normal((d, h))).astype(np.float32),
    )


def random_layer(rng, d=8, h=16, n=4, top_k=2):
    experts = [random_expert(rng, d, h) for _ in range(n)]
    router = (rng.standard_normal((n, d)) / np.sqrt(d)).astype(np.float32)
    return MoeLayer(experts, router, top_k)


def random_model(rng, n_layers=2, **kw):
    return MoeModel([random_layer(rng, **kw) for _ in range(n_layers)], {"name": "test", "version": "1"})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
