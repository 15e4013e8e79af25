"""
Shared fixtures: tiny model configs, seeded RNGs, 64-bit precision
"""

import numpy as np
import pytest

import tensor as T
from cfa_fusion import CfaConfig
from model import ModelConfig
from synth_data import SynthConfig, generate_dataset
from vit_encoder import StreamConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_stream(size: int = 16) -> StreamConfig:
    return StreamConfig(H=size, W=size, C_in=1, p=8, C_e=8, depth=2, n_heads_enc=2, mlp_ratio=2)


def tiny_model_config(**cfa) -> ModelConfig:
    return ModelConfig(cfp_stream=tiny_stream(), ifp_stream=tiny_stream(),
                       cfa=CfaConfig(L=8, d=8, n_heads=2, **cfa), k=5)


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth() -> SynthConfig:
    return SynthConfig(n_samples=40, H=16, W=16, C_in=1, k=5, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth):
    return generate_dataset(tiny_synth)


def fd_check(loss_fn, params, rng, per_param=3, h=1e-6, rel=1e-5, abs_tol=1e-7):
    """Backprop against central differences at a few random coordinates of each param"""
    for p in params:
        p.zero_grad()
    with T.Graph() as g:
        loss = loss_fn()
    T.backward(g, loss)
    for p in params:
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            plus = loss_fn().item()
            flat[i] = old - h
            minus = loss_fn().item()
            flat[i] = old
            numeric = (plus - minus) / (2 * h)
            assert p.grad.reshape(-1)[i] == pytest.approx(numeric, rel=rel, abs=abs_tol), f"{p.name}[{i}]"
