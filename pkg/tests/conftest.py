import numpy as np
import pytest

from strokegen.config import RunConfig


def tiny_config(**kwargs) -> RunConfig:
    """Small model for fast structural tests."""
    cfg = RunConfig()
    cfg.model.feature_dim = 32
    cfg.model.hidden_dim = 32
    cfg.model.mixture_components = 3
    cfg.model.t_max = 3
    cfg.model.curve_samples = 30
    cfg.train.batch_size = 4
    for key, value in kwargs.items():
        section, _, name = key.partition("__")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    from strokegen.generative import build_model

    gen, rec = build_model(tiny_cfg, np.random.default_rng(0))
    return tiny_cfg, gen, rec
