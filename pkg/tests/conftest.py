import numpy as np
import pytest

from gsakit.layout import TokenLayout
from gsakit.params import GsaParams
from gsakit.workload import WorkloadConfig, generate_workload


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_case(seed, layout, precision="f64", heads=2, dim=8, model_dim=16, **param_kw):
    """Workload plus params matching ``layout``."""
    cfg = WorkloadConfig(seed, layout, heads=heads, dim=dim, model_dim=model_dim, precision=precision)
    x, w = generate_workload(cfg)
    params = GsaParams(window_s=layout.window_s, **param_kw)
    return x, w, params


def random_layout(rng, window_s, max_tokens=512, specials=(0, 1, 5)):
    while True:
        gh = window_s * int(rng.integers(1, 5))
        gw = window_s * int(rng.integers(1, 5))
        frames = int(rng.integers(1, 5))
        if frames * gh * gw <= max_tokens:
            return TokenLayout(int(rng.choice(specials)), frames, gh, gw, window_s)
