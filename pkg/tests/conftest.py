import numpy as np
import pytest

from capdrop.model import CellParams, Network, RampParams


def table_cell(**kw):
    base = dict(v=60.0, w=20.0, x_jam=320.0, x_hi=110.0, x_lo=70.0, beta=0.9)
    base.update(kw)
    return CellParams(**base)


def random_network(rng, n, ramp_prob=0.5, h=1 / 120):
    """Reference-like cells with jittered parameters; cell 1 always has a ramp."""
    cells, ramps = [], []
    for i in range(n):
        x_jam = rng.uniform(250, 350)
        x_hi = rng.uniform(0.3, 0.45) * x_jam
        x_lo = x_hi - rng.uniform(10, 50)
        cells.append(CellParams(v=rng.uniform(40, 80), w=rng.uniform(15, 30),
                                x_jam=x_jam, x_hi=x_hi, x_lo=x_lo,
                                beta=1.0 if i == n - 1 else rng.uniform(0.7, 1.0)))
        if i == 0 or rng.random() < ramp_prob:
            ramps.append(RampParams(c=rng.uniform(20, 80), present=True))
        else:
            ramps.append(RampParams())
    return Network(tuple(cells), tuple(ramps), h)


@pytest.fixture
def rng():
    return np.random.default_rng(20260416)


@pytest.fixture
def two_cell_net():
    return Network((table_cell(), table_cell(beta=1.0)),
                   (RampParams(60.0, True), RampParams()), 1 / 120)
