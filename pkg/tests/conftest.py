import warnings

import numpy as np
import pytest

from jumplab import grid as gr
from jumplab.geometry import BallDomain
from jumplab.model import preset
from jumplab.partition import ExitPartition


def build_grid(model, R=0.5, cells=8, d=3):
    dom = BallDomain(np.zeros(d), R)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gen = gr.assemble_generator(model, dom, h=R / cells, partition=ExitPartition(dom))
    return gr.green_matrix(gen)


@pytest.fixture(scope="session")
def small_grid():
    """Default non-local model on B(0, 1/2) with h = R/5."""
    return build_grid(preset("identity"), cells=5)


@pytest.fixture(scope="session")
def default_grid():
    """Default non-local model on B(0, 1/2) with h = R/8 (2103 cells)."""
    return build_grid(preset("identity"), cells=8)
