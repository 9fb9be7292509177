import numpy as np
import pytest

from gumbelmap.model import CompiledPotentials, chain_model, grid_model


def random_chain_potentials(rng, num_vars=None, num_labels=None, scale=1.0):
    d = int(rng.integers(2, 9)) if num_vars is None else num_vars
    k = int(rng.integers(2, 4)) if num_labels is None else num_labels
    model = chain_model(d, k)
    unary = rng.normal(size=(d, k)) * scale
    pairwise = rng.normal(size=(d - 1, k, k)) * scale
    return CompiledPotentials(model, unary, pairwise)


def random_supermodular_grid(rng, rows=None, cols=None, scale=1.0):
    r = int(rng.integers(1, 4)) if rows is None else rows
    c = int(rng.integers(1, 5)) if cols is None else cols
    model = grid_model(r, c)
    unary = rng.normal(size=(model.num_vars, 2)) * scale
    pairwise = rng.normal(size=(model.num_edges, 2, 2)) * scale
    if model.num_edges:
        gap = (pairwise[:, 0, 0] + pairwise[:, 1, 1]
               - pairwise[:, 0, 1] - pairwise[:, 1, 0])
        lift = np.maximum(-gap, 0.0) + rng.random(model.num_edges) * 0.5
        pairwise[:, 0, 0] += lift / 2
        pairwise[:, 1, 1] += lift / 2
    return CompiledPotentials(model, unary, pairwise)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
