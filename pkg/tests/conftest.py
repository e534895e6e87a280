"""Shared fixtures: tiny problems, state builders, dense weight oracles."""

import numpy as np
import pytest

from drsaddle.spaces import (
    BlockLayout,
    BlockVector,
    DiagonalWeight,
    StateU,
    WeightTerm,
)


def random_block_vector(layout, rng, scale=1.0):
    v = BlockVector(layout)
    v.data[:] = scale * rng.standard_normal(v.data.size)
    return v


def random_state(x_layout, y_layout, rng, with_x_bar=True):
    return StateU(
        random_block_vector(x_layout, rng),
        random_block_vector(y_layout, rng),
        random_block_vector(x_layout, rng) if with_x_bar else None,
        random_block_vector(y_layout, rng),
    )


def dense_weight_matrix(weight, x_layout, y_layout):
    """Explicit symmetric matrix of the state quadratic form (oracle)."""
    nx = x_layout.total
    ny = y_layout.total
    sizes = [nx] + [int(np.prod(s)) for s in y_layout.shapes]
    if weight.x_bar is not None:
        sizes.append(nx)
    sizes += [int(np.prod(s)) for s in y_layout.shapes]
    terms = [weight.x, *weight.y]
    if weight.x_bar is not None:
        terms.append(weight.x_bar)
    terms += list(weight.y_bar)

    total = sum(sizes)
    W = np.zeros((total, total))
    off = 0
    for term, sz in zip(terms, sizes):
        blk = np.zeros((sz, sz))
        if term.scale != 0.0:
            for j in range(sz):
                e = np.zeros(sz)
                e[j] = 1.0
                col = term.op(e) if term.op is not None else e
                blk[:, j] = term.scale * col
        W[off:off + sz, off:off + sz] = blk
        off += sz
    return W


def flatten_state(u):
    return np.concatenate([s.data for s in u.sections()])


@pytest.fixture
def small_layouts():
    x_layout = BlockLayout([(3,)])
    y_layout = BlockLayout([(3,)])
    return x_layout, y_layout


@pytest.fixture
def generic_weight(small_layouts):
    # one PSD map block on x, scalar terms elsewhere
    rng = np.random.default_rng(7)
    A = rng.standard_normal((3, 3))
    spd = A.T @ A + 0.1 * np.eye(3)
    return DiagonalWeight(
        WeightTerm(0.7, lambda v: spd @ v),
        (WeightTerm(1.3),),
        WeightTerm(0.4),
        (WeightTerm(2.1),),
    )
