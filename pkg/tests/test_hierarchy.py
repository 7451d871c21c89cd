import numpy as np
import pytest
from hypothesis import given, strategies as st

from hiercast.errors import (
    CycleError,
    DisconnectedError,
    MissingLeafError,
    MultiParentError,
    ShapeMismatchError,
    ZeroWeightError,
)
from hiercast.hierarchy import (
    aggregate_bottom_up,
    aggregate_matrix_bottom_up,
    build_hierarchy,
    consistency_report,
    parse_hierarchy_csv,
)

from conftest import random_tree


def test_smallest_internal_node(tree3):
    assert tree3.n_nodes == 3
    assert tree3.children[1] == (2, 3)
    assert tree3.leaves == [2, 3]


def test_five_node_levels(tree5):
    assert tree5.internal_nodes == [1, 2]
    assert tree5.leaves == [3, 4, 5]
    assert tree5.levels() == {1: [1], 2: [2, 3], 3: [4, 5]}


@pytest.mark.parametrize(
    "edges, err",
    [
        ([(1, 2, 1.0), (2, 1, 1.0)], CycleError),
        ([(1, 1, 1.0)], CycleError),
        ([(1, 2, 1.0), (3, 4, 1.0), (4, 3, 1.0)], CycleError),
        ([(1, 2, 1.0), (3, 4, 1.0)], DisconnectedError),
        ([(1, 2, 1.0), (1, 3, 1.0), (2, 3, 1.0)], MultiParentError),
        ([(1, 2, 0.0)], ZeroWeightError),
    ],
)
def test_rejects_non_trees(edges, err):
    with pytest.raises(err):
        build_hierarchy(edges)


def test_weighted_sums(tree3, tree5):
    assert aggregate_bottom_up(tree3, {2: 1.0, 3: 2.0})[1] == 3.0
    half = tree3.with_weights({(1, 2): 0.5, (1, 3): 0.5})
    assert aggregate_bottom_up(half, {2: 4.0, 3: 8.0})[1] == 6.0
    v = aggregate_bottom_up(tree5, {3: 7.0, 4: 1.0, 5: 3.0})
    assert v[2] == 4.0
    assert v[1] == 0.5 * 4.0 + 0.5 * 7.0


def test_missing_leaf(tree5):
    with pytest.raises(MissingLeafError):
        aggregate_bottom_up(tree5, {4: 1.0, 5: 3.0})


def test_single_perturbation_rms(tree5):
    rng = np.random.default_rng(0)
    T = 7
    leaves = rng.normal(size=(5, T))
    values = aggregate_matrix_bottom_up(tree5, leaves)
    assert consistency_report(tree5, values).overall_rms == 0.0
    eps = 0.3
    values[1, 4] += eps  # node 2 is internal
    rep = consistency_report(tree5, values)
    # node 2's residual moves by eps; node 1's residual moves by -0.5 eps
    expected = np.sqrt((eps**2 + (0.5 * eps) ** 2) / (2 * T))
    assert rep.overall_rms == pytest.approx(expected, rel=1e-12)
    assert set(rep.per_node_rms) == {1, 2}


def test_single_perturbation_top_node(tree5):
    values = aggregate_matrix_bottom_up(tree5, np.ones((5, 4)))
    values[0, 2] += 0.1  # root: only its own residual changes
    assert consistency_report(tree5, values).overall_rms == pytest.approx(0.1 / np.sqrt(2 * 4))


def test_report_shape_mismatch(tree5):
    with pytest.raises(ShapeMismatchError):
        consistency_report(tree5, np.zeros((4, 3)))


@given(st.integers(2, 50), st.integers(0, 10_000))
def test_bottom_up_output_is_consistent(n, seed):
    rng = np.random.default_rng(seed)
    h = random_tree(rng, n)
    vals = aggregate_matrix_bottom_up(h, rng.normal(size=(n, 3)))
    assert consistency_report(h, vals).overall_rms < 1e-12


@given(st.integers(2, 50), st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_aggregation_is_linear(n, seed, a, b):
    rng = np.random.default_rng(seed)
    h = random_tree(rng, n)
    x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    lhs = aggregate_matrix_bottom_up(h, a * x + b * y)
    rhs = a * aggregate_matrix_bottom_up(h, x) + b * aggregate_matrix_bottom_up(h, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(st.integers(2, 40), st.integers(0, 10_000))
def test_csv_round_trip(n, seed):
    h = random_tree(np.random.default_rng(seed), n)
    back = parse_hierarchy_csv(h.to_csv())
    assert back.edges == h.edges
    assert back.node_names == h.node_names


def test_named_nodes_are_remapped():
    text = "parent,child,weight\ntotal,north,1\ntotal,south,1\nnorth,a,0.5\n"
    h = parse_hierarchy_csv(text)
    assert h.node_names[0] == "total"
    assert h.n_nodes == 4
    assert h.leaves == [3, 4]


def test_aggregation_matrix_matches_weights(tree5):
    A = tree5.aggregation_matrix()
    assert A.shape == (2, 5)
    assert A[0, 1] == 0.5 and A[0, 2] == 0.5 and A[1, 3] == 1.0
