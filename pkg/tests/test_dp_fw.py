import numpy as np
import pytest

from fedexperts.adversaries import LinearFamily, ParametricBatch, SmoothedCrossEntropy
from fedexperts.core import ParameterError, SimplexPoint, StateError, convex_combination, simplex_vertex
from fedexperts.dp_fw import (
    LEFT,
    RIGHT,
    ROOT,
    AllocationError,
    Traversal,
    TreeAddress,
    VertexState,
    allocate_batch,
    batch_size,
    plan_trees,
    vertex_update,
)


def linear_batch(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return ParametricBatch(LinearFamily(rows.shape[1]), rows)


def random_xent_batch(rng, n, d, gamma=0.05):
    p = rng.dirichlet(np.ones(d), size=n)
    return ParametricBatch(SmoothedCrossEntropy(d, gamma), p)


class TestPlanTrees:
    def test_single_tree(self):
        plan = plan_trees(1)
        assert [(e.address.s, e.kind, e.is_leaf) for e in plan] == [
            ("", ROOT, False), ("0", LEFT, True), ("1", RIGHT, True)]
        assert plan.leaf_count == 2

    def test_two_trees(self):
        plan = plan_trees(2)
        assert plan.leaf_count == 6
        tree2 = [e.address.s for e in plan if e.address.j == 2]
        assert tree2 == ["", "0", "00", "01", "1", "10", "11"]

    @pytest.mark.parametrize("T1", [0, -3])
    def test_no_trees(self, T1):
        with pytest.raises(ParameterError):
            plan_trees(T1)

    @pytest.mark.parametrize("T1", range(1, 7))
    def test_leaf_count_closed_form(self, T1):
        plan = plan_trees(T1)
        assert plan.leaf_count == sum(2 ** j for j in range(1, T1 + 1))
        assert all(e.is_leaf == (e.address.depth == e.address.j) for e in plan)

    def test_parent_precedes_child(self):
        seen = set()
        for e in plan_trees(4):
            if e.address.parent is not None:
                assert e.address.parent in seen
            seen.add(e.address)


class TestAllocateBatch:
    def setup_method(self):
        self.data = linear_batch(np.random.default_rng(0).random((16, 3)))
        self.rng = np.random.default_rng(1)

    def test_depth_two(self):
        assert len(allocate_batch(self.data, 2, 8, self.rng)) == 2

    def test_root_is_b(self):
        assert len(allocate_batch(self.data, 0, 8, self.rng)) == 8

    @pytest.mark.parametrize("T1", [1, 2, 3, 4])
    def test_deepest_vertex_has_one(self, T1):
        assert batch_size(T1, 2 ** T1) == 1
        assert len(allocate_batch(self.data, T1, 2 ** T1, self.rng)) == 1

    def test_zero_size(self):
        with pytest.raises(AllocationError):
            allocate_batch(self.data, 4, 8, self.rng)

    def test_too_large(self):
        with pytest.raises(AllocationError):
            allocate_batch(self.data, 0, 32, self.rng)

    def test_clamp(self):
        assert len(allocate_batch(self.data, 0, 32, self.rng, clamp=True)) == 16
        assert len(allocate_batch(self.data, 6, 8, self.rng, clamp=True)) == 1

    def test_without_replacement(self):
        rows = np.arange(16, dtype=float)[:, None] * np.ones((1, 3))
        batch = allocate_batch(linear_batch(rows), 0, 10, self.rng)
        assert len(set(batch.params[:, 0])) == 10


class TestVertexUpdate:
    def test_root_linear(self):
        g = np.array([0.2, 0.7, 0.1])
        state = vertex_update(ROOT, None, SimplexPoint.uniform(3), linear_batch(g))
        np.testing.assert_array_equal(state.v, g)

    def test_left_copies_parent(self):
        parent = VertexState(SimplexPoint([0.3, 0.7]), np.array([1.0, 2.0]))
        child = vertex_update(LEFT, parent, SimplexPoint([1.0, 0.0]), None)
        assert child.x == parent.x
        np.testing.assert_array_equal(child.v, parent.v)

    def test_right_with_unmoved_iterate(self):
        rng = np.random.default_rng(2)
        x = SimplexPoint([0.2, 0.5, 0.3])
        parent = VertexState(x, np.array([0.4, 0.1, 0.9]))
        child = vertex_update(RIGHT, parent, x, random_xent_batch(rng, 4, 3))
        np.testing.assert_allclose(child.v, parent.v, atol=1e-12)

    def test_missing_parent(self):
        with pytest.raises(StateError):
            vertex_update(RIGHT, None, SimplexPoint.uniform(2), linear_batch([0.0, 1.0]))

    def test_unknown_kind(self):
        parent = VertexState(SimplexPoint.uniform(2), np.zeros(2))
        with pytest.raises(ParameterError):
            vertex_update("middle", parent, SimplexPoint.uniform(2), linear_batch([0.0, 1.0]))


class TestTraversal:
    def test_batch_sizes_follow_depth(self):
        rng = np.random.default_rng(3)
        data = linear_batch(rng.random((8, 4)))
        trav = Traversal(data, 3, 8, SimplexPoint.uniform(4), rng)
        for entry, state in trav:
            if entry.kind != LEFT:
                assert len(state.batch) == 8 >> entry.address.depth

    def test_telescoping_full_batch(self):
        rng = np.random.default_rng(4)
        data = random_xent_batch(rng, 6, 4)
        trav = Traversal(data, 3, 8, SimplexPoint.uniform(4), full_batch=True)
        k = 0
        for entry, state in trav:
            np.testing.assert_allclose(state.v, data.mean_grad(state.x), atol=1e-9)
            if entry.is_leaf:
                k += 1
                n = int(np.argmin(state.v)) + 1
                trav.x = convex_combination(trav.x, simplex_vertex(n, 4), 2 / (k + 1))
        assert k == 14

    def test_linear_estimates_stay_bounded(self):
        # for linear losses every correction is a difference of coefficient means
        rng = np.random.default_rng(5)
        data = linear_batch(rng.random((16, 3)))
        trav = Traversal(data, 4, 16, SimplexPoint.uniform(3), rng)
        for entry, state in trav:
            assert np.all(np.abs(state.v) <= entry.address.depth + 1 + 1e-12)


def test_tree_address_validation():
    assert TreeAddress(3, "01").parent == TreeAddress(3, "0")
    with pytest.raises(ParameterError):
        TreeAddress(1, "01")
    with pytest.raises(ParameterError):
        TreeAddress(0)
