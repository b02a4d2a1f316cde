import numpy as np
import pytest

from dery.errors import DegenerateClusteringError, InfeasiblePartitionError
from dery.partition import (
    Assignment,
    DEFAULT_MAX_ITERS,
    DEFAULT_RESTARTS,
    DEFAULT_TOL,
    ZooPartition,
    enumerate_valid_cuts,
    is_swap_local_optimum,
    objective_J,
    optimize_partition,
    optimize_partition_detailed,
    partition_doc,
    partition_from_doc,
    swap_step,
    update_anchors,
    update_assignment,
)
from dery.similarity import SimilarityTable, functional_similarity
from dery.zoo import ModelGraph, NodeMeta, ZooManifest, blocks_from_cuts


def chain_model(model_id, params, channels=4):
    nodes = tuple(
        NodeMeta(
            node_id=i + 1,
            param_count=p,
            flops=float(p),
            out_channels=channels,
            out_spatial=(1, 1),
            layout="tokens",
        )
        for i, p in enumerate(params)
    )
    return ModelGraph(model_id=model_id, nodes=nodes, input_shape=(channels, 1, 1))


def ones_table(node_counts):
    """Every node pair maximally similar: S is 2 for all block pairs."""
    ids = tuple(node_counts)
    return SimilarityTable(
        model_ids=ids,
        node_counts=dict(node_counts),
        tables={
            (a, b): np.ones((node_counts[a], node_counts[b]))
            for i, a in enumerate(ids)
            for b in ids[i:]
        },
    )


def two_model_setup(params_a=(4, 4, 4)):
    """Models a (3 nodes) and b (3 nodes); the cross table rewards cutting
    model a after node 1 (its boundary then aligns with b's)."""
    man = ZooManifest(
        models=(chain_model("a", params_a), chain_model("b", (4, 4, 4))),
        probe_count=8,
    )
    t_aa = np.full((3, 3), 0.5)
    np.fill_diagonal(t_aa, 1.0)
    t_bb = t_aa.copy()
    t_ab = np.array([
        [0.9, 0.2, 0.2],
        [0.1, 0.2, 0.2],
        [0.2, 0.2, 0.9],
    ])
    table = SimilarityTable(
        model_ids=("a", "b"),
        node_counts={"a": 3, "b": 3},
        tables={("a", "a"): t_aa, ("a", "b"): t_ab, ("b", "b"): t_bb},
    )
    partition = ZooPartition(
        cuts={"a": (2,), "b": (1,)},
        assignment=Assignment(labels=np.array([[0, 1], [0, 1]])),
        anchors=tuple(blocks_from_cuts(man.models[1], (1,))),
        objective=0.0,
    )
    return man, table, partition


class TestObjective:
    def test_all_identical_blocks_hit_upper_bound(self):
        # N=2 models, K=2, similarity identically 1 -> every term is 2
        man = ZooManifest(
            models=(chain_model("a", (1, 1)), chain_model("b", (1, 1))), probe_count=8
        )
        table = ones_table({"a": 2, "b": 2})
        partition = ZooPartition(
            cuts={"a": (1,), "b": (1,)},
            assignment=Assignment(labels=np.array([[0, 1], [0, 1]])),
            anchors=tuple(blocks_from_cuts(man.models[0], (1,))),
            objective=0.0,
        )
        assert objective_J(table, man, partition) == pytest.approx(2 * 2 * 2)

    def test_single_model_self_anchors(self):
        man = ZooManifest(models=(chain_model("a", (1, 1, 1)),), probe_count=8)
        table = ones_table({"a": 3})
        partition = ZooPartition(
            cuts={"a": (1,)},
            assignment=Assignment(labels=np.array([[0, 1]])),
            anchors=tuple(blocks_from_cuts(man.models[0], (1,))),
            objective=0.0,
        )
        assert objective_J(table, man, partition) == pytest.approx(4.0)

    def test_matches_double_loop_oracle(self, acceptance_zoo, acceptance_table):
        """Oracle: direct summation of S(block, anchor) over the assignment."""
        _, manifest, _ = acceptance_zoo
        cuts = {m.model_id: enumerate_valid_cuts(m, 3)[0] for m in manifest.models}
        labels = np.array([[0, 1, 2]] * 4)
        partition = ZooPartition(
            cuts=cuts,
            assignment=Assignment(labels=labels),
            anchors=tuple(blocks_from_cuts(manifest.models[0], cuts["m00"])),
            objective=0.0,
        )
        partition = update_anchors(acceptance_table, manifest, partition)
        expected = 0.0
        for i, m in enumerate(manifest.models):
            blocks = blocks_from_cuts(m, cuts[m.model_id])
            for k, block in enumerate(blocks, start=1):
                anchor = partition.anchors[partition.assignment.set_of(i, k)]
                expected += functional_similarity(acceptance_table, block, anchor).value
        assert objective_J(acceptance_table, manifest, partition) == pytest.approx(
            expected, abs=1e-9
        )


class TestSwapStep:
    def test_tie_keeps_no_swap(self):
        man = ZooManifest(
            models=(chain_model("a", (4, 4, 4)), chain_model("b", (4, 4, 4))),
            probe_count=8,
        )
        table = ones_table({"a": 3, "b": 3})
        partition = ZooPartition(
            cuts={"a": (2,), "b": (1,)},
            assignment=Assignment(labels=np.array([[0, 1], [0, 1]])),
            anchors=tuple(blocks_from_cuts(man.models[1], (1,))),
            objective=0.0,
        )
        out = swap_step(table, man, partition, model_index=0, boundary_index=0, eps=0.5)
        assert out.cuts["a"] == (2,)

    def test_planted_improvement_is_taken(self):
        """Oracle: exhaustive J evaluation of the three swap options."""
        man, table, partition = two_model_setup()
        before = objective_J(table, man, partition)
        out = swap_step(table, man, partition, model_index=0, boundary_index=0, eps=0.5)
        assert out.cuts["a"] == (1,)
        assert out.objective > before
        # exhaustive check over the candidate cut positions
        js = {}
        for cut in (1, 2):
            trial = ZooPartition(
                cuts={"a": (cut,), "b": (1,)},
                assignment=partition.assignment,
                anchors=partition.anchors,
                objective=0.0,
            )
            js[cut] = objective_J(table, man, trial)
        assert out.objective == pytest.approx(max(js.values()))

    def test_size_bound_filters_swap(self):
        # the rewarding swap would give block params (2, 10) with bound 9
        man, table, partition = two_model_setup(params_a=(2, 6, 4))
        out = swap_step(table, man, partition, model_index=0, boundary_index=0, eps=0.5)
        assert out.cuts["a"] == (2,)


class TestAnchors:
    def test_singleton_set(self):
        man = ZooManifest(models=(chain_model("a", (1, 1)),), probe_count=8)
        table = ones_table({"a": 2})
        partition = ZooPartition(
            cuts={"a": (1,)},
            assignment=Assignment(labels=np.array([[0, 1]])),
            anchors=tuple(blocks_from_cuts(man.models[0], (1,))),
            objective=0.0,
        )
        out = update_anchors(table, man, partition)
        assert out.anchors[0].node_range == (1, 1)
        assert out.anchors[1].node_range == (2, 2)

    def test_anchor_is_argmax_of_row_sums(self, acceptance_zoo, acceptance_table):
        """Oracle: brute force over every member of each set."""
        _, manifest, _ = acceptance_zoo
        cuts = {m.model_id: enumerate_valid_cuts(m, 3)[0] for m in manifest.models}
        labels = np.array([[0, 1, 2]] * 4)
        partition = ZooPartition(
            cuts=cuts,
            assignment=Assignment(labels=labels),
            anchors=tuple(blocks_from_cuts(manifest.models[0], cuts["m00"])),
            objective=0.0,
        )
        out = update_anchors(acceptance_table, manifest, partition)
        all_blocks = [
            (i, k, b)
            for i, m in enumerate(manifest.models)
            for k, b in enumerate(blocks_from_cuts(m, cuts[m.model_id]), start=1)
        ]
        for j, anchor in enumerate(out.anchors):
            members = [(i, k, b) for (i, k, b) in all_blocks if labels[i, k - 1] == j]
            scores = {
                (b.model_id, b.stage_index): sum(
                    functional_similarity(acceptance_table, b, other).value
                    for (_, _, other) in members
                )
                for (_, _, b) in members
            }
            best = max(scores.values())
            assert scores[(anchor.model_id, anchor.stage_index)] == pytest.approx(best)

    def test_empty_set_raises(self):
        man = ZooManifest(models=(chain_model("a", (1, 1)),), probe_count=8)
        table = ones_table({"a": 2})
        partition = ZooPartition(
            cuts={"a": (1,)},
            assignment=Assignment(labels=np.array([[0, 0]])),
            anchors=tuple(blocks_from_cuts(man.models[0], (1,))),
            objective=0.0,
        )
        with pytest.raises(DegenerateClusteringError):
            update_anchors(table, man, partition)


class TestAssignment:
    def planted(self):
        # blocks of model b: first is near anchor 1, second near anchor 2
        man = ZooManifest(
            models=(chain_model("a", (4, 4)), chain_model("b", (4, 4))), probe_count=8
        )
        t_aa = np.eye(2) * 1.0 + (1 - np.eye(2)) * 0.1
        t_bb = t_aa.copy()
        t_ab = np.array([[0.9, 0.0], [0.0, 0.9]])
        table = SimilarityTable(
            model_ids=("a", "b"),
            node_counts={"a": 2, "b": 2},
            tables={("a", "a"): t_aa, ("a", "b"): t_ab, ("b", "b"): t_bb},
        )
        partition = ZooPartition(
            cuts={"a": (1,), "b": (1,)},
            assignment=Assignment(labels=np.array([[0, 1], [1, 0]])),  # b misassigned
            anchors=tuple(blocks_from_cuts(man.models[0], (1,))),
            objective=0.0,
        )
        return man, table, partition

    def test_blocks_move_to_nearest_anchor(self):
        man, table, partition = self.planted()
        out = update_assignment(table, man, partition)
        np.testing.assert_array_equal(out.assignment.labels, [[0, 1], [0, 1]])

    def test_idempotent_with_fixed_anchors(self):
        man, table, partition = self.planted()
        once = update_assignment(table, man, partition)
        twice = update_assignment(table, man, once)
        np.testing.assert_array_equal(once.assignment.labels, twice.assignment.labels)

    def test_row_sums_are_one(self):
        man, table, partition = self.planted()
        out = update_assignment(table, man, partition)
        np.testing.assert_array_equal(out.assignment.matrix().sum(axis=1), 1)


class TestOptimize:
    def test_fully_constrained_partition(self, shared_zoo, shared_table):
        _, manifest, _ = shared_zoo
        k = manifest.models[0].num_nodes
        partition = optimize_partition(
            shared_table, manifest, k=k, eps=1.0, restarts=2, seed=0
        )
        for m in manifest.models:
            assert partition.cuts[m.model_id] == tuple(range(1, k))

    def test_too_few_nodes(self, shared_zoo, shared_table):
        _, manifest, _ = shared_zoo
        with pytest.raises(InfeasiblePartitionError):
            optimize_partition(shared_table, manifest, k=99, restarts=1)

    def test_infeasible_size_bound(self):
        # one node dwarfs the rest: no 2-way cut stays under the bound
        man = ZooManifest(models=(chain_model("a", (100, 1, 1)),), probe_count=8)
        table = ones_table({"a": 3})
        with pytest.raises(InfeasiblePartitionError):
            optimize_partition(table, man, k=2, eps=0.2, restarts=1)

    def test_shipped_defaults(self):
        import inspect

        sig = inspect.signature(optimize_partition)
        assert sig.parameters["restarts"].default == DEFAULT_RESTARTS == 200
        assert sig.parameters["tol"].default == DEFAULT_TOL == 1e-6
        assert sig.parameters["max_iters"].default == DEFAULT_MAX_ITERS == 100
        assert sig.parameters["eps"].default == 0.2

    def test_monotone_traces(self, acceptance_zoo, acceptance_table):
        _, manifest, _ = acceptance_zoo
        _, stats = optimize_partition_detailed(
            acceptance_table, manifest, k=3, restarts=10, seed=5
        )
        for trace in stats.traces:
            assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_deterministic_and_worker_invariant(self, acceptance_zoo, acceptance_table):
        _, manifest, _ = acceptance_zoo
        p1 = optimize_partition(acceptance_table, manifest, k=3, restarts=6, seed=3)
        p2 = optimize_partition(acceptance_table, manifest, k=3, restarts=6, seed=3)
        p3 = optimize_partition(
            acceptance_table, manifest, k=3, restarts=6, seed=3, workers=2
        )
        for other in (p2, p3):
            assert other.cuts == p1.cuts
            np.testing.assert_array_equal(
                other.assignment.labels, p1.assignment.labels
            )
            assert other.objective == p1.objective
            assert [(b.model_id, b.stage_index) for b in other.anchors] == [
                (b.model_id, b.stage_index) for b in p1.anchors
            ]

    def test_result_is_swap_local_optimum(self, acceptance_zoo, acceptance_table):
        _, manifest, _ = acceptance_zoo
        partition = optimize_partition(
            acceptance_table, manifest, k=3, restarts=10, seed=2
        )
        assert is_swap_local_optimum(acceptance_table, manifest, partition)

    def test_objective_matches_recompute(self, acceptance_zoo, acceptance_table):
        _, manifest, _ = acceptance_zoo
        partition = optimize_partition(
            acceptance_table, manifest, k=3, restarts=5, seed=0
        )
        recomputed = objective_J(acceptance_table, manifest, partition)
        assert abs(partition.objective - recomputed) < 1e-9

    def test_returned_partition_satisfies_all_constraints(
        self, acceptance_zoo, acceptance_table
    ):
        """Row sums, contiguity, cover, size bound, and anchor membership
        all hold on the optimizer's output."""
        from dery.zoo import validate_partition

        _, manifest, _ = acceptance_zoo
        partition = optimize_partition(
            acceptance_table, manifest, k=3, eps=0.2, restarts=5, seed=7
        )
        for m in manifest.models:
            assert validate_partition(m, partition.cuts[m.model_id], eps=0.2) == []
        np.testing.assert_array_equal(partition.assignment.matrix().sum(axis=1), 1)
        labels = partition.assignment.labels
        for j, anchor in enumerate(partition.anchors):
            i = manifest.model_index(anchor.model_id)
            assert labels[i, anchor.stage_index - 1] == j

    def test_doc_round_trip(self, acceptance_zoo, acceptance_table):
        _, manifest, _ = acceptance_zoo
        partition = optimize_partition(
            acceptance_table, manifest, k=3, restarts=4, seed=1
        )
        doc = partition_doc(partition, manifest.model_ids)
        back = partition_from_doc(doc, manifest)
        assert back.cuts == partition.cuts
        np.testing.assert_array_equal(
            back.assignment.labels, partition.assignment.labels
        )
        assert back.objective == partition.objective
