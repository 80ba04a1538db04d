import numpy as np
import pytest

from attnmarl.graph import (AgentGraph, ObservationBatch, apply_edge_dropout,
                            complete_graph, neighbors)
from attnmarl.numerics import Rng


def self_loop_graph(n, num_classes=1):
    return AgentGraph(agent_ids=tuple(range(n)),
                      edges=tuple((i, i, 1) for i in range(n)),
                      num_classes=num_classes)


class TestAgentGraph:
    def test_missing_self_edge_rejected(self):
        with pytest.raises(ValueError, match="self-edge"):
            AgentGraph(agent_ids=(0, 1), edges=((0, 0, 1), (0, 1, 1)), num_classes=1)

    def test_class_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="class"):
            AgentGraph(agent_ids=(0,), edges=((0, 0, 2),), num_classes=1)

    def test_duplicate_edge_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            AgentGraph(agent_ids=(0,), edges=((0, 0, 1), (0, 0, 1)), num_classes=1)

    def test_cls_matrix(self):
        g = AgentGraph(agent_ids=(0, 1), edges=((0, 0, 2), (1, 1, 2), (0, 1, 3)),
                       num_classes=3)
        assert g.cls_matrix[0, 1] == 2
        assert g.cls_matrix[1, 0] == -1


class TestObservationBatch:
    def test_pad_rows_must_be_zero(self):
        with pytest.raises(ValueError, match="pad rows"):
            ObservationBatch(obs=np.ones((2, 3)), valid_mask=np.array([True, False]))

    def test_n_valid(self):
        ob = ObservationBatch(obs=np.vstack([np.ones((2, 3)), np.zeros((1, 3))]),
                              valid_mask=np.array([True, True, False]))
        assert ob.n_valid == 2


class TestNeighbors:
    def test_self_only(self):
        g = self_loop_graph(3)
        assert neighbors(g, 1) == [(1, 1)]

    def test_complete_three_agents(self):
        g = complete_graph(range(3))
        for i in range(3):
            assert neighbors(g, i) == [(0, 1), (1, 1), (2, 1)]

    def test_invalid_index(self):
        with pytest.raises(IndexError):
            neighbors(self_loop_graph(2), 5)

    def test_against_adjacency_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(1, 9))
            c_max = int(rng.integers(1, 5))
            adj = rng.random((n, n)) < 0.4
            np.fill_diagonal(adj, True)
            cls = rng.integers(1, c_max + 1, size=(n, n))
            edges = tuple((i, j, int(cls[i, j])) for i in range(n) for j in range(n)
                          if adj[i, j])
            g = AgentGraph(agent_ids=tuple(range(n)), edges=edges, num_classes=c_max)
            for i in range(n):
                expect = [(j, int(cls[i, j])) for j in range(n) if adj[i, j]]
                assert neighbors(g, i) == expect


class TestEdgeDropout:
    def make_graph(self):
        n = 5
        edges = [(i, i, 1) for i in range(n)]
        edges += [(i, j, 1) for i in range(n) for j in range(n) if i != j]
        return AgentGraph(agent_ids=tuple(range(n)), edges=tuple(edges), num_classes=1)

    def test_rate_zero_unchanged(self):
        g = self.make_graph()
        assert apply_edge_dropout(g, 0.0, Rng(0)) is g

    def test_rate_one_only_self_edges(self):
        g = apply_edge_dropout(self.make_graph(), 1.0, Rng(0))
        assert sorted(g.edges) == [(i, i, 1) for i in range(5)]

    def test_self_edges_survive_any_rate(self):
        for rate in (0.3, 0.7, 0.95):
            g = apply_edge_dropout(self.make_graph(), rate, Rng(5))
            kept = {(i, j) for (i, j, _) in g.edges}
            for i in range(5):
                assert (i, i) in kept

    def test_empirical_retention_rate(self):
        # 10 non-self edges kept with probability 0.5, Monte Carlo over trials
        edges = [(0, 0, 1), (1, 1, 1)] + [(0, 1, 1), (1, 0, 1)]
        base = AgentGraph(agent_ids=(0, 1), edges=tuple(edges), num_classes=1)
        rng = Rng(123)
        total = kept = 0
        for t in range(10000):
            g = apply_edge_dropout(base, 0.5, rng.split(f"t{t}"))
            total += 2
            kept += len(g.edges) - 2
        assert abs(kept / total - 0.5) < 0.02

    def test_deterministic_given_stream(self):
        g = self.make_graph()
        a = apply_edge_dropout(g, 0.5, Rng(9).split("x"))
        b = apply_edge_dropout(g, 0.5, Rng(9).split("x"))
        assert a.edges == b.edges


class TestNeighborPermutationStability:
    def test_neighbors_stable_under_consistent_remap(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            n = int(rng.integers(2, 8))
            adj = rng.random((n, n)) < 0.5
            np.fill_diagonal(adj, True)
            cls = rng.integers(1, 4, size=(n, n))
            edges = tuple((i, j, int(cls[i, j])) for i in range(n)
                          for j in range(n) if adj[i, j])
            g = AgentGraph(agent_ids=tuple(range(n)), edges=edges, num_classes=3)
            perm = rng.permutation(n)
            inv = {old: new for new, old in enumerate(perm)}
            edges2 = tuple((inv[i], inv[j], c) for (i, j, c) in edges)
            g2 = AgentGraph(agent_ids=tuple(g.agent_ids[p] for p in perm),
                            edges=edges2, num_classes=3)
            for i in range(n):
                expect = sorted((inv[j], c) for (j, c) in neighbors(g, i))
                assert neighbors(g2, inv[i]) == expect
