import numpy as np
import pytest

from edgenet import (
    AtomicStructure,
    CutoffPolicy,
    RbfConfig,
    batch_graphs,
    build_graph,
    graph_statistics,
    image_displacements,
    load_graph_cache,
    rbf_expand,
    save_graph_cache,
)
from edgenet.errors import DataError, GraphError
from edgenet.graphs import write_statistics_csv
from edgenet.structures import perpendicular_widths

from conftest import random_crystal, random_molecule

RBF = RbfConfig(k_max=20, delta=0.25)


class TestRbfExpand:
    def test_unit_at_center(self):
        cfg = RbfConfig()
        for k in (0, 1, 80, 150):
            d = k * cfg.delta
            if d <= 0:
                continue
            assert rbf_expand(d, cfg)[k] == 1.0

    def test_worked_value(self):
        v = rbf_expand(0.1, RbfConfig())
        assert v[0] == pytest.approx(np.exp(-0.1), abs=1e-15)
        assert v[0] == pytest.approx(0.904837, abs=1e-6)

    def test_far_distance(self):
        v = rbf_expand(15.0, RbfConfig())
        assert v[150] == 1.0
        assert v[0] == pytest.approx(0.0, abs=1e-300)

    def test_length_and_range(self):
        cfg = RbfConfig()
        v = rbf_expand(2.34, cfg)
        assert len(v) == 151
        assert np.all(v >= 0) and np.all(v <= 1.0)
        # Strict positivity is representable when every center is within
        # sqrt(745 * delta) of d; mid-range distances exercise it fully.
        mid = rbf_expand(7.5, cfg)
        assert np.all(mid > 0) and np.all(mid <= 1.0)

    def test_matrix_shape(self):
        out = rbf_expand(np.array([1.0, 2.0, 3.0]), RBF)
        assert out.shape == (3, RBF.n_features)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            rbf_expand(0.0, RBF)

    def test_distance_only_dependence(self):
        # Same distance from different geometry gives identical rows.
        a = rbf_expand(1.7, RBF)
        b = rbf_expand(np.array([1.7, 1.7]), RBF)
        np.testing.assert_array_equal(b[0], a)
        np.testing.assert_array_equal(b[1], a)


class TestPolicyParsing:
    def test_round_trip(self):
        for text in ("distance:5", "knearest:12", "voronoi"):
            assert str(CutoffPolicy.parse(text)) == text

    def test_invalid(self):
        for text in ("distance:0", "knearest:0", "banana", "distance:x"):
            with pytest.raises(ValueError):
                CutoffPolicy.parse(text)


class TestDistancePolicy:
    def test_two_atom_molecule(self):
        s = AtomicStructure([1, 8], [[0, 0, 0], [3, 0, 0]])
        g = build_graph(s, CutoffPolicy.distance(5.0), RBF)
        assert g.n_edges == 2
        np.testing.assert_allclose(g.edge_distance, 3.0)
        g.validate()
        np.testing.assert_array_equal(g.edge_features, rbf_expand(g.edge_distance, RBF))

    def test_matches_brute_force_on_random_structures(self):
        rng = np.random.default_rng(23)
        from test_structures import brute_force_pairs

        for _ in range(15):
            s = random_crystal(rng, n_max=6)
            r = rng.uniform(1.0, 2.0) * perpendicular_widths(s.cell).min()
            g = build_graph(s, CutoffPolicy.distance(r), RBF)
            expected = {
                (w, v, off) for (v, w, off) in brute_force_pairs(s, r)
            }
            assert g.edge_set() == expected
            g.validate()


class TestKNearestPolicy:
    def test_collinear_tie_break(self):
        s = AtomicStructure([1, 1, 1], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        g = build_graph(s, CutoffPolicy.k_nearest(1), RBF)
        assert {(src, dst) for src, dst, _, _ in g.iter_edges()} == {
            (1, 0), (0, 1), (1, 2)
        }

    def test_periodic_in_degree_exactly_k(self):
        rng = np.random.default_rng(9)
        for k in (4, 9):
            s = random_crystal(rng, n_min=2, n_max=5)
            g = build_graph(s, CutoffPolicy.k_nearest(k), RBF)
            np.testing.assert_array_equal(g.in_degrees(), k)
            g.validate()

    def test_selects_k_smallest_distances(self):
        rng = np.random.default_rng(31)
        s = random_crystal(rng, n_min=2, n_max=4)
        k = 6
        g = build_graph(s, CutoffPolicy.k_nearest(k), RBF)
        generous = image_displacements(s, 3.0 * perpendicular_widths(s.cell).max())
        for v in range(s.n_atoms):
            chosen = np.sort(g.edge_distance[g.edge_dst == v])
            all_d = np.sort(generous.distance[generous.center == v])
            np.testing.assert_allclose(chosen, all_d[:k], atol=1e-12)

    def test_insufficient_neighbors(self):
        s = AtomicStructure([1, 1], [[0, 0, 0], [1, 0, 0]])
        with pytest.raises(GraphError, match="insufficient neighbors"):
            build_graph(s, CutoffPolicy.k_nearest(5), RBF)

    def test_may_be_asymmetric(self):
        # Outlier atom: its nearest neighbor does not reciprocate.
        s = AtomicStructure(
            [6, 6, 6, 6],
            [[0, 0, 0], [1.2, 0, 0], [0, 1.2, 0], [8.0, 0, 0]],
        )
        g = build_graph(s, CutoffPolicy.k_nearest(2), RBF)
        edges = {(src, dst) for src, dst, _, _ in g.iter_edges()}
        assert (1, 3) in edges and (3, 1) not in edges


class TestVoronoiPolicy:
    def test_simple_cubic_six(self):
        s = AtomicStructure([11], [[0, 0, 0]], np.eye(3) * 2.0)
        g = build_graph(s, CutoffPolicy.voronoi(), RBF)
        assert g.n_edges == 6
        np.testing.assert_allclose(g.edge_distance, 2.0)

    def test_bcc_fourteen(self):
        a = 3.0
        s = AtomicStructure(
            [26, 26], [[0, 0, 0], [a / 2, a / 2, a / 2]], np.eye(3) * a
        )
        g = build_graph(s, CutoffPolicy.voronoi(), RBF)
        np.testing.assert_array_equal(g.in_degrees(), 14)

    def test_fcc_twelve(self):
        a = 4.0
        cell = 0.5 * a * np.array([[0.0, 1, 1], [1, 0, 1], [1, 1, 0]])
        s = AtomicStructure([29], [[0, 0, 0]], cell)
        g = build_graph(s, CutoffPolicy.voronoi(), RBF)
        assert g.n_edges == 12
        np.testing.assert_allclose(g.edge_distance, a / np.sqrt(2.0), atol=1e-12)

    def test_two_atom_fallback(self):
        s = AtomicStructure([1, 1], [[0, 0, 0], [2, 0, 0]])
        g = build_graph(s, CutoffPolicy.voronoi(), RBF)
        assert g.edge_set() == {(0, 1, (0, 0, 0)), (1, 0, (0, 0, 0))}
        assert g.unbounded_cells == 2

    def test_collinear_rejected(self):
        s = AtomicStructure([1, 1, 1], [[0, 0, 0], [1, 0, 0], [2.5, 0, 0]])
        with pytest.raises(GraphError, match="collinear"):
            build_graph(s, CutoffPolicy.voronoi(), RBF)

    def test_symmetric_on_random_crystals(self):
        rng = np.random.default_rng(77)
        for _ in range(8):
            s = random_crystal(rng, n_min=1, n_max=4)
            g = build_graph(s, CutoffPolicy.voronoi(), RBF)
            edges = g.edge_set()
            for src, dst, off in edges:
                assert (dst, src, (-off[0], -off[1], -off[2])) in edges
            assert g.in_degrees().min() > 0

    def test_non_periodic_molecule_symmetric(self):
        rng = np.random.default_rng(5)
        s = random_molecule(rng, n_min=5, n_max=8)
        g = build_graph(s, CutoffPolicy.voronoi(), RBF)
        edges = g.edge_set()
        for src, dst, off in edges:
            assert (dst, src, off) in edges
        assert g.in_degrees().min() >= 1


class TestBatchGraphs:
    def _mol(self, n, spacing=1.2):
        pos = np.zeros((n, 3))
        pos[:, 0] = np.arange(n) * spacing
        return build_graph(
            AtomicStructure([6] * n, pos), CutoffPolicy.distance(2.0), RBF
        )

    def test_segment_ids(self):
        g = batch_graphs([self._mol(2), self._mol(3)])
        np.testing.assert_array_equal(g.segment_ids, [0, 0, 1, 1, 1])
        assert g.n_graphs == 2
        assert g.n_nodes == 5
        g.validate()

    def test_single_graph_identity(self):
        one = self._mol(3)
        g = batch_graphs([one])
        assert g.n_graphs == 1
        np.testing.assert_array_equal(g.edge_src, one.edge_src)
        np.testing.assert_array_equal(g.edge_features, one.edge_features)

    def test_edge_counts_add(self):
        a, b = self._mol(2), self._mol(4)
        g = batch_graphs([a, b])
        assert g.n_edges == a.n_edges + b.n_edges

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            batch_graphs([])

    def test_mixed_rbf_rejected(self):
        a = self._mol(2)
        other = build_graph(
            AtomicStructure([6, 6], [[0, 0, 0], [1.2, 0, 0]]),
            CutoffPolicy.distance(2.0),
            RbfConfig(k_max=5),
        )
        with pytest.raises(ValueError):
            batch_graphs([a, other])


class TestGraphStatistics:
    def test_two_atom_molecule(self):
        s = AtomicStructure([1, 8], [[0, 0, 0], [3, 0, 0]])
        g = build_graph(s, CutoffPolicy.distance(5.0), RBF)
        stats = graph_statistics([g])
        assert stats.mean_incoming_edges == 1.0
        assert stats.stddev_incoming_edges == 0.0
        assert stats.isolated_atom_count == 0

    def test_knearest_forced_mean(self):
        rng = np.random.default_rng(3)
        graphs = [
            build_graph(random_crystal(rng, n_max=3), CutoffPolicy.k_nearest(7), RBF)
            for _ in range(4)
        ]
        stats = graph_statistics(graphs)
        assert stats.mean_incoming_edges == 7.0
        assert stats.stddev_incoming_edges == 0.0

    def test_isolated_atoms(self):
        s = AtomicStructure([1, 1], [[0, 0, 0], [6, 0, 0]])
        g = build_graph(s, CutoffPolicy.distance(5.0), RBF)
        stats = graph_statistics([g])
        assert stats.isolated_atom_count == 2
        assert stats.mean_incoming_edges == 0.0

    def test_csv_format(self, tmp_path):
        s = AtomicStructure([1, 8], [[0, 0, 0], [3, 0, 0]])
        g = build_graph(s, CutoffPolicy.distance(5.0), RBF)
        path = tmp_path / "stats.csv"
        write_statistics_csv(path, [("distance", "5", graph_statistics([g]))])
        lines = path.read_text().splitlines()
        assert lines[0] == "policy,param,mean_incoming,stddev,isolated"
        assert lines[1].startswith("distance,5,1.0,")


class TestGraphCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        graphs = [
            build_graph(random_crystal(rng, n_max=4), CutoffPolicy.k_nearest(5), RBF)
            for _ in range(3)
        ]
        graphs.append(
            build_graph(random_molecule(rng), CutoffPolicy.distance(4.0), RBF)
        )
        ids = [f"g{i}" for i in range(len(graphs))]
        path = tmp_path / "graphs.bin"
        save_graph_cache(path, graphs, ids)
        loaded, loaded_ids = load_graph_cache(path)
        assert loaded_ids == ids
        for a, b in zip(graphs, loaded):
            np.testing.assert_array_equal(a.node_species, b.node_species)
            np.testing.assert_array_equal(a.edge_src, b.edge_src)
            np.testing.assert_array_equal(a.edge_dst, b.edge_dst)
            np.testing.assert_array_equal(a.edge_offset, b.edge_offset)
            np.testing.assert_array_equal(a.edge_distance, b.edge_distance)
            np.testing.assert_array_equal(a.edge_features, b.edge_features)
            assert a.rbf == b.rbf
            b.validate()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="not a graph cache"):
            load_graph_cache(path)
