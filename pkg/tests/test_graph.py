import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastgcl.graph import (
    Graph,
    GraphFormatError,
    SbmSpec,
    batch_graphs,
    edge_list,
    from_edge_list,
    generate_motif_graphs,
    generate_sbm,
    identity_view,
    load_graph,
    normalize,
    save_graph,
    split_batch,
)


def path3():
    return from_edge_list(3, [(0, 1), (1, 2)], np.eye(3)[:, :2])


def write_dataset(d, edges, features, labels=None, graph_ids=None, newline="\n"):
    d.mkdir(exist_ok=True)
    (d / "edges.csv").write_bytes(newline.join(edges).encode() + (newline.encode() if edges else b""))
    (d / "features.csv").write_bytes(newline.join(features).encode() + newline.encode())
    if labels is not None:
        (d / "labels.csv").write_text("\n".join(map(str, labels)) + "\n")
    if graph_ids is not None:
        (d / "graph_ids.csv").write_text("\n".join(map(str, graph_ids)) + "\n")


def dense_renormalized(n, edges):
    """Independent dense oracle: D^-1/2 (A + I) D^-1/2."""
    a = np.zeros((n, n))
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    a_tilde = a + np.eye(n)
    d = a_tilde.sum(axis=1)
    return a_tilde / np.sqrt(np.outer(d, d))


@st.composite
def small_graphs(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    return n, chosen


class TestLoadGraph:
    def test_path_graph_csr(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,1", "1,2"], ["1,0", "0,1", "0,0"])
        g = load_graph(tmp_path / "d")
        assert g.num_nodes == 3
        assert g.num_edges == 2
        np.testing.assert_array_equal(g.row_ptr, [0, 1, 3, 4])
        np.testing.assert_array_equal(g.col_idx, [1, 0, 2, 1])
        np.testing.assert_array_equal(g.features, [[1, 0], [0, 1], [0, 0]])
        assert g.labels is None

    def test_single_node_no_edges(self, tmp_path):
        write_dataset(tmp_path / "d", [], ["0.5,1.5"])
        g = load_graph(tmp_path / "d")
        assert (g.num_nodes, g.num_edges) == (1, 0)

    def test_duplicate_directions_collapse(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,1", "1,0"], ["1", "2"])
        assert load_graph(tmp_path / "d").num_edges == 1

    def test_self_loops_dropped_and_crlf(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,0", "0,1", "1,1"], ["1", "2"], labels=[0, 1], newline="\r\n")
        g = load_graph(tmp_path / "d")
        assert g.num_edges == 1
        np.testing.assert_array_equal(g.labels, [0, 1])

    def test_missing_file(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "edges.csv").write_text("0,1\n")
        with pytest.raises(FileNotFoundError):
            load_graph(tmp_path / "d")

    def test_node_out_of_range(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,5"], ["1", "2"])
        with pytest.raises(GraphFormatError, match="out of range"):
            load_graph(tmp_path / "d")

    def test_non_numeric(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,x"], ["1", "2"])
        with pytest.raises(GraphFormatError, match="non-numeric"):
            load_graph(tmp_path / "d")

    def test_label_count_mismatch(self, tmp_path):
        write_dataset(tmp_path / "d", ["0,1"], ["1", "2"], labels=[0])
        with pytest.raises(GraphFormatError):
            load_graph(tmp_path / "d")

    def test_round_trip(self, tmp_path):
        g = generate_sbm(SbmSpec((4, 5), 0.6, 0.1, feature_dim=3, seed=2))
        save_graph(g, tmp_path / "rt")
        h = load_graph(tmp_path / "rt")
        np.testing.assert_array_equal(g.row_ptr, h.row_ptr)
        np.testing.assert_array_equal(g.col_idx, h.col_idx)
        np.testing.assert_array_equal(g.features, h.features)
        np.testing.assert_array_equal(g.labels, h.labels)


class TestNormalize:
    def test_path_coefficients(self):
        adj = normalize(path3())
        dense = adj.to_dense()
        assert dense[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
        assert dense[0, 1] == pytest.approx(0.408248, abs=1e-6)
        np.testing.assert_allclose(dense, dense_renormalized(3, [(0, 1), (1, 2)]), atol=1e-15)

    def test_isolated_node(self):
        g = from_edge_list(1, [], np.ones((1, 1)))
        adj = normalize(g)
        assert adj.nnz == 1 and adj.coeffs[0] == 1.0

    def test_edgeless_is_identity(self):
        g = from_edge_list(4, [], np.ones((4, 2)))
        np.testing.assert_array_equal(normalize(g).to_dense(), np.eye(4))

    def test_pure(self):
        g = generate_sbm(SbmSpec((5, 5), 0.5, 0.1, seed=1))
        a, b = normalize(g), normalize(g)
        assert a.coeffs.tobytes() == b.coeffs.tobytes()
        assert a.col_idx.tobytes() == b.col_idx.tobytes()

    @settings(max_examples=60, deadline=None)
    @given(small_graphs())
    def test_dense_oracle(self, ge):
        n, edges = ge
        g = from_edge_list(n, edges, np.ones((n, 1)))
        adj = normalize(g)
        np.testing.assert_allclose(adj.to_dense(), dense_renormalized(n, edges), atol=1e-12, rtol=0)
        assert np.all(adj.coeffs > 0)
        dense = adj.to_dense()
        np.testing.assert_array_equal(dense, dense.T)
        assert np.sum(adj.edge_slot < 0) == n


class TestIdentityView:
    def test_path(self):
        adj = identity_view(path3())
        assert adj.nnz == 3
        np.testing.assert_array_equal(adj.coeffs, [1, 1, 1])
        np.testing.assert_array_equal(adj.col_idx, [0, 1, 2])

    def test_single(self):
        adj = identity_view(from_edge_list(1, [], np.ones((1, 1))))
        assert adj.nnz == 1 and adj.coeffs[0] == 1


class TestGraphInvariants:
    @settings(max_examples=60, deadline=None)
    @given(small_graphs(max_nodes=10))
    def test_symmetric_dedup_no_self_loops(self, ge):
        n, edges = ge
        doubled = edges + [(v, u) for u, v in edges] + [(0, 0)]
        g = from_edge_list(n, doubled, np.zeros((n, 1)))
        g.validate()
        assert g.num_edges == len(edges)
        assert g.row_ptr[-1] == 2 * g.num_edges
        np.testing.assert_array_equal(g.degrees(), np.bincount(g.col_idx, minlength=n))

    def test_immutable(self):
        g = path3()
        with pytest.raises(ValueError):
            g.features[0, 0] = 5.0


class TestSbm:
    def test_cliques(self):
        g = generate_sbm(SbmSpec((3, 3), 1.0, 0.0, seed=0))
        assert g.num_edges == 6
        np.testing.assert_array_equal(g.labels, [0, 0, 0, 1, 1, 1])
        assert not any((u < 3) != (v < 3) for u, v in edge_list(g))

    def test_edgeless(self):
        assert generate_sbm(SbmSpec((4, 4), 0.0, 0.0, seed=0)).num_edges == 0

    def test_deterministic(self):
        spec = SbmSpec((10, 12), 0.3, 0.05, feature_dim=5, feature_signal=2.0, seed=11)
        a, b = generate_sbm(spec), generate_sbm(spec)
        assert a.col_idx.tobytes() == b.col_idx.tobytes()
        assert a.features.tobytes() == b.features.tobytes()

    def test_invalid(self):
        with pytest.raises(ValueError):
            SbmSpec((3,), 1.5, 0.0)
        with pytest.raises(ValueError):
            SbmSpec((0, 3), 0.5, 0.0)

    def test_motif_graphs(self):
        graphs = generate_motif_graphs(10, 20, 5, seed=3)
        assert len(graphs) == 10
        assert [int(g.labels[0]) for g in graphs] == [0, 1] * 5
        for g in graphs:
            g.validate()
            np.testing.assert_array_equal(g.features, np.ones((g.num_nodes, 1)))


class TestBatch:
    def test_two_small(self):
        a = from_edge_list(2, [(0, 1)], np.ones((2, 1)))
        g = batch_graphs([a, a])
        assert g.num_nodes == 4
        np.testing.assert_array_equal(g.graph_ids, [0, 0, 1, 1])
        g.validate()

    def test_single_identity(self):
        a = path3()
        g = batch_graphs([a])
        np.testing.assert_array_equal(g.row_ptr, a.row_ptr)
        np.testing.assert_array_equal(g.col_idx, a.col_idx)
        np.testing.assert_array_equal(g.graph_ids, [0, 0, 0])

    def test_triangle_plus_path(self):
        tri = from_edge_list(3, [(0, 1), (1, 2), (0, 2)], np.ones((3, 1)))
        pth = from_edge_list(3, [(0, 1), (1, 2)], np.ones((3, 1)))
        g = batch_graphs([tri, pth])
        assert g.num_edges == 5
        assert len(g.row_ptr) == 7
        # hand-built CSR: triangle rows then path rows offset by 3
        np.testing.assert_array_equal(g.row_ptr, [0, 2, 4, 6, 7, 9, 10])
        np.testing.assert_array_equal(g.col_idx, [1, 2, 0, 2, 0, 1, 4, 3, 5, 4])

    def test_no_cross_edges_and_split(self):
        gs = generate_motif_graphs(6, 15, 5, seed=1)
        b = batch_graphs(gs)
        rows = b.edge_rows()
        assert np.all(b.graph_ids[rows] == b.graph_ids[b.col_idx])
        back = split_batch(b)
        for x, y in zip(gs, back):
            np.testing.assert_array_equal(x.col_idx, y.col_idx)
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_errors(self):
        with pytest.raises(ValueError):
            batch_graphs([])
        with pytest.raises(ValueError):
            batch_graphs([from_edge_list(1, [], np.ones((1, 1))), from_edge_list(1, [], np.ones((1, 2)))])

    def test_pooling_commutes_with_batching(self):
        gs = generate_motif_graphs(4, 15, 5, seed=2)
        gs = [from_edge_list(g.num_nodes, edge_list(g), np.random.default_rng(i).random((g.num_nodes, 3)))
              for i, g in enumerate(gs)]
        b = batch_graphs(gs)
        pooled = np.zeros((4, 3))
        np.add.at(pooled, b.graph_ids, b.features)
        for i, g in enumerate(gs):
            single = np.zeros((1, 3))
            np.add.at(single, np.zeros(g.num_nodes, dtype=int), g.features)
            assert pooled[i].tobytes() == single[0].tobytes()


def test_graph_type_exported():
    assert Graph is type(path3())
