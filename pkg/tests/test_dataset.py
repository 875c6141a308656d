import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topostab import autodiff as ad
from topostab.dataset import (DatasetBundle, FeatureConfig, FormatError, IngestionError, SplitError, StateError,
                              attach_hk_features, batch_graphs, iterate_batches, parse_tudataset, stratified_split,
                              write_tudataset)
from topostab.graph import Graph, PerturbConfig, make_rng
from topostab.images import PiParams

from conftest import DATA_DIR, dataset_available, synthetic_bundle


def two_graphs():
    return [Graph.from_edges(3, [(0, 1), (1, 2)], label=1), Graph.from_edges(2, [(0, 1)], label=4)]


def test_mutag_counts(mutag_dir):
    b = parse_tudataset(mutag_dir, "MUTAG")
    assert len(b) == 188 and b.num_classes == 2
    assert np.bincount(b.labels).tolist() == [63, 125]
    assert b.feature_dim == 7
    assert all(g.node_features.shape == (g.num_nodes, 7) for g in b.graphs)


@pytest.mark.skipif(not dataset_available("PROTEINS"), reason="PROTEINS files not present")
def test_proteins_counts():
    b = parse_tudataset(DATA_DIR, "PROTEINS")
    assert len(b) == 1113 and b.num_classes == 2
    assert np.mean([g.num_nodes for g in b.graphs]) == pytest.approx(39.1, abs=0.05)


def test_round_trip(tmp_path):
    write_tudataset(tmp_path, "TINY", two_graphs())
    b = parse_tudataset(tmp_path, "TINY")
    assert [g.edges.tolist() for g in b.graphs] == [[[0, 1], [1, 2]], [[0, 1]]]
    assert b.labels.tolist() == [0, 1] and b.num_classes == 2
    assert b.graphs[0].node_features is None


def test_round_trip_with_node_labels_and_subdir(tmp_path):
    write_tudataset(tmp_path / "TINY", "TINY", two_graphs(), node_labels=[[5, 3, 5], [3, 3]])
    b = parse_tudataset(tmp_path, "TINY")
    assert b.feature_dim == 2
    np.testing.assert_array_equal(b.graphs[0].node_features, [[0, 1], [1, 0], [0, 1]])


def test_tolerant_tokenisation(tmp_path):
    (tmp_path / "T_A.txt").write_text("1,2\n2 ,1\n  3\t4\n4, 3\n")
    (tmp_path / "T_graph_indicator.txt").write_text("1\n1\n2\n2\n")
    (tmp_path / "T_graph_labels.txt").write_text("-1\n1\n")
    b = parse_tudataset(tmp_path, "T")
    assert [g.edges.tolist() for g in b.graphs] == [[[0, 1]], [[0, 1]]]


def test_missing_file_named(tmp_path):
    write_tudataset(tmp_path, "T", two_graphs())
    (tmp_path / "T_graph_labels.txt").unlink()
    with pytest.raises(IngestionError, match="T_graph_labels.txt"):
        parse_tudataset(tmp_path, "T")


def test_unknown_node_reports_line(tmp_path):
    write_tudataset(tmp_path, "T", two_graphs())
    with open(tmp_path / "T_A.txt", "a") as fh:
        fh.write("1, 99\n")
    with pytest.raises(FormatError, match=r"T_A.txt:7"):
        parse_tudataset(tmp_path, "T")


def test_non_integer_token(tmp_path):
    write_tudataset(tmp_path, "T", two_graphs())
    (tmp_path / "T_graph_labels.txt").write_text("1\nx\n")
    with pytest.raises(FormatError, match=r"T_graph_labels.txt:2"):
        parse_tudataset(tmp_path, "T")


def test_split_ten_graphs():
    labels = np.array([0] * 5 + [1] * 5)
    tr, te = stratified_split(labels, 0.8, seed=1)
    assert np.bincount(labels[tr]).tolist() == [4, 4]
    assert np.bincount(labels[te]).tolist() == [1, 1]


def test_split_mutag_size(mutag_dir):
    tr, te = stratified_split(parse_tudataset(mutag_dir, "MUTAG"), 0.8, seed=42)
    assert abs(len(tr) - 150) <= 1 and len(tr) + len(te) == 188


def test_split_rejects_singleton_class():
    with pytest.raises(SplitError):
        stratified_split([0, 0, 1], 0.8, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=60), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_properties(labels, frac, seed):
    labels = np.array(labels)
    counts = np.bincount(labels)
    if np.any((counts > 0) & (counts < 2)):
        with pytest.raises(SplitError):
            stratified_split(labels, frac, seed)
        return
    tr, te = stratified_split(labels, frac, seed)
    assert set(tr).isdisjoint(te) and sorted(np.concatenate([tr, te]).tolist()) == list(range(len(labels)))
    for c in np.flatnonzero(counts):
        assert abs((labels[tr] == c).sum() - frac * counts[c]) <= 1
    tr2, te2 = stratified_split(labels, frac, seed)
    np.testing.assert_array_equal(tr, tr2)
    np.testing.assert_array_equal(te, te2)


def test_batch_single_graph(small_bundle):
    b = batch_graphs(small_bundle.graphs, [0])
    assert not b.batch_vector.any() and b.num_graphs == 1


def test_batch_offsets():
    graphs = two_graphs()
    bundle = attach_hk_features(DatasetBundle("T", graphs, 2, 0))
    b = batch_graphs(bundle.graphs)
    assert b.batch_vector.tolist() == [0, 0, 0, 1, 1]
    assert b.edges.tolist() == [[0, 1], [1, 2], [3, 4]]
    assert b.topo.shape == (2, 200)


def test_batch_requires_topo():
    with pytest.raises(StateError):
        batch_graphs(two_graphs())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_batch_invariants_and_pooling(seed):
    bundle = synthetic_bundle(6, seed=seed % 1000)
    order = make_rng(seed).permutation(6)
    b = batch_graphs(bundle.graphs, order)
    assert np.all(np.diff(b.batch_vector) >= 0) and set(b.batch_vector) == set(range(6))
    for i, j in b.edges:
        assert b.batch_vector[i] == b.batch_vector[j]
    pooled = ad.scatter_add_pool(ad.Tensor(b.node_features), b.batch_vector, 6).data
    separate = np.stack([bundle.graphs[k].node_features.sum(axis=0) for k in order])
    np.testing.assert_allclose(pooled, separate)


def test_iterate_batches_covers_indices(small_bundle):
    idx = np.arange(len(small_bundle))
    got = [b.num_graphs for b in iterate_batches(small_bundle.graphs, idx, 5, make_rng(0))]
    assert got == [5, 5, 2]


def test_attach_native_features_kept():
    g = Graph.from_edges(2, [(0, 1)], node_features=np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = attach_hk_features(DatasetBundle("T", [g], 1, 2))
    np.testing.assert_array_equal(out.graphs[0].node_features, g.node_features)
    assert out.graphs[0].topo.shape == (200,)


def test_attach_degree_fallback():
    g = Graph.from_edges(3, [(0, 1), (0, 2)])
    out = attach_hk_features(DatasetBundle("T", [g], 1, 0), features=FeatureConfig(d_max=1))
    np.testing.assert_array_equal(out.graphs[0].node_features, [[0, 1], [0, 1], [0, 1]])
    assert out.feature_dim == 2


def test_attach_p0_pert_equals_topo():
    out = synthetic_bundle(8, perturb_p=0.0)
    for g in out.graphs:
        np.testing.assert_array_equal(g.topo, g.topo_pert)


def test_attach_four_cycle_mass():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
    out = attach_hk_features(DatasetBundle("T", [g], 1, 0), PiParams(0.4, 1.2, 10))
    assert out.graphs[0].topo[:100].sum() > 0 and out.graphs[0].topo[100:].sum() > 0


def test_attach_idempotent_and_thread_independent():
    base = synthetic_bundle(10, seed=4)
    raw = DatasetBundle("SYN", [Graph(g.num_nodes, g.edges, label=g.label) for g in base.graphs], 2, 0)
    again = attach_hk_features(raw, PiParams(), PerturbConfig(0.05, 4))
    threaded = attach_hk_features(raw, PiParams(), PerturbConfig(0.05, 4), threads=2)
    for a, b, c in zip(base.graphs, again.graphs, threaded.graphs):
        np.testing.assert_array_equal(a.topo_pert, b.topo_pert)
        np.testing.assert_array_equal(a.topo_pert, c.topo_pert)
        np.testing.assert_array_equal(a.topo, c.topo)
