import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphkd.graph import (
    Graph,
    GraphFormatError,
    SplitSpec,
    count_pendant_triangles,
    load_graph,
    load_manifest,
    make_batch,
    save_graph,
    split_indices,
    synth_molgraphs,
    synth_sbm,
    write_dataset,
)

PATH3 = """#graph path3 nodes=3 dim=2 labels=node classes=2
0.5 1.0
-1.0 0.25
2.0 0.0
0
1
0
#edges
0 1
1 0
1 2
2 1
"""


def write(tmp_path, text, name="g.graph"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_path_graph(tmp_path):
    g = load_graph(write(tmp_path, PATH3))
    assert g.n == 3 and g.num_edges == 4 and g.dim == 2
    assert g.id == "path3" and g.label_kind == "node"
    np.testing.assert_array_equal(g.node_labels, [0, 1, 0])
    np.testing.assert_array_equal(g.x[1], [-1.0, 0.25])


def test_edge_out_of_range_names_line(tmp_path):
    bad = PATH3.replace("2 1\n", "5 0\n")
    with pytest.raises(GraphFormatError, match="edge endpoint out of range") as exc:
        load_graph(write(tmp_path, bad))
    assert exc.value.line == 12


def test_feature_row_count_mismatch(tmp_path):
    bad = PATH3.replace("2.0 0.0\n", "")
    with pytest.raises(GraphFormatError, match="feature row count mismatch"):
        load_graph(write(tmp_path, bad))


def test_malformed_header(tmp_path):
    with pytest.raises(GraphFormatError, match="malformed header") as exc:
        load_graph(write(tmp_path, PATH3.replace("#graph", "graph")))
    assert exc.value.line == 1


def test_graph_label_file(tmp_path):
    text = "#graph m nodes=2 dim=1 labels=graph classes=2\n1.0\n2.0\n1\n#edges\n0 1\n1 0\n"
    g = load_graph(write(tmp_path, text))
    assert g.label_kind == "graph" and g.graph_label == 1


def test_round_trip_is_bit_exact(tmp_path, rng):
    g = synth_sbm(2, 5, 0.8, 0.1, 3, 0.7, seed=3)
    save_graph(g, tmp_path / "a.graph")
    h = load_graph(tmp_path / "a.graph")
    assert h.n == g.n and h.id == g.id and h.num_classes == g.num_classes
    assert np.array_equal(h.x, g.x)
    assert {tuple(e) for e in h.edges} == {tuple(e) for e in g.edges}
    np.testing.assert_array_equal(h.node_labels, g.node_labels)


def test_manifest_round_trip(tmp_path):
    graphs = synth_molgraphs(5, 6, 9, 2, seed=0)
    manifest = write_dataset(graphs, tmp_path / "ds")
    loaded = load_manifest(manifest)
    assert [g.id for g in loaded] == [g.id for g in graphs]
    assert all(np.array_equal(a.x, b.x) for a, b in zip(loaded, graphs))


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(n=2, edges=[(0, 2)], x=np.zeros((2, 1)), node_labels=[0, 0]), "out of range"),
        (dict(n=2, edges=[], x=np.zeros((3, 1)), node_labels=[0, 0]), "rows"),
        (dict(n=2, edges=[], x=np.zeros((2, 1))), "exactly one"),
        (dict(n=2, edges=[], x=np.zeros((2, 1)), node_labels=[0, 0], graph_label=1), "exactly one"),
        (dict(n=2, edges=[(0, 1), (0, 1)], x=np.zeros((2, 1)), node_labels=[0, 0]), "duplicate"),
    ],
)
def test_graph_invariants(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        Graph(**kwargs)


def small(n, d=2, label=0, node=False):
    e = [(i, i + 1) for i in range(n - 1)]
    e += [(b, a) for a, b in e]
    if node:
        return Graph(n, e, np.arange(n * d, dtype=float).reshape(n, d), node_labels=np.zeros(n, int))
    return Graph(n, e, np.arange(n * d, dtype=float).reshape(n, d), graph_label=label)


def test_batch_offsets():
    b = make_batch([small(2), small(3)])
    assert b.num_nodes == 5
    np.testing.assert_array_equal(b.offsets, [0, 2])
    np.testing.assert_array_equal(b.node_to_graph, [0, 0, 1, 1, 1])


def test_single_graph_batch_is_identity():
    g = small(4, node=True)
    b = make_batch([g])
    np.testing.assert_array_equal(b.offsets, [0])
    assert np.array_equal(b.x, g.x) and np.array_equal(b.edges, g.edges)


def test_batch_errors():
    with pytest.raises(ValueError, match="empty batch"):
        make_batch([])
    with pytest.raises(ValueError, match="mixed label kinds"):
        make_batch([small(2), small(2, node=True)])
    with pytest.raises(ValueError, match="mixed feature widths"):
        make_batch([small(2, d=2), small(2, d=3)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_batch_preserves_structure(sizes):
    graphs = [small(n, label=k % 2) for k, n in enumerate(sizes)]
    b = make_batch(graphs)
    assert b.num_nodes == sum(sizes)
    assert np.all(np.diff(b.node_to_graph) >= 0)
    edges = {tuple(e) for e in b.edges}
    for g, off in zip(graphs, b.offsets):
        for u, v in g.edges:
            assert (off + u, off + v) in edges
    assert np.all(b.node_to_graph[b.edges[:, 0]] == b.node_to_graph[b.edges[:, 1]])


def test_induced_relabels():
    b = make_batch([small(4, node=True)])
    nodes, e = b.induced([1, 2, 3])
    assert {tuple(x) for x in e} == {(0, 1), (1, 0), (1, 2), (2, 1)}


# ---------------------------------------------------------------- splits


def test_split_is_partition():
    s = split_indices(100, SplitSpec(0.6, 0.2, 0.2, seed=4))
    allidx = np.concatenate([s.train, s.valid, s.test])
    assert sorted(allidx.tolist()) == list(range(100))
    assert (len(s.train), len(s.valid), len(s.test)) == (60, 20, 20)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.0)
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.3, 0.3)
    with pytest.raises(ValueError):
        SplitSpec(mode="weird")


def test_planted_shift_puts_largest_keys_in_test():
    key = np.arange(50)[::-1]
    s = split_indices(50, SplitSpec(0.6, 0.2, 0.2, mode="planted-shift"), key)
    assert key[s.test].min() >= key[s.train].max()


# ---------------------------------------------------------------- generators


def test_sbm_two_cliques():
    g = synth_sbm(2, 4, 1.0, 0.0, 2, 0.0, seed=0)
    np.testing.assert_array_equal(g.node_labels, [0, 0, 0, 0, 1, 1, 1, 1])
    expect = {(i, j) for blk in (range(4), range(4, 8)) for i in blk for j in blk if i != j}
    assert {tuple(e) for e in g.edges} == expect
    np.testing.assert_array_equal(g.x[:4], [[1, 0]] * 4)


def test_sbm_deterministic():
    a, b = synth_sbm(3, 10, 0.5, 0.1, 4, 1.0, seed=9), synth_sbm(3, 10, 0.5, 0.1, 4, 1.0, seed=9)
    assert np.array_equal(a.edges, b.edges) and np.array_equal(a.x, b.x)


def test_sbm_rejects_non_homophilous():
    with pytest.raises(ValueError, match="p_out < p_in"):
        synth_sbm(2, 4, 0.1, 0.1, 2, 0.0, seed=0)


def test_sbm_intra_block_edges_within_5_sigma():
    blocks, npb, p_in = 5, 100, 0.1
    g = synth_sbm(blocks, npb, p_in, 0.01, 8, 1.0, seed=1)
    lab = g.node_labels
    intra = int(np.sum(lab[g.edges[:, 0]] == lab[g.edges[:, 1]]))
    # directed count = 2 x unordered pairs, each pair Bernoulli(p_in)
    pairs = blocks * npb * (npb - 1) / 2
    mean = 2 * pairs * p_in
    sigma = 2 * np.sqrt(pairs * p_in * (1 - p_in))
    assert abs(intra - mean) < 5 * sigma


def _connected(g):
    adj = {i: set() for i in range(g.n)}
    for s, t in g.edges:
        adj[s].add(t)
    seen, stack = {0}, [0]
    while stack:
        for u in adj[stack.pop()]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == g.n


def test_molgraphs_connected_and_sized():
    graphs = synth_molgraphs(10, 6, 12, 2, seed=5)
    assert len(graphs) == 10
    assert all(6 <= g.n <= 12 and _connected(g) for g in graphs)


def test_molgraphs_deterministic():
    a, b = synth_molgraphs(8, 5, 10, 2, seed=2), synth_molgraphs(8, 5, 10, 2, seed=2)
    assert all(np.array_equal(x.edges, y.edges) and x.graph_label == y.graph_label for x, y in zip(a, b))


def test_molgraphs_label_balance():
    graphs = synth_molgraphs(1000, 8, 30, 2, seed=0)
    freq = np.bincount([g.graph_label for g in graphs], minlength=2) / 1000
    assert np.all((freq >= 0.2) & (freq <= 0.8))


def test_molgraph_label_matches_motif_count():
    for g in synth_molgraphs(30, 8, 20, 3, seed=1):
        assert g.graph_label == min(count_pendant_triangles(g.n, g.edges), 2)


def test_pendant_triangle_counter():
    tri = [(0, 1), (1, 2), (2, 0), (0, 3)]
    e = np.array(tri + [(b, a) for a, b in tri])
    assert count_pendant_triangles(4, e) == 1
    closed = tri[:3] + [(b, a) for a, b in tri[:3]]
    assert count_pendant_triangles(3, np.array(closed)) == 0
