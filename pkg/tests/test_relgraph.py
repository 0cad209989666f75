import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdsrec.data import SynthSpec, synth_generate
from mdsrec.errors import ShapeError
from mdsrec.numkit import SparseMatrix, Tensor, parameter, tsum
from mdsrec.relgraph import RelationGraph, build_topH_graph, cosine_affinity, dump_graph, graph_convolve


def sort_oracle(x, H):
    """Full sort of every row by (-cosine, index), self excluded."""
    n = len(x)
    out = []
    for i in range(n):
        sims = []
        for j in range(n):
            if j != i:
                denom = math.sqrt(float(x[i] @ x[i])) * math.sqrt(float(x[j] @ x[j]))
                sims.append((-(float(x[i] @ x[j]) / denom), j))
        out.append(sorted(j for _, j in sorted(sims)[:H]))
    return out


def test_cosine_examples():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    assert cosine_affinity(x, 0, 3) == pytest.approx(1.0, abs=1e-15)
    assert cosine_affinity(x, 0, 1) == 0.0
    assert cosine_affinity(x, 0, 2) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine_affinity(x, 0, 4) == 0.0


def test_three_items_h2_is_complete_graph():
    g = build_topH_graph(np.random.default_rng(0).standard_normal((3, 4)), 2)
    assert np.array_equal(g.adjacency.to_dense(), np.ones((3, 3)) - np.eye(3))


def test_h_zero_gives_empty_graph_and_zero_convolution(rng):
    g = build_topH_graph(rng.standard_normal((6, 3)), 0)
    assert g.adjacency.nnz == 0
    assert not graph_convolve(g, rng.standard_normal((6, 4))).data.any()


def test_large_h_clamps_with_warning(rng):
    with pytest.warns(UserWarning, match="clamping"):
        g = build_topH_graph(rng.standard_normal((4, 2)), 10)
    assert g.H == 3


@pytest.mark.parametrize("H", [1, 10, 50])
def test_matches_full_sort_oracle(H):
    x = np.random.default_rng(H).standard_normal((200, 8))
    g = build_topH_graph(x, H, block=64)
    expected = sort_oracle(x, H)
    assert all(g.neighbors(i).tolist() == expected[i] for i in range(200))


@given(st.integers(2, 20), st.integers(0, 25), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_degree_invariant_binary_no_self_loops(n, H, seed):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_topH_graph(x, H)
    a = g.adjacency.to_dense()
    assert np.all(a.sum(1) == min(H, n - 1))
    assert not np.diag(a).any()
    assert set(np.unique(a)) <= {0.0, 1.0}


def test_ties_go_to_lower_index():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = build_topH_graph(x, 2)
    assert g.neighbors(3).tolist() == [0, 1]
    assert g.neighbors(0).tolist() == [1, 2]


def test_cold_items_are_flagged_and_tie_broken():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    g = build_topH_graph(x, 2)
    assert g.cold_items == [0]
    assert g.neighbors(0).tolist() == [1, 2]


def test_positive_row_scaling_keeps_neighbor_sets(rng):
    x = rng.standard_normal((40, 5))
    scaled = x * rng.uniform(0.1, 10.0, size=(40, 1))
    a, b = build_topH_graph(x, 5), build_topH_graph(scaled, 5)
    assert a.adjacency == b.adjacency


def test_row_scale_option_gives_one_over_h(rng):
    g = build_topH_graph(rng.standard_normal((10, 3)), 4, row_scale=True)
    assert np.allclose(g.adjacency.to_dense().sum(1), 1.0)


def test_ring_graph_copies_next_embedding(rng):
    n = 5
    ring = SparseMatrix.from_coo(n, n, np.arange(n), (np.arange(n) + 1) % n, np.ones(n))
    e = rng.standard_normal((n, 3))
    out = graph_convolve(RelationGraph("visual", ring, 1), e).data
    assert np.array_equal(out, np.roll(e, -1, axis=0))


def test_convolution_matches_dense_oracle_and_gradient(rng):
    g = build_topH_graph(rng.standard_normal((50, 6)), 7)
    e = parameter(rng.standard_normal((50, 4)))
    w = rng.standard_normal((50, 4))
    out = graph_convolve(g, e)
    assert np.allclose(out.data, g.adjacency.to_dense() @ e.data, rtol=1e-14, atol=1e-14)
    (tsum(out * w)).backward()
    assert np.allclose(e.grad, g.adjacency.to_dense().T @ w)


def test_convolution_dimension_mismatch(rng):
    g = build_topH_graph(rng.standard_normal((5, 2)), 2)
    with pytest.raises(ShapeError):
        graph_convolve(g, Tensor(np.ones((4, 3))))


def test_modalities_give_different_graphs():
    _, feats = synth_generate(SynthSpec(), 0)
    gv = build_topH_graph(feats["visual"].rows, 5, "visual")
    gt = build_topH_graph(feats["textual"].rows, 5, "textual")
    assert gv.adjacency != gt.adjacency


def test_dump_lists_neighbors(tmp_path, rng):
    g = build_topH_graph(rng.standard_normal((4, 2)), 2)
    dump_graph(g, tmp_path / "g.txt")
    lines = (tmp_path / "g.txt").read_text().splitlines()
    assert lines[0].startswith("# modality=visual H=2") and len(lines) == 5
