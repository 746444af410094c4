import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krigwrap.data import DataError, MissingnessSpec, simulate_missingness, split_nodes, synthetic_panel
from krigwrap.sampling import eval_stream, grow_connected, make_batch, make_view, sample_subgraph, unbatch

from conftest import micro_view


@pytest.fixture(scope="module")
def big_view():
    panel, _, adj = synthetic_panel(n_nodes=140, T=48, seed=0)
    obs, unobs = split_nodes(140, 0.2, 0)
    mask = simulate_missingness(panel, obs, MissingnessSpec("random", 0.2, seed=0), adj)
    return make_view(panel, adj, mask, obs, unobs)


def test_shapes_reference_sizes(big_view):
    s = sample_subgraph(big_view, 110, 1, 24, "train", np.random.default_rng(0))
    assert s.X.shape == (110, 24) and s.Y.shape == (1, 24) and s.A_sub.shape == (110, 110)


def test_target_rows_zeroed(big_view):
    s = sample_subgraph(big_view, 30, 3, 24, "train", np.random.default_rng(1))
    assert np.all(s.X[s.target_rows] == 0) and np.all(s.M[s.target_rows] == 0)
    # the pseudo-targets keep their ground truth in Y
    tgt = s.node_ids[s.target_rows]
    assert np.array_equal(s.Y, big_view.truth[tgt, s.window_start:s.window_start + 24])


def test_train_nodes_are_observed_and_distinct(big_view):
    s = sample_subgraph(big_view, 50, 2, 24, "train", np.random.default_rng(2))
    assert set(s.node_ids) <= set(big_view.observed_ids)
    assert len(set(s.node_ids)) == 50


def test_eval_stream_disjoint_windows():
    view, _ = micro_view(n_nodes=10, T=240)
    stream = eval_stream(view, view.unobserved_ids, 6, 24, seed=0)
    for v in view.unobserved_ids:
        starts = sorted(s.window_start for s in stream if s.node_ids[s.target_rows[0]] == v)
        assert starts == list(range(0, 240, 24))


def test_eval_stream_deterministic():
    view, _ = micro_view()
    a = eval_stream(view, view.unobserved_ids, 5, 8, seed=3)
    b = eval_stream(view, view.unobserved_ids, 5, 8, seed=3)
    assert all(np.array_equal(x.node_ids, y.node_ids) for x, y in zip(a, b))


def test_eval_target_never_leaks():
    view, _ = micro_view()
    for s in eval_stream(view, view.unobserved_ids, 6, 8, seed=0):
        assert set(s.node_ids[:-1]) <= set(view.observed_ids)
        assert np.all(s.X[-1] == 0) and np.all(s.M[-1] == 0)


def test_unobserved_rows_masked_in_view():
    view, _ = micro_view()
    assert not view.input_mask[view.unobserved_ids].any()
    assert not view.values[view.unobserved_ids].any()
    assert np.all(view.values[view.input_mask == 0] == 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), u=st.integers(1, 3))
def test_unobserved_values_never_reach_inputs(seed, u):
    """Perturbing a held-out node's signal leaves every sampled input unchanged."""
    panel, _, adj = synthetic_panel(n_nodes=12, T=48, seed=1)
    obs, unobs = split_nodes(12, 0.25, seed)
    mask = simulate_missingness(panel, obs, MissingnessSpec("random", 0.2, seed=seed), adj)
    v1 = make_view(panel, adj, mask, obs, unobs)
    panel.values[unobs] += 100.0
    v2 = make_view(panel, adj, mask, obs, unobs, scaler=v1.scaler)
    s1 = sample_subgraph(v1, 6, u, 8, "train", np.random.default_rng(seed))
    s2 = sample_subgraph(v2, 6, u, 8, "train", np.random.default_rng(seed))
    assert np.array_equal(s1.X, s2.X) and np.array_equal(s1.M, s2.M)


def test_oversized_subgraph():
    view, _ = micro_view()
    with pytest.raises(DataError):
        sample_subgraph(view, 50, 1, 8, "train", np.random.default_rng(0))
    with pytest.raises(DataError):
        sample_subgraph(view, 5, 1, 500, "train", np.random.default_rng(0))


class TestBatch:
    def test_leading_dim(self):
        view, _ = micro_view()
        rng = np.random.default_rng(0)
        b = make_batch([sample_subgraph(view, 5, 1, 8, "train", rng) for _ in range(128)])
        assert b.X.shape[0] == 128 and len(b) == 128

    def test_single_and_round_trip(self):
        view, _ = micro_view()
        rng = np.random.default_rng(0)
        samples = [sample_subgraph(view, 5, 2, 8, "train", rng) for _ in range(4)]
        for orig, back in zip(samples, unbatch(make_batch(samples, dtype=__import__("torch").float64))):
            for f in ("node_ids", "X", "A_sub", "M", "target_rows", "Y", "Y_mask"):
                assert np.array_equal(getattr(orig, f), getattr(back, f))
            assert orig.window_start == back.window_start

    def test_heterogeneous_rejected(self):
        view, _ = micro_view()
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            make_batch([sample_subgraph(view, 5, 1, 8, "train", rng),
                        sample_subgraph(view, 6, 1, 8, "train", rng)])


@pytest.mark.parametrize("node_sampling", ["uniform", "connected"])
def test_every_observed_node_is_drawn_as_target(big_view, node_sampling):
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(1000):
        s = sample_subgraph(big_view, 30, 3, 24, "train", rng, node_sampling=node_sampling)
        seen.update(s.node_ids[s.target_rows].tolist())
    assert seen == set(big_view.observed_ids.tolist())


@pytest.mark.parametrize("node_sampling", ["uniform", "connected"])
def test_sub_adjacency_is_gather_of_full(big_view, node_sampling):
    rng = np.random.default_rng(4)
    for mode, kw in (("train", {}), ("eval", {"target": int(big_view.unobserved_ids[0]), "window_start": 0})):
        s = sample_subgraph(big_view, 40, 1, 24, mode, rng, node_sampling=node_sampling, **kw)
        assert np.array_equal(s.A_sub, big_view.adjacency[np.ix_(s.node_ids, s.node_ids)])


def _reachable(adj, pool, start):
    allowed = set(pool.tolist()) | {start}
    seen, todo = {start}, [start]
    while todo:
        v = todo.pop()
        for w in np.flatnonzero(adj[v] > 0):
            if int(w) in allowed and int(w) not in seen:
                seen.add(int(w))
                todo.append(int(w))
    return seen


def test_connected_sampling_stays_in_component(big_view):
    adj, pool = big_view.adjacency, big_view.observed_ids
    rng = np.random.default_rng(5)
    start = int(big_view.unobserved_ids[0])
    comp = _reachable(adj, pool, start) - {start}
    k = min(10, len(comp))
    got = grow_connected(adj, pool, k, rng, start=start)
    assert len(set(got.tolist())) == k and set(got.tolist()) <= comp
    # induced subgraph with the start node is connected
    nodes = np.concatenate([[start], got])
    assert _reachable(adj[np.ix_(nodes, nodes)], np.arange(1, k + 1), 0) == set(range(k + 1))


def test_connected_sampling_fills_past_component():
    adj = np.zeros((8, 8))
    adj[0, 1] = adj[1, 0] = 1.0
    got = grow_connected(adj, np.arange(8), 5, np.random.default_rng(0), start=0)
    assert len(set(got.tolist())) == 5 and 0 not in got and got[0] == 1


def test_unknown_node_sampling_rejected(big_view):
    with pytest.raises(ValueError):
        sample_subgraph(big_view, 10, 1, 24, "train", np.random.default_rng(0), node_sampling="ring")
