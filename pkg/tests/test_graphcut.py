import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recistseg.errors import DataError
from recistseg.graphcut import INF, FlowNetwork, build_grid, max_flow, neighbour_offsets, solve


def random_network(rng, n_max=10, cap_max=20, p_arc=0.4):
    n = int(rng.integers(1, n_max + 1))
    pairs = [(u, v) for u, v in itertools.combinations(range(n), 2) if rng.random() < p_arc]
    arcs = np.array(pairs, dtype=int).reshape(-1, 2)
    m = len(arcs)
    return FlowNetwork(n, arcs, rng.integers(0, cap_max + 1, m), rng.integers(0, cap_max + 1, m),
                       rng.integers(0, cap_max + 1, n), rng.integers(0, cap_max + 1, n))


def brute_min_cut(net):
    """Cheapest of all 2^n source/sink assignments, summed edge by edge."""
    best = None
    for bits in itertools.product((0, 1), repeat=net.n_nodes):
        s = np.array(bits, bool)
        val = 0.0
        for i in range(net.n_nodes):
            val += net.to_sink[i] if s[i] else net.to_source[i]
        for (u, v), cuv, cvu in zip(net.arcs, net.cap_uv, net.cap_vu):
            if s[u] and not s[v]:
                val += cuv
            elif s[v] and not s[u]:
                val += cvu
        best = val if best is None else min(best, val)
    return best


def test_single_node():
    flow, side = max_flow(FlowNetwork(1, np.zeros((0, 2)), [], [], [5], [3]))
    assert flow == 3 and side.tolist() == [1]


def test_infinite_clamp_wins():
    net = FlowNetwork(2, [[0, 1]], [100.0], [100.0], [INF, 0.0], [50.0, 7.0])
    flow, side = max_flow(net)
    assert side[0] == 1
    assert flow == pytest.approx(brute_min_cut(FlowNetwork(2, [[0, 1]], [100.0], [100.0], [1e9, 0.0], [50.0, 7.0])))


def test_contradictory_clamp():
    with pytest.raises(DataError, match="contradictory clamp"):
        max_flow(FlowNetwork(1, np.zeros((0, 2)), [], [], [INF], [INF]))


def test_diamond_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(20):
        arcs = [[0, 1], [0, 2], [1, 3], [2, 3], [1, 2]]
        net = FlowNetwork(4, arcs, rng.integers(0, 21, 5), rng.integers(0, 21, 5),
                          rng.integers(0, 21, 4), rng.integers(0, 21, 4))
        flow, side = max_flow(net)
        assert flow == brute_min_cut(net)
        assert net.cut_value(side) == flow


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graphs_match_exhaustive_cut(seed):
    net = random_network(np.random.default_rng(seed))
    flow, side = max_flow(net)
    assert flow == brute_min_cut(net)
    assert net.cut_value(side) == pytest.approx(flow, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flow_conservation(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n_max=12)
    flow, side, arc_flow, excess = solve(net)
    net_out = np.zeros(net.n_nodes)
    np.add.at(net_out, net.arcs[:, 0], arc_flow)
    np.add.at(net_out, net.arcs[:, 1], -arc_flow)
    # what a node takes in from the terminals it passes on through its arcs
    assert np.allclose(excess, net_out, atol=1e-9)
    assert (arc_flow <= net.cap_uv + 1e-9).all() and (-arc_flow <= net.cap_vu + 1e-9).all()


def test_real_valued_capacities():
    rng = np.random.default_rng(12)
    for _ in range(30):
        n = 7
        arcs = np.array(list(itertools.combinations(range(n), 2)))
        net = FlowNetwork(n, arcs, rng.random(len(arcs)), rng.random(len(arcs)), rng.random(n) * 2, rng.random(n) * 2)
        flow, side = max_flow(net)
        assert flow == pytest.approx(brute_min_cut(net), rel=1e-12)


def test_grid_counts():
    net = build_grid((2, 1), np.zeros((1, 2)), np.zeros((1, 2)), 1.0)
    assert net.n_arcs == 1 and net.n_nodes == 2
    net = build_grid((3, 3), np.zeros((3, 3)), np.zeros((3, 3)), 1.0, connectivity=8)
    # 6 horizontal + 6 vertical + 4 + 4 diagonal unique pairs
    assert net.n_arcs == 20
    assert build_grid((3, 3), np.zeros((3, 3)), np.zeros((3, 3)), 1.0, connectivity=4).n_arcs == 12
    pairs = {tuple(sorted(p)) for p in net.arcs.tolist()}
    assert len(pairs) == 20


def test_grid_decoupled_by_unaries():
    rng = np.random.default_rng(0)
    us, ut = rng.random((5, 6)), rng.random((5, 6))
    flow, side = max_flow(build_grid((6, 5), us, ut, 0.0))
    assert np.array_equal(side.reshape(5, 6).astype(bool), us > ut)
    assert flow == pytest.approx(np.minimum(us, ut).sum())


def test_grid_pairwise_dict_and_errors():
    ny, nx = 4, 5
    w = {off: np.full((ny, nx), 0.5) for off in neighbour_offsets(8)}
    net = build_grid((nx, ny), np.ones((ny, nx)), np.zeros((ny, nx)), w)
    assert np.allclose(net.cap_uv, 0.5)
    with pytest.raises(DataError):
        build_grid((nx, ny), np.ones((3, 3)), np.zeros((3, 3)))
    with pytest.raises(DataError):
        build_grid((nx, ny), np.ones((ny, nx)), np.zeros((ny, nx)), {off: np.ones((2, 2)) for off in neighbour_offsets(8)})
    with pytest.raises(ValueError):
        build_grid((nx, ny), np.ones((ny, nx)), np.zeros((ny, nx)), connectivity=6)


def test_grid_smoothing_joins_pixels():
    # a weak-preference pixel follows its strongly linked neighbours
    us = np.array([[5.0, 0.4, 5.0]])
    ut = np.array([[0.0, 0.6, 0.0]])
    _, side = max_flow(build_grid((3, 1), us, ut, 2.0, connectivity=4))
    assert side.tolist() == [1, 1, 1]


def test_invalid_network():
    with pytest.raises(DataError):
        FlowNetwork(2, [[0, 2]], [1], [1], [0, 0], [0, 0])
    with pytest.raises(DataError):
        FlowNetwork(2, [[0, 1]], [-1], [1], [0, 0], [0, 0])
