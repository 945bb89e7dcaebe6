import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netpp.errors import StructuralError
from netpp.network import (DistanceIndex, NetworkLocation, StreetNetwork, load_network,
                           location_distances, net_distance, project_lonlat, read_network_csv,
                           save_network, snap_event, snap_points, unproject_xy, zone_street_length)
from netpp.synthetic import grid_network, random_network

from oracles import floyd_warshall, four_route_distance


class TestProjection:
    def test_latitude_step(self):
        x, y = project_lonlat(0.0, 0.01, 0.0)
        assert x == 0.0
        assert y == pytest.approx(6371 * 0.01 * math.pi / 180, rel=1e-12)
        assert y == pytest.approx(1.1119, abs=1e-4)

    def test_reference_is_origin(self):
        assert project_lonlat(-0.376, 39.47, 39.47, -0.376) == (0.0, 0.0)

    def test_longitude_shrinks_with_latitude(self):
        x, _ = project_lonlat(0.01, 60.0, 60.0)
        assert x == pytest.approx(0.5560, abs=1e-4)
        assert x == pytest.approx(project_lonlat(0.0, 0.01, 0.0)[1] / 2, rel=1e-12)

    def test_round_trip(self):
        lon, lat = np.array([-0.38, -0.35]), np.array([39.45, 39.50])
        x, y = project_lonlat(lon, lat, 39.47, -0.37)
        lon2, lat2 = unproject_xy(x, y, 39.47, -0.37)
        np.testing.assert_allclose(lon2, lon, atol=1e-12)
        np.testing.assert_allclose(lat2, lat, atol=1e-12)

    def test_polar_latitude_rejected(self):
        with pytest.raises(StructuralError):
            project_lonlat(0.0, 89.5, 0.0)


def line_net():
    # three parallel horizontal edges 0.2 apart, plus a long one
    xy = [[0, 0], [1, 0], [0, 0.2], [1, 0.2], [0, -0.2], [1, -0.2]]
    return StreetNetwork(xy, [[0, 1], [2, 3], [4, 5]])


class TestSnapping:
    def test_on_segment_midpoint(self):
        net = grid_network(3, 1.0)
        mid = net.location_xy([7], [0.5])[0]
        loc, d = snap_event(mid, net)
        assert loc == NetworkLocation(7, 0.5)
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_tie_goes_to_lowest_edge(self):
        net = line_net()
        # equidistant (0.1 km) from edges 0 and 1
        loc, d = snap_event([0.5, 0.1], net)
        assert loc.edge_id == 0
        assert d == pytest.approx(0.1)
        loc, _ = snap_event([0.5, -0.1], net)
        assert loc.edge_id == 0

    def test_beyond_endpoint_clamps(self):
        net = line_net()
        loc, d = snap_event([1.5, 0.0], net)
        assert loc == NetworkLocation(0, 1.0)
        assert d == pytest.approx(0.5)
        loc, _ = snap_event([-0.3, 0.0], net)
        assert loc.offset_km == 0.0

    def test_empty_network(self):
        net = StreetNetwork(np.zeros((0, 2)), np.zeros((0, 2), dtype=int))
        with pytest.raises(StructuralError):
            snap_points([[0.0, 0.0]], net)


class TestDistance:
    def test_same_edge(self):
        net = line_net()
        assert net_distance(NetworkLocation(0, 0.2), NetworkLocation(0, 0.5), net) == pytest.approx(0.3)

    def test_identity(self):
        net = grid_network(4, 0.3)
        s = NetworkLocation(5, 0.1)
        assert net_distance(s, s, net) == 0.0

    def test_disconnected_is_infinite(self):
        net = line_net()
        assert net_distance(NetworkLocation(0, 0.5), NetworkLocation(1, 0.5), net) == math.inf

    def test_invalid_edge(self):
        net = line_net()
        with pytest.raises(StructuralError):
            net_distance(NetworkLocation(9, 0.0), NetworkLocation(0, 0.0), net)
        with pytest.raises(StructuralError):
            net_distance(NetworkLocation(0, 1.5), NetworkLocation(0, 0.0), net)

    def test_grid_route(self):
        net = grid_network(3, 1.0)
        # horizontal edge 0 joins nodes 0-1; vertical edge 6 joins nodes 0-3
        d = net_distance(NetworkLocation(0, 0.5), NetworkLocation(6, 0.25), net)
        assert d == pytest.approx(0.75)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_floyd_warshall_on_six_nodes(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(6, 9, rng, curvature=0.5)
        D = floyd_warshall(net.n_nodes, net.edges, net.lengths)
        for _ in range(20):
            e1, e2 = rng.integers(net.n_edges, size=2)
            o1, o2 = rng.uniform() * net.lengths[e1], rng.uniform() * net.lengths[e2]
            got = net_distance(NetworkLocation(e1, o1), NetworkLocation(e2, o2), net)
            want = four_route_distance(net, D, e1, o1, e2, o2)
            assert got == want or abs(got - want) <= 1e-12

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(3)
        net = random_network(12, 20, rng)
        e = rng.integers(net.n_edges, size=15)
        o = rng.uniform(size=15) * net.lengths[e]
        M = location_distances(net, e, o, e, o)
        for i in range(15):
            for j in range(15):
                d = net_distance(NetworkLocation(e[i], o[i]), NetworkLocation(e[j], o[j]), net)
                assert M[i, j] == d


class TestDistanceIndex:
    def test_cached_rows_equal_fresh_runs(self):
        net = random_network(20, 35, 1)
        idx = DistanceIndex(net, max_cached=3)
        for n in [0, 5, 0, 7, 9, 5, 0]:
            np.testing.assert_array_equal(idx.node_distances(n), net.shortest_paths([n])[0])
        assert len(idx) <= 3

    def test_symmetric(self):
        net = random_network(15, 25, 2)
        idx = DistanceIndex(net)
        D = idx.rows(np.arange(net.n_nodes))
        np.testing.assert_allclose(D, D.T, rtol=0, atol=1e-12)

    def test_cache_transparency_bit_identical(self):
        rng = np.random.default_rng(4)
        net = random_network(25, 40, rng)
        e = rng.integers(net.n_edges, size=30)
        o = rng.uniform(size=30) * net.lengths[e]
        idx = DistanceIndex(net)
        a = location_distances(net, e, o, e, o, idx)
        b = location_distances(net, e, o, e, o, idx)     # warm cache
        c = location_distances(net, e, o, e, o, DistanceIndex(net, max_cached=1))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_radius_cutoff(self):
        net = grid_network(5, 1.0)
        idx = DistanceIndex(net, r_max_km=1.5)
        row = idx.node_distances(0)
        assert np.isinf(row[np.isinf(row)]).all()
        assert row.max() == np.inf and np.nanmax(row[np.isfinite(row)]) <= 1.5


@st.composite
def net_and_points(draw, k=3):
    seed = draw(st.integers(0, 10_000))
    n_nodes = draw(st.integers(2, 12))
    n_edges = draw(st.integers(1, 20))
    rng = np.random.default_rng(seed)
    net = random_network(n_nodes, n_edges, rng, curvature=draw(st.sampled_from([0.0, 0.3])))
    e = rng.integers(net.n_edges, size=k)
    o = rng.uniform(size=k) * net.lengths[e]
    return net, [NetworkLocation(int(a), float(b)) for a, b in zip(e, o)]


class TestMetricProperties:
    @settings(max_examples=60, deadline=None)
    @given(net_and_points())
    def test_pseudometric(self, data):
        net, (a, b, c) = data
        dab, dba = net_distance(a, b, net), net_distance(b, a, net)
        assert dab >= 0 and net_distance(a, a, net) == 0
        assert dab == pytest.approx(dba, abs=1e-12) or (dab == dba == math.inf)
        dac, dcb = net_distance(a, c, net), net_distance(c, b, net)
        if math.isfinite(dac) and math.isfinite(dcb):
            assert dab <= dac + dcb + 1e-9

    @settings(max_examples=60, deadline=None)
    @given(net_and_points(k=2))
    def test_not_shorter_than_straight_line(self, data):
        net, (a, b) = data
        pa = net.location_xy([a.edge_id], [a.offset_km])[0]
        pb = net.location_xy([b.edge_id], [b.offset_km])[0]
        assert net_distance(a, b, net) >= np.hypot(*(pa - pb)) - 1e-9


class TestZoneLength:
    def test_single_zone(self):
        net = StreetNetwork([[0, 0], [1, 0], [3, 0], [6, 0]], [[0, 1], [1, 2], [2, 3]])
        np.testing.assert_allclose(zone_street_length(net, np.ones((3, 1))), [6.0])

    def test_split_edge(self):
        net = StreetNetwork([[0, 0], [2, 0]], [[0, 1]])
        np.testing.assert_allclose(zone_street_length(net, [[0.4, 0.6]]), [0.8, 1.2])

    def test_conservation(self):
        net = grid_network(10, 0.3)
        frac = np.random.default_rng(0).dirichlet(np.ones(7), size=net.n_edges)
        assert zone_street_length(net, frac).sum() == pytest.approx(net.total_length, rel=1e-9)

    def test_missing_labels(self):
        net = grid_network(3, 1.0)
        frac = np.zeros((net.n_edges, 7))
        with pytest.raises(StructuralError):
            zone_street_length(net, frac)
        with pytest.raises(StructuralError):
            zone_street_length(net, np.ones((2, 1)))


class TestNetworkValidation:
    def test_invariants(self):
        net = grid_network(4, 0.5)
        for e, (u, v) in enumerate(net.edges):
            assert (e, v) in net.adjacency[u] and (e, u) in net.adjacency[v]
        assert np.all(net.lengths > 0)

    def test_bad_length(self):
        with pytest.raises(StructuralError):
            StreetNetwork([[0, 0], [1, 0]], [[0, 1]], lengths=[0.0])

    def test_bad_endpoint(self):
        with pytest.raises(StructuralError):
            StreetNetwork([[0, 0], [1, 0]], [[0, 2]])

    def test_length_disagreement_logged(self, caplog):
        StreetNetwork([[0, 0], [1, 0]], [[0, 1]], lengths=[1.5])
        assert "disagree" in caplog.text

    def test_csv_and_file_round_trip(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("node_id,lon,lat\n1,-0.37,39.48\n0,-0.38,39.47\n2,-0.36,39.47\n")
        (tmp_path / "edges.csv").write_text("edge_id,u,v,length_km\n0,0,1,\n1,1,2,1.9\n")
        net = read_network_csv(tmp_path / "nodes.csv", tmp_path / "edges.csv")
        assert (net.n_nodes, net.n_edges) == (3, 2)
        assert net.lengths[1] == 1.9
        planar = np.hypot(*(net.node_xy[1] - net.node_xy[0]))
        assert net.lengths[0] == pytest.approx(planar)
        save_network(net, tmp_path / "net.bin")
        back = load_network(tmp_path / "net.bin")
        np.testing.assert_array_equal(back.node_xy, net.node_xy)
        np.testing.assert_array_equal(back.lengths, net.lengths)
        np.testing.assert_array_equal(back.edges, net.edges)

    def test_sparse_ids_rejected(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("node_id,lon,lat\n0,0,0\n2,0.01,0\n")
        (tmp_path / "edges.csv").write_text("edge_id,u,v\n0,0,1\n")
        with pytest.raises(StructuralError):
            read_network_csv(tmp_path / "nodes.csv", tmp_path / "edges.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "net.bin").write_text("something else\n{}")
        with pytest.raises(StructuralError):
            load_network(tmp_path / "net.bin")
