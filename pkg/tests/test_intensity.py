import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from netpp.errors import DomainError, NumericError, StructuralError
from netpp.intensity import (EtasState, HawkesState, PreparedSequence, compensator_total,
                             distance_cutoff, estimate_base_rates, etas_intensity, etas_kernel,
                             etas_loglik, gaussian_density, hawkes_loglik, intensity,
                             mark_compensator, mass_entries, sequence_masses,
                             source_zone_masses, spatial_kernel, temporal_kernel, zone_masses)
from netpp.network import DistanceIndex, NetworkLocation, StreetNetwork
from netpp.synthetic import random_network, random_zones
from netpp.zoning import EventSet, make_mark

from conftest import random_events
from oracles import central_difference, edge_kernel_mass, etas_spatial_integral, floyd_warshall, naive_loglik


def random_state(rng, mass_mode="full", eps=0.0, scale=0.05):
    rng = np.random.default_rng(rng)
    return HawkesState(rng.uniform(0.001, 0.02, 21), rng.uniform(0, scale, (21, 21)),
                       rng.uniform(0.3, 2.0), rng.uniform(0.15, 0.6), mass_mode, eps)


def instance(seed, n=30, n_hist=8, T=20.0, fractional=True):
    rng = np.random.default_rng(seed)
    net = random_network(8, 13, rng, connected=True, curvature=0.3)
    zones = random_zones(net.n_edges, 7, rng, fractional=fractional)
    ev = random_events(net, n, T, rng)
    hist = random_events(net, n_hist, -0.01, rng, t_low=-15.0) if n_hist else None
    return net, zones, ev, hist, T


class TestTemporalKernel:
    def test_value(self):
        assert temporal_kernel(0.0, 1.0, 2.0) == pytest.approx(2 * math.exp(-2), rel=1e-15)
        assert temporal_kernel(0.0, 1.0, 2.0) == pytest.approx(0.27067, abs=1e-5)

    def test_unit_mass(self):
        val, _ = integrate.quad(lambda t: temporal_kernel(0.0, t, 0.7), 0, np.inf, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-8)

    def test_small_lag(self):
        assert temporal_kernel(0.0, 1e-12, 3.0) == pytest.approx(3.0, rel=1e-10)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            temporal_kernel(0.0, t, 1.0)


class TestSpatialKernel:
    def test_peak(self):
        assert gaussian_density(0.0, 0.4) == pytest.approx(1 / (2 * math.pi * 0.16), rel=1e-15)

    def test_value(self):
        assert gaussian_density(0.3, 0.3) == pytest.approx(math.exp(-0.5) / (2 * math.pi * 0.09), rel=1e-15)
        assert gaussian_density(0.3, 0.3) == pytest.approx(1.0726, abs=1e-4)

    def test_on_network(self):
        net = StreetNetwork([[0, 0], [1, 0], [5, 5], [6, 5]], [[0, 1], [2, 3]])
        a, b = NetworkLocation(0, 0.2), NetworkLocation(0, 0.5)
        assert spatial_kernel(a, b, 0.3, net) == pytest.approx(gaussian_density(0.3, 0.3))
        assert spatial_kernel(a, NetworkLocation(1, 0.5), 0.3, net) == 0.0
        assert spatial_kernel(a, b, 0.3, net, cutoff_km=0.1) == 0.0

    def test_cutoff(self):
        d = distance_cutoff(0.3, 1e-8)
        assert gaussian_density(d, 0.3) == pytest.approx(1e-8 * gaussian_density(0, 0.3))
        assert distance_cutoff(0.3, 0.0) == math.inf


class TestIntensity:
    def setup_method(self):
        self.net = StreetNetwork([[0, 0], [1, 0], [2, 0]], [[0, 1], [1, 2]])
        self.s = NetworkLocation(0, 0.5)
        self.mu = np.full(21, 0.01)

    def test_empty_history(self):
        st_ = HawkesState(self.mu, np.full((21, 21), 0.3), 1.0, 0.3)
        assert intensity(5.0, self.s, 4, EventSet.empty(), st_, self.net) == 0.01

    def test_single_source(self):
        alpha = np.zeros((21, 21))
        alpha[4, 9] = 0.5
        c, l = 2, 3                                      # mark 9
        h = EventSet([1.0], [0], [0.5], [c], [l])
        st_ = HawkesState(self.mu, alpha, 1.0, 0.3, eps=0.0)
        val = intensity(1.0 + 1e-12, self.s, 4, h, st_, self.net)
        assert val - 0.01 == pytest.approx(0.8842, abs=1e-4)
        assert val - 0.01 == pytest.approx(0.5 / (2 * math.pi * 0.09), rel=1e-10)

    def test_superposition(self):
        rng = np.random.default_rng(0)
        st_ = random_state(rng, eps=0.0)
        h1 = random_events(self.net, 6, 4.0, 1)
        h2 = random_events(self.net, 5, 4.0, 2)
        both = EventSet.concat([h1, h2])
        s, m = NetworkLocation(1, 0.3), 11
        mu = st_.mu[m]
        lhs = intensity(4.5, s, m, both, st_, self.net)
        rhs = mu + (intensity(4.5, s, m, h1, st_, self.net) - mu) + (intensity(4.5, s, m, h2, st_, self.net) - mu)
        assert lhs == pytest.approx(rhs, rel=1e-13)

    def test_ignores_future_events(self):
        st_ = random_state(0, eps=0.0)
        h = random_events(self.net, 10, 10.0, 4)
        early = h.subset(h.t < 5.0)
        assert intensity(5.0, self.s, 3, h, st_, self.net) == intensity(5.0, self.s, 3, early, st_, self.net)

    def test_unsorted_history(self):
        st_ = random_state(0)
        h = EventSet([2.0, 1.0], [0, 0], [0.1, 0.1], [1, 1], [1, 1])
        with pytest.raises(StructuralError):
            intensity(3.0, self.s, 0, h, st_, self.net)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 12.0), st.integers(0, 20))
    def test_at_least_mu(self, seed, t, m):
        st_ = random_state(seed, eps=1e-8)
        h = random_events(self.net, 12, 10.0, seed)
        s = NetworkLocation(1, 0.7)
        assert intensity(t, s, m, h, st_, self.net) >= st_.mu[m] >= 0


class TestBaseRates:
    def events_of(self, mark, n):
        c, l = (mark // 7) + 1, (mark % 7) + 1
        return EventSet(np.linspace(0, 1, n), np.zeros(n, int), np.zeros(n), np.full(n, c), np.full(n, l))

    def test_value(self):
        zl = np.full(7, 20.0)
        mu = estimate_base_rates(self.events_of(make_mark(1, 1), 40), zl, 100.0)
        assert mu[0] == pytest.approx(0.02)
        assert np.all(mu[1:] == 0)

    def test_doubling_T(self):
        ev, zl = self.events_of(3, 10), np.arange(1.0, 8.0)
        np.testing.assert_allclose(estimate_base_rates(ev, zl, 200.0) * 2, estimate_base_rates(ev, zl, 100.0))

    def test_zero_zone(self):
        zl = np.ones(7)
        zl[0] = 0.0
        assert estimate_base_rates(self.events_of(1, 3), zl, 1.0)[0] == 0.0
        with pytest.raises(StructuralError):
            estimate_base_rates(self.events_of(0, 3), zl, 1.0)
        with pytest.raises(DomainError):
            estimate_base_rates(self.events_of(1, 3), np.ones(7), 0.0)


def one_edge_seq(mu0, lengths, T, ev):
    xy = [[0, 0], [lengths[0], 0]] + ([[0, 5], [lengths[1], 5]] if len(lengths) > 1 else [])
    edges = [[0, 1]] + ([[2, 3]] if len(lengths) > 1 else [])
    net = StreetNetwork(xy, edges)
    zones = np.zeros((len(lengths), 7))
    for e in range(len(lengths)):
        zones[e, e] = 1.0
    mu = np.zeros(21)
    mu[: len(lengths)] = mu0
    return PreparedSequence(ev, T, net, zones), HawkesState(mu, np.zeros((21, 21)), 1.0, 0.3)


class TestLogLikelihood:
    def test_poisson_closed_form(self):
        ev = EventSet([3.0], [0], [1.0], [1], [1])
        seq, st_ = one_edge_seq(0.1, [2.0], 10.0, ev)
        L, _ = hawkes_loglik(seq, st_)
        assert L == pytest.approx(math.log(0.1) - 0.1 * 10 * 2, rel=1e-14)
        assert L == pytest.approx(-4.3026, abs=1e-4)

    def test_extra_empty_zone(self):
        ev = EventSet([3.0], [0], [1.0], [1], [1])
        seq1, st1 = one_edge_seq(0.1, [2.0], 10.0, ev)
        seq2, st2 = one_edge_seq(0.1, [2.0, 2.0], 10.0, ev)
        L1, _ = hawkes_loglik(seq1, st1)
        L2, _ = hawkes_loglik(seq2, st2)
        assert L1 - L2 == pytest.approx(0.1 * 10 * 2, rel=1e-13)

    def test_zero_intensity(self):
        ev = EventSet([3.0, 4.0], [0, 0], [1.0, 1.0], [1, 2], [1, 1])
        seq, st_ = one_edge_seq(0.1, [2.0], 10.0, ev)
        with pytest.raises(NumericError, match="event 1"):
            hawkes_loglik(seq, st_)

    @pytest.mark.parametrize("mode", ["full", "network"])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_direct_sum(self, mode, seed):
        net, zones, ev, hist, T = instance(seed)
        st_ = random_state(seed, mode, eps=0.0)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        L, _ = hawkes_loglik(seq, st_, need_grad=False)
        want = naive_loglik(ev, hist, st_.mu, st_.alpha, st_.beta, st_.sigma, net, zones, T, mode)
        assert L == pytest.approx(want, rel=1e-8, abs=1e-8)

    def test_disconnected_network(self):
        rng = np.random.default_rng(7)
        net = StreetNetwork([[0, 0], [1, 0], [1, 1], [5, 5], [6, 5]], [[0, 1], [1, 2], [3, 4]])
        zones = random_zones(net.n_edges, 7, rng, fractional=True)
        ev = random_events(net, 20, 10.0, rng)
        st_ = random_state(rng, "network", eps=0.0, scale=0.2)
        L, _ = hawkes_loglik(PreparedSequence(ev, 10.0, net, zones), st_, need_grad=False)
        want = naive_loglik(ev, None, st_.mu, st_.alpha, st_.beta, st_.sigma, net, zones, 10.0, "network")
        assert L == pytest.approx(want, rel=1e-8)

    def test_log_term_matches_pointwise_intensity(self):
        net, zones, ev, hist, T = instance(11)
        st_ = random_state(11, "network", eps=0.0)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        L, _ = hawkes_loglik(seq, st_, need_grad=False)
        src = EventSet.concat([hist, ev])
        log_term = sum(math.log(intensity(ev.t[i], NetworkLocation(ev.edge[i], ev.offset[i]), ev.mark[i],
                                          src, st_, net)) for i in range(len(ev)))
        assert log_term - L == pytest.approx(compensator_total(seq, st_), rel=1e-10)

    @pytest.mark.parametrize("mode", ["full", "network"])
    def test_truncation(self, mode):
        net, zones, ev, hist, T = instance(5, n=60)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        exact = random_state(5, mode, eps=0.0)
        L0, _ = hawkes_loglik(seq, exact, need_grad=False)
        L0b, _ = hawkes_loglik(seq, exact, need_grad=False)
        assert L0 == L0b
        L1, _ = hawkes_loglik(seq, exact.replace(eps=1e-8), need_grad=False)
        assert abs(L1 - L0) <= 1e-6 * abs(L0)

    @pytest.mark.parametrize("mode", ["full", "network"])
    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, mode, seed):
        net, zones, ev, hist, T = instance(100 + seed, n=25)
        st_ = random_state(seed, mode, eps=0.0, scale=0.1)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        _, g = hawkes_loglik(seq, st_)

        def f_alpha(a):
            return hawkes_loglik(seq, st_.replace(alpha=a), False)[0]

        def f_lb(x):
            return hawkes_loglik(seq, st_.replace(beta=math.exp(x[0])), False)[0]

        def f_ls(x):
            return hawkes_loglik(seq, st_.replace(sigma=math.exp(x[0])), False)[0]

        checks = [(g["alpha"], central_difference(f_alpha, st_.alpha, 1e-6)),
                  (g["log_beta"], central_difference(f_lb, [math.log(st_.beta)])[0]),
                  (g["log_sigma"], central_difference(f_ls, [math.log(st_.sigma)])[0])]
        for got, num in checks:
            err = np.max(np.abs(np.asarray(got) - num)) / max(np.max(np.abs(num)), 1e-12)
            assert err < 1e-5

    def test_history_bounds(self):
        net, zones, ev, hist, T = instance(1)
        with pytest.raises(StructuralError):
            PreparedSequence(ev, T, net, zones, history=ev)
        with pytest.raises(StructuralError):
            PreparedSequence(ev, T / 2, net, zones)

    def test_pair_limits_drop_terms(self):
        net, zones, ev, hist, T = instance(2)
        full = PreparedSequence(ev, T, net, zones, history=hist)
        cut = PreparedSequence(ev, T, net, zones, history=hist, r_max_km=0.3, max_dt=2.0)
        assert cut.n_pairs < full.n_pairs
        assert np.all(cut.pair_d2 <= 0.09 + 1e-12) and np.all(cut.pair_dt <= 2.0)


class TestNetworkMass:
    @pytest.mark.parametrize("seed", range(4))
    def test_edge_mass_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(7, 12, rng, curvature=0.4)
        D = floyd_warshall(net.n_nodes, net.edges, net.lengths)
        e = rng.integers(net.n_edges, size=4)
        o = rng.uniform(size=4) * net.lengths[e]
        sigma = rng.uniform(0.1, 0.8)
        ent = mass_entries(net, e, o)
        eye = np.eye(net.n_edges)
        Z = zone_masses(ent, eye, sigma)
        for j in range(4):
            for edge in range(net.n_edges):
                want = edge_kernel_mass(net, D, e[j], o[j], edge, sigma)
                assert Z[j, edge] == pytest.approx(want, rel=1e-8, abs=1e-12)

    def test_long_straight_street_limit(self):
        # a single long edge carries 1 / (sqrt(2 pi) sigma) of the planar density
        net = StreetNetwork([[0, 0], [40, 0]], [[0, 1]])
        Z = source_zone_masses(EventSet([0.0], [0], [20.0], [1], [1]), 0.5, "network", net, np.ones((1, 1)))
        assert Z[0, 0] == pytest.approx(1 / (math.sqrt(2 * math.pi) * 0.5), rel=1e-12)

    def test_log_sigma_derivative(self):
        rng = np.random.default_rng(3)
        net = random_network(9, 15, rng)
        zones = random_zones(net.n_edges, 7, rng, fractional=True)
        e = rng.integers(net.n_edges, size=6)
        ent = mass_entries(net, e, rng.uniform(size=6) * net.lengths[e])
        _, dZ = zone_masses(ent, zones, 0.4, need_grad=True)
        num = (zone_masses(ent, zones, 0.4 * math.exp(1e-6)) - zone_masses(ent, zones, 0.4 * math.exp(-1e-6))) / 2e-6
        np.testing.assert_allclose(dZ, num, rtol=1e-6, atol=1e-9)

    def test_full_mode_ones(self):
        ev = EventSet([0.0, 1.0], [0, 0], [0.0, 0.1], [1, 1], [1, 1])
        assert np.all(source_zone_masses(ev, 0.3, "full", n_zones=7) == 1.0)

    def test_full_mass_branching(self):
        # one source, long horizon: its expected offspring per mark is the alpha column
        net, zones, _, _, _ = instance(0)
        src = EventSet([0.0], [0], [0.1], [2], [4])
        st_ = random_state(0)
        T = 60.0
        counts = mark_compensator(st_.replace(mu=np.zeros(21)), src.t, src.mark,
                                  np.ones((1, 7)), np.zeros(7), 0.0, T)
        f = lambda t: temporal_kernel(0.0, t, st_.beta)
        time_mass, _ = integrate.quad(f, 0.0, T, epsabs=1e-13)
        np.testing.assert_allclose(counts, st_.alpha[:, src.mark[0]] * time_mass, rtol=1e-9)
        assert time_mass == pytest.approx(1.0, abs=1e-9)

    def test_mark_compensator_sums_to_total(self):
        net, zones, ev, hist, T = instance(3)
        st_ = random_state(3, "network", eps=0.0)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        Z = sequence_masses(seq, st_)
        a = mark_compensator(st_, seq.src_t, seq.src_mark, Z, seq.zone_len, 0.0, T / 2)
        b = mark_compensator(st_, seq.src_t, seq.src_mark, Z, seq.zone_len, T / 2, T)
        assert a.sum() + b.sum() == pytest.approx(compensator_total(seq, st_), rel=1e-12)
        with pytest.raises(DomainError):
            mark_compensator(st_, seq.src_t, seq.src_mark, Z, seq.zone_len, 2.0, 1.0)


class TestEtas:
    def test_kernel_value(self):
        assert etas_kernel(1.0, 0.0, 0.0, 1.3, 0.0, 1.0, 1.0) == pytest.approx(1.3 / (2 * math.pi))

    @pytest.mark.parametrize("dt,eta,beta,sx,sy", [(1.0, 1.0, 0.5, 0.3, 0.2), (0.2, 0.4, 2.0, 1.0, 0.5),
                                                   (5.0, 2.0, 0.1, 0.1, 0.1)])
    def test_spatial_integral(self, dt, eta, beta, sx, sy):
        want = etas_spatial_integral(dt, eta, beta, sx, sy)
        assert want == pytest.approx(eta * math.exp(-beta * dt), rel=1e-8)

    def test_isotropy(self):
        r = np.array([0.3, -0.2])
        for th in np.linspace(0, 2 * np.pi, 7):
            R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
            rr = R @ r
            assert etas_kernel(0.7, rr[0], rr[1], 1.0, 0.4, 0.5, 0.5) == pytest.approx(
                etas_kernel(0.7, r[0], r[1], 1.0, 0.4, 0.5, 0.5), rel=1e-13)

    def test_zero_lag(self):
        with pytest.raises(DomainError):
            etas_kernel(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0)

    def state(self, seed):
        rng = np.random.default_rng(seed)
        return EtasState(rng.uniform(0.001, 0.02, 21), rng.uniform(0, 0.1, (21, 21)),
                         rng.uniform(0.3, 2.0), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5))

    def test_loglik_matches_direct(self):
        net, zones, ev, hist, T = instance(4)
        st_ = self.state(4)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        L, _ = etas_loglik(seq, st_, need_grad=False)
        src = EventSet.concat([hist, ev])
        log_term = sum(math.log(etas_intensity(ev.t[i], (ev.x[i], ev.y[i]), ev.mark[i], src, st_))
                       for i in range(len(ev)))
        comp = T * sum(st_.mu[m] * seq.zone_len[m % 7] for m in range(21))
        for j in range(len(src)):
            total_eta = st_.eta[:, src.mark[j]].sum()
            lo, hi = max(0.0, -src.t[j]), T - src.t[j]
            val, _ = integrate.quad(lambda u: total_eta * math.exp(-st_.beta * u), lo, hi, epsabs=1e-13)
            comp += val
        assert L == pytest.approx(log_term - comp, rel=1e-9)

    def test_gradient(self):
        net, zones, ev, hist, T = instance(6, n=25)
        st_ = self.state(6)
        seq = PreparedSequence(ev, T, net, zones, history=hist)
        _, g = etas_loglik(seq, st_)
        f = lambda **kw: etas_loglik(seq, EtasState(**{**dict(mu=st_.mu, eta=st_.eta, beta=st_.beta,
                                                              sigma_x=st_.sigma_x, sigma_y=st_.sigma_y), **kw}),
                                     False)[0]
        checks = [(g["eta"], central_difference(lambda e: f(eta=e), st_.eta, 1e-6)),
                  (g["log_beta"], central_difference(lambda x: f(beta=math.exp(x[0])), [math.log(st_.beta)])[0]),
                  (g["log_sigma_x"], central_difference(lambda x: f(sigma_x=math.exp(x[0])), [math.log(st_.sigma_x)])[0]),
                  (g["log_sigma_y"], central_difference(lambda x: f(sigma_y=math.exp(x[0])), [math.log(st_.sigma_y)])[0])]
        for got, num in checks:
            err = np.max(np.abs(np.asarray(got) - num)) / max(np.max(np.abs(num)), 1e-12)
            assert err < 1e-5


def test_state_validation():
    with pytest.raises(StructuralError):
        HawkesState(np.zeros(20), np.zeros((21, 21)), 1.0, 1.0)
    with pytest.raises(StructuralError):
        HawkesState(np.zeros(21), np.zeros((21, 21)), 1.0, 1.0, mass_mode="grid")
    with pytest.raises(DomainError):
        HawkesState(np.zeros(21), np.zeros((21, 21)), 0.0, 1.0)
    with pytest.raises(DomainError):
        HawkesState(-np.ones(21), np.zeros((21, 21)), 1.0, 1.0)
