"""Exact simulation by thinning, and time-rescaling residual checks.

The total rate summed over marks and integrated over space is

    B + sum_m sum_j alpha[m, m_j] beta exp(-beta (t - t_j)) Z_j[l(m)],

with ``B = sum_m mu_m |S_l(m)|`` and ``Z_j`` the kernel mass of event ``j``
per zone (one in the "full" mass mode).  Between events this rate only
decays, so its current value bounds the future rate until the next accepted
event.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc, ndtr, ndtri
from scipy.stats import kstest

from .errors import InternalError, SupercriticalError
from .intensity import mass_entries, zone_masses
from .network import DistanceIndex, zone_street_length
from .zoning import EventSet

_NEGLIGIBLE = 40.0      # beta * age beyond which an event's excitation is dropped


def branching_matrix(state, net=None, zone_fractions=None, idx=None, n_probe=200, rng=0):
    """Expected offspring of mark ``m`` per event of mark ``m'``.

    In the network mass mode the zone masses depend on location; the largest
    mass seen over a set of probe locations is used, which makes the check
    conservative.
    """
    if state.mass_mode == "full":
        return state.alpha.copy()
    rng = np.random.default_rng(rng)
    E = net.n_edges
    edges = np.arange(E) if E <= n_probe else rng.choice(E, n_probe, replace=False)
    ent = mass_entries(net, edges, net.lengths[edges] / 2, idx)
    Z = zone_masses(ent, np.asarray(zone_fractions, dtype=float), state.sigma)
    zmax = Z.max(axis=0)
    mz = state.marks.landmark_of(np.arange(state.marks.n_marks)) - 1
    return state.alpha * zmax[mz][:, None]


def spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def check_subcritical(state, net=None, zone_fractions=None, idx=None):
    rho = spectral_radius(branching_matrix(state, net, zone_fractions, idx))
    if not rho < 1.0:
        raise SupercriticalError(f"branching spectral radius {rho:.4f} >= 1")
    return rho


class _Placer:
    """Samples event locations on the network."""

    def __init__(self, net, zone_fractions, sigma, idx, rng):
        self.net, self.W, self.sigma, self.idx, self.rng = net, zone_fractions, sigma, idx, rng
        self.bg_cum = np.cumsum(zone_fractions * net.lengths[:, None], axis=0)
        self.comp = net.components()

    def background(self, zone):
        cum = self.bg_cum[:, zone]
        e = int(np.searchsorted(cum, self.rng.uniform(0, cum[-1]), side="right"))
        e = min(e, len(cum) - 1)
        return e, float(self.rng.uniform(0, self.net.lengths[e]))

    def offspring(self, ent, zone):
        """Draw a position with density proportional to zone share times the Gaussian of distance."""
        s = math.sqrt(2) * self.sigma
        ma = erfc(ent.lo_a / s) - erfc(ent.hi_a / s)
        mb = erfc(ent.lo_b / s) - erfc(ent.hi_b / s)
        w = self.W[ent.edge, zone] * (ma + mb)
        tot = w.sum()
        if not tot > 0:
            return None
        k = int(np.searchsorted(np.cumsum(w), self.rng.uniform(0, tot), side="right"))
        k = min(k, len(w) - 1)
        piece_a = self.rng.uniform(0, ma[k] + mb[k]) < ma[k]
        lo, hi = (ent.lo_a[k], ent.hi_a[k]) if piece_a else (ent.lo_b[k], ent.hi_b[k])
        # truncated half-normal on [lo, hi] through survival probabilities
        p_lo, p_hi = ndtr(-lo / self.sigma), ndtr(-hi / self.sigma)
        y = -self.sigma * ndtri(self.rng.uniform(p_hi, p_lo)) if p_lo > p_hi else lo
        y = min(max(y, lo), hi)
        e = int(ent.edge[k])
        L = self.net.lengths[e]
        if k == 0:                      # own edge comes first in each source's entries
            o = ent.hi_a[0]             # the source offset
            x = o - y if piece_a else o + y
        else:
            x = (y - ent.lo_a[k]) if piece_a else L - (y - ent.lo_b[k])
        return e, float(min(max(x, 0.0), L))

    def nearest_in_zone(self, edge, offset, zone):
        """Fallback when the kernel has no mass on the zone: closest zone edge in the component."""
        from .network import node_distances_from
        dn = node_distances_from(self.net, edge, offset, self.idx)
        u, v = self.net.edges[:, 0], self.net.edges[:, 1]
        d = np.minimum(dn[u], dn[v])
        d[self.W[:, zone] <= 0] = np.inf
        e = int(np.argmin(d))
        if not np.isfinite(d[e]):
            return None
        return e, 0.0 if dn[u[e]] <= dn[v[e]] else float(self.net.lengths[e])


def simulate(state, net, zone_fractions, T, seed=None, idx=None, max_events=10_000_000,
             check=True):
    """Simulate events on ``[0, T]`` by thinning.

    Parameters
    ----------
    state : HawkesState
    zone_fractions : (n_edges, n_zones) array
    seed : int or Generator

    Returns
    -------
    EventSet
        Sorted events with planar positions and ``parent`` tags (-1 for
        background events).
    """
    rng = np.random.default_rng(seed)
    W = np.asarray(zone_fractions, dtype=float)
    idx = idx if idx is not None else DistanceIndex(net)
    marks = state.marks
    nm = marks.n_marks
    mz = marks.landmark_of(np.arange(nm)) - 1
    if check:
        check_subcritical(state, net, W, idx)
    zl = zone_street_length(net, W)
    Bm = state.mu * zl[mz]
    B = float(Bm.sum())
    beta = state.beta
    placer = _Placer(net, W, state.sigma, idx, rng)

    t_ev, m_ev, e_ev, o_ev, par = [], [], [], [], []
    # per event: alpha[:, m_j] * Z_j[l(m)], the expected offspring per mark
    contrib = np.empty((1024, nm))
    t_arr = np.empty(1024)
    entries = []
    exc = np.zeros(nm)      # current excitation per mark
    t = 0.0
    first_active = 0
    while True:
        bound = B + float(exc.sum())
        if bound <= 0:
            break
        w = rng.exponential(1.0 / bound)
        t_new = t + w
        if t_new > T:
            break
        exc *= math.exp(-beta * w)
        t = t_new
        rate = B + float(exc.sum())
        if rate > bound * (1 + 1e-12):
            raise InternalError(f"thinning bound violated at t={t}: {rate} > {bound}")
        if rng.uniform() * bound > rate:
            continue
        per_mark = Bm + exc
        m = int(np.searchsorted(np.cumsum(per_mark), rng.uniform(0, per_mark.sum()), side="right"))
        m = min(m, nm - 1)
        zone = int(mz[m])
        parent = -1
        if rng.uniform(0, per_mark[m]) >= Bm[m]:
            n_done = len(t_ev)
            while first_active < n_done and beta * (t - t_ev[first_active]) > _NEGLIGIBLE:
                first_active += 1
            if n_done > first_active:
                cw = np.exp(-beta * (t - t_arr[first_active:n_done])) * contrib[first_active:n_done, m]
                cum = np.cumsum(cw)
                if cum[-1] > 0:
                    k = int(np.searchsorted(cum, rng.uniform(0, cum[-1]), side="right"))
                    parent = first_active + min(k, len(cw) - 1)
        loc = None
        if parent >= 0:
            loc = placer.offspring(entries[parent], zone)
            if loc is None:
                loc = placer.nearest_in_zone(e_ev[parent], o_ev[parent], zone)
        if loc is None:
            parent = -1
            loc = placer.background(zone)
        e, o = loc
        ent = mass_entries(net, [e], [o], idx)
        Z = zone_masses(ent, W, state.sigma) if state.mass_mode == "network" else np.ones((1, W.shape[1]))
        c = state.alpha[:, m] * Z[0, mz]
        n_done = len(t_ev)
        if n_done == len(t_arr):
            t_arr = np.concatenate([t_arr, np.empty(n_done)])
            contrib = np.vstack([contrib, np.empty((n_done, nm))])
        t_arr[n_done] = t
        contrib[n_done] = c
        t_ev.append(t)
        m_ev.append(m)
        e_ev.append(e)
        o_ev.append(o)
        par.append(parent)
        entries.append(ent)
        exc += beta * c
        if len(t_ev) >= max_events:
            raise InternalError(f"more than {max_events} events simulated")
        # entries of long-inactive events are no longer needed
        if first_active > 0 and entries[first_active - 1] is not None:
            for j in range(max(0, first_active - 64), first_active):
                entries[j] = None
    m_arr = np.asarray(m_ev, dtype=np.int64)
    c, l = marks.unmake_mark(m_arr) if len(m_arr) else (np.zeros(0, np.int64), np.zeros(0, np.int64))
    ev = EventSet(np.asarray(t_ev, dtype=float), np.asarray(e_ev, dtype=np.int64),
                  np.asarray(o_ev, dtype=float), c, l, marks, parent=np.asarray(par, dtype=np.int64))
    return ev.with_locations(net)


def rescaled_times(events, state, net=None, zone_fractions=None, idx=None):
    """Compensator of the total (all-mark) process at each event time."""
    nm = state.marks.n_marks
    mz = state.marks.landmark_of(np.arange(nm)) - 1
    W = np.asarray(zone_fractions, dtype=float)
    zl = zone_street_length(net, W)
    B = float(state.mu @ zl[mz])
    if state.mass_mode == "network" and len(events):
        ent = mass_entries(net, events.edge, events.offset, idx)
        Z = zone_masses(ent, W, state.sigma)
        S = np.einsum("jm,mj->j", Z[:, mz], state.alpha[:, events.mark])
    else:
        S = state.alpha.sum(axis=0)[events.mark]
    beta = state.beta
    tau = np.empty(len(events))
    R, cum, prev = 0.0, 0.0, 0.0
    for i, ti in enumerate(events.t):
        if i:
            R = math.exp(-beta * (ti - prev)) * (R + S[i - 1])
            cum += S[i - 1]
        tau[i] = B * ti + cum - R
        prev = ti
    return tau


def time_rescaling_check(events, state, net=None, zone_fractions=None, T=None, idx=None):
    """KS test of rescaled inter-event gaps against the unit exponential.

    Returns ``(statistic, p_value)``.
    """
    tau = rescaled_times(events, state, net, zone_fractions, idx)
    gaps = np.diff(np.concatenate([[0.0], tau]))
    res = kstest(gaps, "expon")
    return float(res.statistic), float(res.pvalue)
