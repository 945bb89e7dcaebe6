"""Kernels, conditional intensity and the exact log-likelihood.

The triggering kernel is separable::

    k = alpha[m, m'] * beta exp(-beta dt) * exp(-d^2 / 2 sigma^2) / (2 pi sigma^2)

with ``d`` the network distance.  The compensator's spatial mass per source
and target zone is either taken as one ("full" mode, the kernel integrates to
alpha) or integrated exactly along the network edges ("network" mode).  On a
straight edge the distance from a fixed source is piecewise linear, so each
edge contributes a sum of error functions.

All gradients are with respect to ``alpha`` (chained further by the caller),
``log beta`` and ``log sigma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.special import erfc

from .errors import DomainError, NumericError, StructuralError
from .network import DistanceIndex, location_distances, node_distances_from
from .zoning import DEFAULT_MARKS, MarkSpace

MASS_MODES = ("full", "network")
SQRT_2PI = math.sqrt(2 * math.pi)


def temporal_kernel(t_prev, t, beta):
    dt = np.asarray(t, dtype=float) - np.asarray(t_prev, dtype=float)
    if np.any(dt <= 0):
        raise DomainError("temporal kernel needs t > t'")
    out = beta * np.exp(-beta * dt)
    return float(out) if out.ndim == 0 else out


def gaussian_density(d, sigma):
    """Planar-normalised Gaussian of a distance; zero at infinite distance."""
    d = np.asarray(d, dtype=float)
    out = np.exp(-d * d / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)
    return float(out) if out.ndim == 0 else out


def distance_cutoff(sigma, eps):
    """Distance beyond which ``g(d) < eps * g(0)``."""
    if eps <= 0:
        return math.inf
    return sigma * math.sqrt(2 * math.log(1.0 / eps))


def spatial_kernel(s_prev, s, sigma, net, idx=None, cutoff_km=None):
    from .network import net_distance
    d = net_distance(s_prev, s, net, idx)
    if not math.isfinite(d) or (cutoff_km is not None and d > cutoff_km):
        return 0.0
    return gaussian_density(d, sigma)


@dataclass
class HawkesState:
    """Everything needed to evaluate the intensity: ``mu``, ``alpha``, ``beta``, ``sigma``.

    ``alpha[m, m']`` is the influence of a source with mark ``m'`` on mark ``m``.
    ``eps`` drops kernel terms whose temporal peak or spatial factor falls
    below it (0 disables truncation).
    """

    mu: np.ndarray
    alpha: np.ndarray
    beta: float
    sigma: float
    mass_mode: str = "full"
    eps: float = 1e-8
    marks: MarkSpace = field(default_factory=lambda: DEFAULT_MARKS)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        n = self.marks.n_marks
        if self.mu.shape != (n,) or self.alpha.shape != (n, n):
            raise StructuralError(f"expected mu ({n},) and alpha ({n},{n})")
        if self.mass_mode not in MASS_MODES:
            raise StructuralError(f"unknown mass mode {self.mass_mode!r}")
        if not (self.beta > 0 and self.sigma > 0):
            raise DomainError("beta and sigma must be positive")
        if np.any(self.mu < 0) or np.any(self.alpha < 0):
            raise DomainError("mu and alpha must be non-negative")

    def replace(self, **kw):
        return replace(self, **kw)


def estimate_base_rates(events, zone_lengths, T, marks=DEFAULT_MARKS):
    """Events per km of zone street per day, per mark."""
    if T <= 0:
        raise DomainError("T must be positive")
    counts = np.bincount(events.mark, minlength=marks.n_marks).astype(float)
    zl = np.asarray(zone_lengths, dtype=float)[marks.landmark_of(np.arange(marks.n_marks)) - 1]
    if np.any((counts > 0) & (zl <= 0)):
        m = int(np.flatnonzero((counts > 0) & (zl <= 0))[0])
        raise StructuralError(f"mark {m} has events in a zone of zero street length")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zl > 0, counts / (T * zl), 0.0)


def intensity(t, s, m, history, state, net, idx=None):
    """``lambda_m(t, s)`` given the events of ``history`` strictly before ``t``."""
    history.check_sorted()
    lam = float(state.mu[m])
    before = history.t < t
    if not before.any():
        return lam
    h = history.subset(before)
    d = location_distances(net, [s.edge_id], [s.offset_km], h.edge, h.offset, idx)[0]
    dt = t - h.t
    ft = state.beta * np.exp(-state.beta * dt)
    gs = np.exp(-d * d / (2 * state.sigma ** 2))
    terms = state.alpha[m, h.mark] * ft * gs / (2 * math.pi * state.sigma ** 2)
    if state.eps > 0:
        keep = (ft / (2 * math.pi * state.sigma ** 2) >= state.eps) & (gs >= state.eps)
        terms = np.where(keep, terms, 0.0)
    return lam + float(terms.sum())


# ------------------------------------------------------------ network mass

@dataclass
class MassEntries:
    """Per (source, edge) distance pieces for the exact edge integral.

    Along an edge the distance from the source rises linearly from ``lo_a`` to
    ``hi_a`` on one part and from ``lo_b`` to ``hi_b`` on the other, so the
    Gaussian integral is a difference of complementary error functions.
    Entries are grouped by source; ``starts`` indexes the first entry of each.
    """

    src: np.ndarray
    edge: np.ndarray
    lo_a: np.ndarray
    hi_a: np.ndarray
    lo_b: np.ndarray
    hi_b: np.ndarray
    starts: np.ndarray
    n_src: int
    _reducer: tuple = field(default=None, repr=False, compare=False)

    def reducer(self, zone_fractions):
        """Sparse map from per-entry values to per (source, zone) sums, cached."""
        if self._reducer is not None and self._reducer[0] is zone_fractions:
            return self._reducer[1]
        nz = zone_fractions.shape[1]
        w = zone_fractions[self.edge]
        r, c = np.nonzero(w)
        Q = sparse.csr_matrix((w[r, c], (self.src[r] * nz + c, r)), shape=(self.n_src * nz, len(self.src)))
        self._reducer = (zone_fractions, Q)
        return Q


def mass_entries(net, edges, offsets, idx=None, r_max_km=None, chunk=256):
    edges = np.asarray(edges, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=float)
    idx = idx if idx is not None else DistanceIndex(net, r_max_km)
    eu, ev, L = net.edges[:, 0], net.edges[:, 1], net.lengths
    pieces = []
    for s in range(0, len(edges), chunk):
        e, o = edges[s:s + chunk], offsets[s:s + chunk]
        a, b = net.edges[e, 0], net.edges[e, 1]
        nodes, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
        rows = idx.rows(nodes)
        ra, rb = rows[inv[: len(e)]], rows[inv[len(e):]]
        dn = np.minimum(o[:, None] + ra, (L[e] - o)[:, None] + rb)     # (c, N)
        du, dv = dn[:, eu], dn[:, ev]                                  # (c, E)
        near = np.minimum(du, dv)
        ok = np.isfinite(near) if r_max_km is None else near <= r_max_km
        ok[np.arange(len(e)), e] = False
        si, ei = np.nonzero(ok)
        du, dv = du[si, ei], dv[si, ei]
        Le = L[ei]
        with np.errstate(invalid="ignore"):
            xs = np.clip((dv + Le - du) / 2, 0.0, Le)
        # own edge: distance |x - o| on both sides of the source
        own_s = np.arange(len(e))
        src = np.concatenate([own_s, si]) + s
        pieces.append((src, np.concatenate([e, ei]),
                       np.concatenate([np.zeros(len(e)), du]),
                       np.concatenate([o, du + xs]),
                       np.concatenate([np.zeros(len(e)), dv]),
                       np.concatenate([L[e] - o, dv + Le - xs])))
    if not pieces:
        z = np.zeros(0)
        return MassEntries(z.astype(np.int64), z.astype(np.int64), z, z, z, z, z.astype(np.int64), 0)
    cols = [np.concatenate(c) for c in zip(*pieces)]
    order = np.argsort(cols[0], kind="stable")
    cols = [c[order] for c in cols]
    starts = np.searchsorted(cols[0], np.arange(len(edges)))
    return MassEntries(*cols, starts=starts, n_src=len(edges))


def _h(y, s):
    # (2/sqrt(pi)) u exp(-u^2), u = y/s, with h(inf) = 0
    u = np.where(np.isfinite(y), y / s, 0.0)
    return (2 / math.sqrt(math.pi)) * u * np.exp(-u * u)


def zone_masses(entries, zone_fractions, sigma, eps=0.0, need_grad=False):
    """Integral of the spatial kernel over each zone, per source.

    Returns ``Z`` of shape ``(n_src, n_zones)`` and, if requested, its
    derivative with respect to ``log sigma``.
    """
    s = math.sqrt(2) * sigma
    c = 1.0 / (2 * SQRT_2PI * sigma)
    S = (erfc(entries.lo_a / s) - erfc(entries.hi_a / s)
         + erfc(entries.lo_b / s) - erfc(entries.hi_b / s))
    I = c * S
    if eps > 0:
        far = np.minimum(entries.lo_a, entries.lo_b) > distance_cutoff(sigma, eps)
        I = np.where(far, 0.0, I)
    nz = zone_fractions.shape[1]
    if entries.n_src == 0:
        Z = np.zeros((0, nz))
        return (Z, Z.copy()) if need_grad else Z
    Q = entries.reducer(zone_fractions)
    Z = (Q @ I).reshape(-1, nz)
    if not need_grad:
        return Z
    dS = (_h(entries.hi_a, s) - _h(entries.lo_a, s) + _h(entries.hi_b, s) - _h(entries.lo_b, s))
    dI = -I - c * dS
    if eps > 0:
        dI = np.where(far, 0.0, dI)
    dZ = (Q @ dI).reshape(-1, nz)
    return Z, dZ


def source_zone_masses(events, sigma, mass_mode, net=None, zone_fractions=None, idx=None,
                       r_max_km=None, eps=0.0, n_zones=None):
    """Spatial mass of each event's kernel over each zone (ones in full mode)."""
    if mass_mode == "full":
        nz = n_zones if n_zones is not None else (zone_fractions.shape[1] if zone_fractions is not None
                                                  else events.marks.n_landmark)
        return np.ones((len(events), nz))
    ent = mass_entries(net, events.edge, events.offset, idx, r_max_km)
    return zone_masses(ent, np.asarray(zone_fractions, dtype=float), sigma, eps)


# ------------------------------------------------------------ prepared data

class PreparedSequence:
    """One event sequence on ``[0, T]`` with its kernel pairs precomputed.

    Parameters
    ----------
    events : EventSet
        Scored events with times in ``[0, T]``.
    history : EventSet, optional
        Earlier events (negative times) that excite but are not scored.
    r_max_km : float, optional
        Pairs farther apart on the network are dropped (their kernel is
        treated as zero).  ``None`` keeps every connected pair.
    max_dt : float, optional
        Pairs farther apart in time are dropped.
    """

    def __init__(self, events, T, net, zone_fractions, idx=None, history=None,
                 r_max_km=None, max_dt=None, chunk=512):
        events.check_sorted()
        if len(events) and (events.t[0] < 0 or events.t[-1] > T):
            raise StructuralError("scored events must lie in [0, T]")
        if history is not None and len(history):
            history.check_sorted()
            if history.t[-1] >= 0:
                raise StructuralError("history events must precede time 0")
            src = type(events).concat([history, events])
            n_hist = len(history)
        else:
            src, n_hist = events, 0
        self.marks = events.marks
        self.T = float(T)
        self.net = net
        self.idx = idx if idx is not None else DistanceIndex(net)
        self.zone_fractions = np.asarray(zone_fractions, dtype=float)
        self.zone_len = self.zone_fractions.T @ net.lengths
        self.events = events
        self.sources = src
        self.n = len(events)
        self.n_hist = n_hist
        self.r_max_km = r_max_km
        self.max_dt = max_dt
        self.tgt_mark = events.mark
        self.src_mark = src.mark
        self.src_t = src.t
        self.mark_zone = self.marks.landmark_of(np.arange(self.marks.n_marks)) - 1
        self.src_a = np.maximum(0.0, -src.t)
        self.src_b = self.T - src.t
        self._build_pairs(chunk)
        self._mass = None
        self._planar = None

    def _build_pairs(self, chunk):
        src, n_hist = self.sources, self.n_hist
        nm = self.marks.n_marks
        tg, sg, dts, d2s = [], [], [], []
        for s in range(0, self.n, chunk):
            tgt = np.arange(s, min(self.n, s + chunk))
            tt = self.events.t[tgt]
            hi = int(np.searchsorted(src.t, tt[-1], side="left"))
            if hi == 0:
                continue
            lo = 0
            if self.max_dt is not None:
                lo = int(np.searchsorted(src.t, tt[0] - self.max_dt, side="left"))
            cand = np.arange(lo, hi)
            dt = tt[:, None] - src.t[cand][None, :]
            ok = dt > 0
            if self.max_dt is not None:
                ok &= dt <= self.max_dt
            if not ok.any():
                continue
            d = location_distances(self.net, self.events.edge[tgt], self.events.offset[tgt],
                                   src.edge[cand], src.offset[cand], self.idx)
            ok &= np.isfinite(d)
            if self.r_max_km is not None:
                ok &= d <= self.r_max_km
            ti, ci = np.nonzero(ok)
            tg.append(tgt[ti])
            sg.append(cand[ci])
            dts.append(dt[ti, ci])
            d2s.append(d[ti, ci] ** 2)
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt)) if tg else (lambda xs, dt: np.zeros(0, dt))
        self.pair_tgt = cat(tg, np.int64)
        self.pair_src = cat(sg, np.int64)
        self.pair_dt = cat(dts, float)
        self.pair_d2 = cat(d2s, float)
        self.pair_ab = self.tgt_mark[self.pair_tgt] * nm + self.src_mark[self.pair_src]
        del n_hist

    @property
    def n_pairs(self):
        return len(self.pair_tgt)

    def mass(self):
        if self._mass is None:
            self._mass = mass_entries(self.net, self.sources.edge, self.sources.offset,
                                      self.idx, self.r_max_km)
        return self._mass

    def planar_pairs(self):
        """All time-ordered pairs with planar displacement (for the diffusion baseline)."""
        if self._planar is None:
            src, ev = self.sources, self.events
            if np.any(np.isnan(src.x)):
                raise StructuralError("planar coordinates missing; call with_locations first")
            tg, sg = [], []
            for i in range(self.n):
                hi = int(np.searchsorted(src.t, ev.t[i], side="left"))
                lo = 0 if self.max_dt is None else int(np.searchsorted(src.t, ev.t[i] - self.max_dt))
                sg.append(np.arange(lo, hi))
                tg.append(np.full(hi - lo, i))
            tgt = np.concatenate(tg) if tg else np.zeros(0, np.int64)
            sr = np.concatenate(sg) if sg else np.zeros(0, np.int64)
            self._planar = {
                "tgt": tgt, "src": sr,
                "dt": ev.t[tgt] - src.t[sr],
                "dx": ev.x[tgt] - src.x[sr], "dy": ev.y[tgt] - src.y[sr],
                "ab": self.tgt_mark[tgt] * self.marks.n_marks + self.src_mark[sr],
            }
        return self._planar


def _check_lambda(lam, seq):
    bad = ~(lam > 0) | ~np.isfinite(lam)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"intensity {lam[i]!r} at event {i} (t={seq.events.t[i]}); log undefined")


def hawkes_loglik(seq, state, need_grad=True):
    """Log-likelihood of a prepared sequence; optionally with gradients.

    Returns ``(L, grads)`` where ``grads`` has keys ``alpha``, ``log_beta`` and
    ``log_sigma`` (``None`` when ``need_grad`` is false).
    """
    beta, sigma, eps = float(state.beta), float(state.sigma), float(state.eps)
    nm = state.marks.n_marks
    mu, alpha = state.mu, state.alpha
    two_s2 = 2 * sigma * sigma
    norm = beta / (math.pi * two_s2)
    expo = -beta * seq.pair_dt - seq.pair_d2 / two_s2
    k = norm * np.exp(expo)
    if eps > 0:
        keep = (norm * np.exp(-beta * seq.pair_dt) >= eps) & (np.exp(-seq.pair_d2 / two_s2) >= eps)
        k = np.where(keep, k, 0.0)
    contrib = alpha.ravel()[seq.pair_ab] * k
    lam = mu[seq.tgt_mark] + np.bincount(seq.pair_tgt, contrib, minlength=seq.n)
    _check_lambda(lam, seq)
    L1 = float(np.sum(np.log(lam)))

    ea, eb = np.exp(-beta * seq.src_a), np.exp(-beta * seq.src_b)
    E = ea - eb
    background = seq.T * float(mu @ seq.zone_len[seq.mark_zone])
    if state.mass_mode == "full":
        S = alpha.sum(axis=0)[seq.src_mark]
    else:
        mz = zone_masses(seq.mass(), seq.zone_fractions, sigma, eps, need_grad)
        Z, dZ = mz if need_grad else (mz, None)
        Zm = Z[:, seq.mark_zone]                               # (n_src, n_marks)
        S = np.einsum("jm,mj->j", Zm, alpha[:, seq.src_mark])
    L = L1 - background - float(E @ S)
    if not math.isfinite(L):
        raise NumericError("log-likelihood is not finite")
    if not need_grad:
        return L, None

    inv = 1.0 / lam[seq.pair_tgt]
    g_alpha = np.bincount(seq.pair_ab, k * inv, minlength=nm * nm).astype(float).reshape(nm, nm)
    w = contrib * inv
    g_lb = float(np.sum(w * (1 - beta * seq.pair_dt)))
    g_ls = float(np.sum(w * (seq.pair_d2 / (sigma * sigma) - 2)))
    dE = beta * (-seq.src_a * ea + seq.src_b * eb)
    g_lb -= float(dE @ S)
    if state.mass_mode == "full":
        g_alpha -= np.bincount(seq.src_mark, E, minlength=nm)[None, :]
    else:
        nz = Z.shape[1]
        M = np.stack([np.bincount(seq.src_mark, E * Z[:, l], minlength=nm) for l in range(nz)])
        g_alpha -= M[seq.mark_zone]
        dS = np.einsum("jm,mj->j", dZ[:, seq.mark_zone], alpha[:, seq.src_mark])
        g_ls -= float(E @ dS)
    return L, {"alpha": g_alpha, "log_beta": g_lb, "log_sigma": g_ls}


def sequence_masses(seq, state):
    """Zone masses of every source in a prepared sequence."""
    if state.mass_mode == "full":
        return np.ones((len(seq.sources), len(seq.zone_len)))
    return zone_masses(seq.mass(), seq.zone_fractions, state.sigma, state.eps)


def mark_compensator(state, src_t, src_mark, masses, zone_len, t1, t2):
    """Expected count per mark on ``[t1, t2]`` with all sources before ``t2`` fixed.

    ``masses`` holds each source's kernel mass per zone (see
    :func:`sequence_masses`).  Sources at or after ``t2`` are ignored.
    """
    if t2 < t1:
        raise DomainError("t2 must not precede t1")
    marks = state.marks
    mz = marks.landmark_of(np.arange(marks.n_marks)) - 1
    out = state.mu * np.asarray(zone_len)[mz] * (t2 - t1)
    src_t = np.asarray(src_t, dtype=float)
    act = src_t < t2
    if not act.any():
        return out
    tj = src_t[act]
    E = np.exp(-state.beta * np.maximum(0.0, t1 - tj)) - np.exp(-state.beta * (t2 - tj))
    Zm = np.asarray(masses)[act][:, mz]                         # (n, n_marks)
    A = state.alpha[:, np.asarray(src_mark)[act]].T             # (n, n_marks)
    return out + (E[:, None] * A * Zm).sum(axis=0)


def compensator_total(seq, state):
    """Expected event count on ``[0, T]`` (all marks)."""
    return float(mark_compensator(state, seq.src_t, seq.src_mark, sequence_masses(seq, state),
                                  seq.zone_len, 0.0, seq.T).sum())


# ------------------------------------------------------- diffusion baseline

@dataclass
class EtasState:
    """Planar diffusion-kernel baseline with mark coefficients ``eta``."""

    mu: np.ndarray
    eta: np.ndarray
    beta: float
    sigma_x: float
    sigma_y: float
    marks: MarkSpace = field(default_factory=lambda: DEFAULT_MARKS)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if not (self.beta >= 0 and self.sigma_x > 0 and self.sigma_y > 0):
            raise DomainError("beta must be non-negative and sigma_x, sigma_y positive")


def etas_kernel(dt, dx, dy, eta, beta, sigma_x, sigma_y):
    """``eta exp(-beta dt) / (2 pi sqrt|S| dt) exp(-r' S^-1 r / 2 dt)`` with ``S = diag(sx^2, sy^2)``."""
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise DomainError("diffusion kernel is singular at dt <= 0")
    q = (np.asarray(dx) / sigma_x) ** 2 + (np.asarray(dy) / sigma_y) ** 2
    out = eta * np.exp(-beta * dt) / (2 * math.pi * sigma_x * sigma_y * dt) * np.exp(-q / (2 * dt))
    return float(out) if np.ndim(out) == 0 else out


def etas_intensity(t, xy, m, history, state):
    history.check_sorted()
    before = history.t < t
    h = history.subset(before)
    if not len(h):
        return float(state.mu[m])
    k = etas_kernel(t - h.t, xy[0] - h.x, xy[1] - h.y, state.eta[m, h.mark], state.beta,
                    state.sigma_x, state.sigma_y)
    return float(state.mu[m] + np.sum(k))


def etas_loglik(seq, state, need_grad=True):
    """Log-likelihood of the diffusion baseline; gradients w.r.t. eta and log-scales."""
    pp = seq.planar_pairs()
    nm = state.marks.n_marks
    beta, sx, sy = float(state.beta), float(state.sigma_x), float(state.sigma_y)
    dt, dx, dy = pp["dt"], pp["dx"], pp["dy"]
    qx, qy = (dx / sx) ** 2 / dt, (dy / sy) ** 2 / dt
    kt = np.exp(-beta * dt - (qx + qy) / 2) / (2 * math.pi * sx * sy * dt)
    contrib = state.eta.ravel()[pp["ab"]] * kt
    lam = state.mu[seq.tgt_mark] + np.bincount(pp["tgt"], contrib, minlength=seq.n)
    _check_lambda(lam, seq)
    ea, eb = np.exp(-beta * seq.src_a), np.exp(-beta * seq.src_b)
    E = ea - eb
    col = state.eta.sum(axis=0)[seq.src_mark]
    background = seq.T * float(state.mu @ seq.zone_len[seq.mark_zone])
    L = float(np.sum(np.log(lam))) - background - float(E @ col) / beta
    if not math.isfinite(L):
        raise NumericError("log-likelihood is not finite")
    if not need_grad:
        return L, None
    inv = 1.0 / lam[pp["tgt"]]
    w = contrib * inv
    g_eta = np.bincount(pp["ab"], kt * inv, minlength=nm * nm).astype(float).reshape(nm, nm)
    g_eta -= np.bincount(seq.src_mark, E / beta, minlength=nm)[None, :]
    dE = -seq.src_a * ea + seq.src_b * eb
    g_lb = float(np.sum(w * (-beta * dt))) - float(col @ (-E / beta + dE))
    g_lsx = float(np.sum(w * (qx - 1)))
    g_lsy = float(np.sum(w * (qy - 1)))
    return L, {"eta": g_eta, "log_beta": g_lb, "log_sigma_x": g_lsx, "log_sigma_y": g_lsy}
