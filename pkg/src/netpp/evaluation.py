"""Goodness of fit and forecasting: AIC, weekly counts and MAE, cumulative
curves, intensity fields and the persistence baseline."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .errors import DomainError, StructuralError
from .intensity import PreparedSequence, mark_compensator, source_zone_masses
from .network import DistanceIndex, location_distances, zone_street_length
from .simulation import branching_matrix, rescaled_times
from .training import TrainConfig, prepare_windows, split_subsequences
from .zoning import CRIMES, DEFAULT_MARKS, LANDMARKS

FREQUENT_LANDMARKS = ("financial", "industrial", "restaurant")


def aic(logL, k):
    if k < 0:
        raise DomainError("parameter count must be non-negative")
    return -2.0 * logL + 2.0 * k


def default_frequent_marks(marks=DEFAULT_MARKS):
    lms = [LANDMARKS.index(n) + 1 for n in FREQUENT_LANDMARKS if LANDMARKS.index(n) < marks.n_landmark]
    m = np.arange(marks.n_marks)
    return m[np.isin(marks.landmark_of(m), lms)]


# ------------------------------------------------------------ likelihoods

def windowed_loglik(model, events, T, net, zone_fractions, window_days, idx=None, r_max_km=None, t0=0.0,
                    history_days=0.0):
    """Sum of per-window log-likelihoods, as optimised during training."""
    cfg = TrainConfig(window_days=window_days, r_max_km=r_max_km, window_history_days=history_days)
    seqs = prepare_windows(events, T, net, zone_fractions, cfg, idx, t0)
    return math.fsum(model.loglik(seq, need_grad=False)[0] for seq in seqs)


def heldout_loglik(model, history, test, t_start, t_end, net, zone_fractions, idx=None,
                   memory_days=None, r_max_km=None):
    """Log-likelihood of ``test`` on ``[t_start, t_end]`` given earlier ``history``.

    History older than ``memory_days`` before ``t_start`` is ignored.
    """
    if t_end <= t_start:
        raise DomainError("empty evaluation interval")
    h = history.subset(history.t < t_start)
    if memory_days is not None:
        h = h.subset(h.t >= t_start - memory_days)
    seq = PreparedSequence(test.shifted(-t_start), t_end - t_start, net, zone_fractions, idx,
                           history=h.shifted(-t_start) if len(h) else None, r_max_km=r_max_km)
    return model.loglik(seq, need_grad=False)[0]


# --------------------------------------------------------- expected counts

def expected_counts(state, events, t1, t2, net, zone_fractions, mode="frozen", branching=False,
                    idx=None, r_max_km=None):
    """Expected count per mark on ``[t1, t2]``.

    ``in_sample`` conditions on every event before ``t2`` as it occurred.
    ``frozen`` uses only events before ``t1``; with ``branching`` the
    offspring of events predicted inside the horizon are added through a
    truncated branching series (each generation's mass is discounted by the
    average share of its offspring that falls inside the horizon).
    """
    if t2 <= t1:
        raise DomainError("t2 must exceed t1")
    if mode not in ("in_sample", "frozen"):
        raise StructuralError(f"unknown mode {mode!r}")
    W = np.asarray(zone_fractions, dtype=float)
    zl = zone_street_length(net, W)
    cut = t2 if mode == "in_sample" else t1
    src = events.subset(events.t < cut)
    Zs = source_zone_masses(src, state.sigma, state.mass_mode, net, W, idx, r_max_km, n_zones=W.shape[1])
    out = mark_compensator(state, src.t, src.mark, Zs, zl, t1, t2)
    if mode == "frozen" and branching:
        H = t2 - t1
        bh = state.beta * H
        share = 1.0 - (1.0 - math.exp(-bh)) / bh
        K = branching_matrix(state, net, W, idx) * share
        out = np.linalg.solve(np.eye(len(out)) - K, out)
    return out


def weekly_counts(events, t_start, n_weeks, n_marks=21):
    wk = np.floor((events.t - t_start) / 7.0).astype(np.int64)
    ok = (wk >= 0) & (wk < n_weeks)
    out = np.zeros((n_weeks, n_marks))
    np.add.at(out, (wk[ok], events.mark[ok]), 1.0)
    return out


def weekly_expected(state, events, t_start, n_weeks, net, zone_fractions, mode="frozen",
                    branching=False, idx=None):
    """Expected weekly counts per mark; one-week-ahead when ``mode='frozen'``."""
    idx = idx if idx is not None else DistanceIndex(net)
    return np.stack([expected_counts(state, events, t_start + 7 * w, t_start + 7 * (w + 1), net,
                                     zone_fractions, mode, branching, idx)
                     for w in range(n_weeks)])


def weekly_mae(predicted, observed, frequent=None):
    """MAE for rare marks, frequent marks and the total weekly count.

    Group values average the per-mark mean absolute weekly errors; the total
    uses the weekly sum over all marks.
    """
    p, o = np.asarray(predicted, dtype=float), np.asarray(observed, dtype=float)
    if p.shape != o.shape or p.ndim != 2:
        raise StructuralError(f"misaligned weekly bins: {p.shape} vs {o.shape}")
    if frequent is None:
        frequent = default_frequent_marks()
    freq = np.zeros(p.shape[1], dtype=bool)
    freq[np.asarray(frequent, dtype=np.int64)] = True
    per_mark = np.abs(p - o).mean(axis=0)
    nan = float("nan")
    return {
        "rare": float(per_mark[~freq].mean()) if (~freq).any() else nan,
        "frequent": float(per_mark[freq].mean()) if freq.any() else nan,
        "total": float(np.abs(p.sum(axis=1) - o.sum(axis=1)).mean()),
    }


def persistence_forecast(observed):
    """Next week equals this week; row ``w`` predicts week ``w + 1``."""
    o = np.asarray(observed, dtype=float)
    if len(o) < 2:
        raise StructuralError("persistence needs at least two weeks")
    return o[:-1].copy()


# ---------------------------------------------------------------- curves

def cumulative_fit_curve(state, events, T, net, zone_fractions, window_days=None, idx=None,
                         history_days=0.0):
    """Event times with the running count ``N`` and compensator ``Lambda``.

    With ``window_days`` the compensator restarts at every window, matching the
    windowed training likelihood; ``history_days`` lets events just before a
    window keep exciting it.  The last row is at ``T``.
    """
    W = np.asarray(zone_fractions, dtype=float)
    zl = zone_street_length(net, W)
    if window_days is None:
        starts, lengths = [0.0], [T]
    else:
        J = len(split_subsequences(events, T, window_days))
        starts = [j * window_days for j in range(J)]
        lengths = [min(window_days, T - s) for s in starts]
    ts, lams = [], []
    offset_lam = 0.0
    for start, length in zip(starts, lengths):
        end = start + length
        last = end >= T
        sel = (events.t >= start) & ((events.t < end) | (last & (events.t <= end)))
        lo = start - history_days if window_days is not None and history_days > 0 else start
        src = events.subset(np.flatnonzero((events.t >= lo) & (events.t < start) | sel)).shifted(-start)
        n_hist = len(src) - int(sel.sum())
        Zs = source_zone_masses(src, state.sigma, state.mass_mode, net, W, idx, n_zones=W.shape[1])
        if len(src) > n_hist:
            tau = rescaled_times(src, state, net, W, idx)[n_hist:]
            lam0 = _compensator_at_zero(state, src, Zs, zl, n_hist)
            ts.append(src.t[n_hist:] + start)
            lams.append(tau - lam0 + offset_lam)
        offset_lam += float(mark_compensator(state, src.t, src.mark, Zs, zl, 0.0, length).sum())
    t = np.concatenate(ts + [[T]]) if ts else np.array([T])
    lam = np.concatenate(lams + [[offset_lam]]) if lams else np.array([offset_lam])
    N = np.concatenate([np.arange(1, len(t)), [len(t) - 1]]).astype(float)
    return t, N, lam


def _compensator_at_zero(state, src, Zs, zl, n_hist):
    """Value at time 0 of the running compensator used by :func:`rescaled_times`.

    That running compensator starts at the first source; the background term
    is anchored at time 0, so only the excitation of history events counts.
    """
    if n_hist == 0:
        return 0.0
    mz = state.marks.landmark_of(np.arange(state.marks.n_marks)) - 1
    S = np.einsum("jm,mj->j", Zs[:n_hist][:, mz], state.alpha[:, src.mark[:n_hist]])
    return float(np.sum(S * (1.0 - np.exp(-state.beta * (0.0 - src.t[:n_hist])))))


def max_relative_deviation(N, lam):
    return float(np.max(np.abs(lam - N)) / max(N[-1], 1.0))


def write_curve_csv(t, N, lam, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_days", "observed_count", "expected_count"])
        for row in zip(t, N, lam):
            w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------- intensity map

def intensity_field(state, history, t, net, zone_fractions, step_km=0.05, crime=None, mark=None,
                    idx=None, chunk=2048):
    """Intensity sampled along every edge at time ``t``.

    With ``crime`` the marks of that crime are summed, each weighted by the
    edge's share of the mark's zone; with ``mark`` a single mark is returned
    with the same weighting.  Without either, every mark is summed.

    Returns a dict of arrays ``edge``, ``offset``, ``x``, ``y``, ``intensity``.
    """
    W = np.asarray(zone_fractions, dtype=float)
    marks = state.marks
    nm = marks.n_marks
    sel = np.zeros(nm, dtype=bool)
    if mark is not None:
        sel[int(mark)] = True
    elif crime is not None:
        c, _ = marks.unmake_mark(np.arange(nm))
        sel[c == int(crime)] = True
    else:
        sel[:] = True
    mz = marks.landmark_of(np.arange(nm)) - 1
    edges, offs = [], []
    for e, L in enumerate(net.lengths):
        k = max(1, int(math.ceil(L / step_km)))
        edges.append(np.full(k + 1, e))
        offs.append(np.linspace(0.0, L, k + 1))
    edges, offs = np.concatenate(edges), np.concatenate(offs)
    h = history.subset(history.t < t)
    if len(h):
        h = h.subset(state.beta * (t - h.t) < 40.0)
    idx = idx if idx is not None else DistanceIndex(net)
    weights = W[edges][:, mz][:, sel]                       # (P, n_sel)
    lam = np.tile(state.mu[sel], (len(edges), 1))
    if len(h):
        tw = state.beta * np.exp(-state.beta * (t - h.t))
        A = state.alpha[sel][:, h.mark].T                   # (n_hist, n_sel)
        s2 = 2 * state.sigma ** 2
        for s in range(0, len(edges), chunk):
            d = location_distances(net, edges[s:s + chunk], offs[s:s + chunk], h.edge, h.offset, idx)
            G = np.exp(-d * d / s2) / (math.pi * s2)
            lam[s:s + chunk] += (G * tw) @ A
    xy = net.location_xy(edges, offs)
    return {"edge": edges, "offset": offs, "x": xy[:, 0], "y": xy[:, 1],
            "intensity": (lam * weights).sum(axis=1)}


def write_geojson(field, path, crime_name="all", net=None):
    """Point features with ``edge_id``, ``offset_km``, ``intensity``, ``crime``.

    Coordinates are longitude/latitude when the network carries a projection
    reference, otherwise planar km.
    """
    x, y = field["x"], field["y"]
    if net is not None and net.node_lonlat is not None:
        from .network import unproject_xy
        x, y = unproject_xy(x, y, net.ref_lonlat[1], net.ref_lonlat[0])
    feats = [{"type": "Feature",
              "geometry": {"type": "Point", "coordinates": [float(a), float(b)]},
              "properties": {"edge_id": int(e), "offset_km": float(o), "intensity": float(v),
                             "crime": crime_name}}
             for a, b, e, o, v in zip(x, y, field["edge"], field["offset"], field["intensity"])]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)


# ----------------------------------------------------------------- output

def write_metrics_csv(rows, path):
    """``rows`` is an iterable of ``(metric, group, value)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "group", "value"])
        for m, g, v in rows:
            w.writerow([m, g, repr(float(v))])


def write_forecast_csv(t_start, predicted, observed, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["week_start_day", "mark", "predicted", "observed"])
        for wk in range(predicted.shape[0]):
            for m in range(predicted.shape[1]):
                obs = "" if observed is None else repr(float(observed[wk, m]))
                w.writerow([repr(float(t_start + 7 * wk)), m, repr(float(predicted[wk, m])), obs])


def crime_index(name):
    try:
        return CRIMES.index(name.strip().lower()) + 1
    except ValueError:
        raise StructuralError(f"unknown crime {name!r}") from None
