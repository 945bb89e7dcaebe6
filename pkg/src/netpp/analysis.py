"""Mark network, community structure and mark importance from fitted coefficients."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .evaluation import aic, default_frequent_marks, weekly_counts, weekly_mae
from .intensity import PreparedSequence, mark_compensator, source_zone_masses
from .network import DistanceIndex, zone_street_length
from .training import TrainConfig, prepare_windows

WEIGHT_FLOOR = 1e-12


@dataclass
class MarkNetwork:
    """Directed weighted graph with an edge ``m' -> m`` of weight ``alpha[m, m']``."""

    alpha: np.ndarray
    edges: list                  # (src, dst, weight)
    communities: np.ndarray | None = None
    modularity: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.alpha.shape[0]


def build_mark_network(alpha, threshold=0.0):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0):
        raise DomainError("coefficients must be non-negative")
    dst, src = np.nonzero(alpha > max(threshold, WEIGHT_FLOOR))
    order = np.lexsort((dst, src))
    edges = [(int(src[i]), int(dst[i]), float(alpha[dst[i], src[i]])) for i in order]
    return MarkNetwork(alpha, edges)


def symmetrize(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return (alpha + alpha.T) / 2


def modularity(W, labels):
    """Newman modularity of a partition of a symmetric weighted graph."""
    W = np.asarray(W, dtype=float)
    two_m = W.sum()
    if two_m <= 0:
        return 0.0
    labels = np.asarray(labels)
    k = W.sum(axis=1)
    same = labels[:, None] == labels[None, :]
    return float(((W - np.outer(k, k) / two_m) * same).sum() / two_m)


def _one_level(W, rng, comm=None):
    """Local moves until no single move increases modularity."""
    n = len(W)
    k = W.sum(axis=1)
    two_m = W.sum()
    comm = np.arange(n) if comm is None else np.array(comm)
    tot = np.bincount(comm, weights=k, minlength=n)
    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in rng.permutation(n):
            ci = comm[i]
            links = np.bincount(comm, weights=W[i], minlength=n)
            links[ci] -= W[i, i]
            tot[ci] -= k[i]
            cand = np.unique(np.concatenate([[ci], comm[(W[i] > 0) & (np.arange(n) != i)]]))
            gain = links[cand] - tot[cand] * k[i] / two_m
            best = cand[int(np.argmax(gain))]
            if gain[cand == best][0] <= gain[cand == ci][0] + 1e-12:
                best = ci
            comm[i] = best
            tot[best] += k[i]
            if best != ci:
                improved = moved_any = True
    _, comm = np.unique(comm, return_inverse=True)
    return comm, moved_any


def louvain_communities(W, seed=0, n_starts=1):
    """Greedy modularity optimisation with local moves and aggregation.

    After the aggregation passes stop, single nodes are moved again on the
    original graph and the passes restart from the result until neither
    step improves modularity.

    Parameters
    ----------
    W : (n, n) symmetric non-negative array
    seed : node visiting order seed
    n_starts : number of visiting orders tried (seeds ``seed, seed + 1, ...``);
        the partition with the highest modularity is kept

    Returns
    -------
    labels : (n,) int array, communities numbered by first appearance
    Q : modularity of ``labels`` on ``W``
    """
    W = np.asarray(W, dtype=float)
    n = len(W)
    if W.sum() <= 0:
        return np.zeros(n, dtype=np.int64), 0.0
    best = None
    for s in range(seed, seed + max(1, n_starts)):
        labels, Q = _louvain_once(W, np.random.default_rng(s))
        if best is None or Q > best[1] + 1e-12:
            best = labels, Q
    return best


def _louvain_once(W, rng):
    n = len(W)
    membership = np.arange(n)
    while True:
        S = np.zeros((n, membership.max() + 1))
        S[np.arange(n), membership] = 1.0
        G = S.T @ W @ S
        while True:
            comm, moved = _one_level(G, rng)
            if not moved:
                break
            membership = comm[membership]
            S = np.zeros((len(G), comm.max() + 1))
            S[np.arange(len(G)), comm] = 1.0
            G = S.T @ G @ S
        # aggregation can leave single nodes in the wrong community
        membership, moved = _one_level(W, rng, membership)
        if not moved:
            break
    _, first = np.unique(membership, return_index=True)
    labels = np.argsort(np.argsort(first))[membership]
    return labels, modularity(W, labels)


def detect_communities(net, seed=0, n_starts=10):
    labels, Q = louvain_communities(symmetrize(net.alpha), seed, n_starts)
    net.communities, net.modularity = labels, Q
    return net


def expected_triggered(alpha):
    """Column sums of alpha and the marks ranked by them (largest first, ties by index)."""
    totals = np.asarray(alpha, dtype=float).sum(axis=0)
    return totals, np.lexsort((np.arange(len(totals)), -totals))


# -------------------------------------------------------------- importance

def reduced_model_importance(model, train, T_train, test, T_end, net, zone_fractions, window_days,
                             frequent=None, idx=None, r_max_km=None, marks_to_test=None,
                             history_days=0.0):
    """Change in training AIC, test negative log-likelihood and forecast MAE
    when each mark's influence column is set to zero (no refit).

    ``test`` holds events on ``[T_train, T_end]``.  The test likelihood
    conditions on the last ``window_days`` of training events and the
    one-week-ahead forecasts on all earlier events.  Returns one
    dict per mark with keys ``mark``, ``delta_aic``, ``delta_neg_test_ll``
    and ``delta_mae`` (reduced minus full).  A reduced model that gives some
    event zero intensity scores an infinite loss.
    """
    idx = idx if idx is not None else DistanceIndex(net)
    W = np.asarray(zone_fractions, dtype=float)
    zl = zone_street_length(net, W)
    nm = model.marks.n_marks
    frequent = default_frequent_marks(model.marks) if frequent is None else frequent
    k = model.n_trainable()
    cfg = TrainConfig(window_days=window_days, r_max_km=r_max_km, window_history_days=history_days)
    train_seqs = prepare_windows(train, T_train, net, W, cfg, idx)
    memory = train.subset(train.t >= T_train - window_days).shifted(-T_train)
    test_seq = PreparedSequence(test.shifted(-T_train), T_end - T_train, net, W, idx,
                                history=memory if len(memory) else None, r_max_km=r_max_km)
    both = type(train).concat([train, test])
    n_weeks = int((T_end - T_train) // 7)
    obs = weekly_counts(test, T_train, n_weeks, nm)
    cs = model.compensator_state()
    Zs = source_zone_masses(both, cs.sigma, cs.mass_mode, net, W, idx, r_max_km, n_zones=W.shape[1])

    def weekly(alpha):
        st = model.compensator_state(alpha)
        out = np.zeros((n_weeks, nm))
        for w in range(n_weeks):
            t1 = T_train + 7 * w
            sel = both.t < t1
            out[w] = mark_compensator(st, both.t[sel], both.mark[sel], Zs[sel], zl, t1, t1 + 7)
        return out

    def loglik(seq, alpha):
        try:
            return model.loglik(seq, need_grad=False, alpha=alpha)[0]
        except NumericError:
            return -math.inf

    def scores(alpha):
        Ltr = math.fsum(loglik(s, alpha) for s in train_seqs)
        Lte = loglik(test_seq, alpha)
        mae = weekly_mae(weekly(alpha), obs, frequent)["total"] if n_weeks else float("nan")
        return aic(Ltr, k), -Lte, mae

    alpha = model.alpha()
    base = scores(alpha)
    rows = []
    for m in (range(nm) if marks_to_test is None else marks_to_test):
        a = alpha.copy()
        a[:, m] = 0.0
        r = scores(a)
        rows.append({"mark": int(m), "delta_aic": r[0] - base[0],
                     "delta_neg_test_ll": r[1] - base[1], "delta_mae": r[2] - base[2]})
    return rows


# ------------------------------------------------------------------ files

def write_edge_list(net, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src_mark", "dst_mark", "alpha"])
        for s, d, a in net.edges:
            w.writerow([s, d, repr(a)])


def write_communities(labels, path, modularity_value=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mark", "community"])
        for m, c in enumerate(labels):
            w.writerow([m, int(c)])
    if modularity_value is not None:
        with open(str(path) + ".modularity", "w", encoding="utf-8") as fh:
            fh.write(f"{modularity_value!r}\n")


def write_triggered(totals, ranking, path, marks=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "mark", "name", "expected_triggered"])
        for r, m in enumerate(ranking, 1):
            w.writerow([r, int(m), marks.name(int(m)) if marks else "", repr(float(totals[m]))])


def write_importance(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mark", "delta_aic", "delta_neg_test_ll", "delta_mae"])
        for r in rows:
            w.writerow([r["mark"], repr(r["delta_aic"]), repr(r["delta_neg_test_ll"]), repr(r["delta_mae"])])
