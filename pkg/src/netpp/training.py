"""Mini-batch gradient ascent on the windowed log-likelihood, and cross-validation."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructuralError
from .intensity import (PreparedSequence, estimate_base_rates, mark_compensator,
                        sequence_masses)
from .model import Model, config_digest
from .network import DistanceIndex, zone_street_length

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    window_days: float = 120.0
    batch_size: int = 3
    epochs: int = 1500
    learning_rate: float = 1.0
    seed: int = 0
    heads: int = 8
    hidden: int = 8
    slope: float = 0.2
    clip_norm: float = 10.0
    paper_faithful: bool = False
    reproducible: bool = True
    threads: int = 1
    model: str = "gat"
    mass_mode: str = "full"
    eps: float = 1e-8
    r_max_km: float | None = None
    window_history_days: float = 0.0
    mu_mode: str = "empirical"
    normalize_loss: bool = True
    init_beta: float = 1.0
    init_sigma: float = 1.0
    init_row_total: float = 0.5
    curve_every: int = 1
    average_epochs: int = 0
    k_neighbors: int = 5
    samples_per_edge: int = 5
    max_snap_km: float | None = None
    frequent_marks: list = field(default_factory=list)
    n_crime: int = 3
    n_landmark: int = 7

    def __post_init__(self):
        for name in ("window_days", "batch_size", "epochs", "learning_rate", "heads", "hidden",
                     "threads", "curve_every", "k_neighbors", "samples_per_edge"):
            if not getattr(self, name) > 0:
                raise StructuralError(f"config value {name} must be positive")
        if self.model not in ("gat", "free", "etas"):
            raise StructuralError(f"unknown model {self.model!r}")
        if self.average_epochs < 0 or self.average_epochs > self.epochs:
            raise StructuralError("average_epochs must lie in [0, epochs]")
        if self.mu_mode not in ("empirical", "corrected"):
            raise StructuralError(f"unknown mu_mode {self.mu_mode!r}")
        if self.mass_mode not in ("full", "network"):
            raise StructuralError(f"unknown mass_mode {self.mass_mode!r}")

    @property
    def clipping(self):
        return None if self.paper_faithful or not self.clip_norm else float(self.clip_norm)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_SECTION = "train"


def _parse(value, default):
    v = value.strip()
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, list):
        return [int(x) for x in v.split(",") if x.strip()]
    if v.lower() in ("", "none"):
        return None
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float) or default is None:
        return float(v)
    return v


def read_config(path, **overrides):
    """Read an INI file with a ``[train]`` section; keyword overrides win."""
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    defaults = TrainConfig()
    values = {}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    if cp.has_section(_SECTION):
        for key, raw in cp.items(_SECTION):
            if key not in known:
                raise StructuralError(f"unknown config key {key!r}")
            try:
                values[key] = _parse(raw, getattr(defaults, key))
            except ValueError as exc:
                raise StructuralError(f"config key {key}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def write_config(config, path):
    cp = configparser.ConfigParser()
    cp[_SECTION] = {}
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        cp[_SECTION][k] = "none" if v is None else repr(v) if isinstance(v, float) else str(v)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


# ----------------------------------------------------------------- windows

def split_subsequences(events, T, window_days, t0=0.0):
    """Cut ``[t0, T)`` into consecutive windows and re-base times to each window start.

    Returns a list of ``(events, length)``; the last window may be shorter.
    """
    if window_days <= 0:
        raise StructuralError("window length must be positive")
    span = T - t0
    J = max(1, int(math.ceil(span / window_days - 1e-12)))
    j = np.clip(np.floor((events.t - t0) / window_days).astype(np.int64), 0, J - 1)
    out = []
    for w in range(J):
        start = t0 + w * window_days
        length = min(window_days, T - start)
        out.append((events.subset(np.flatnonzero(j == w)).shifted(-start), length))
    return out


def prepare_windows(events, T, net, zone_fractions, config, idx=None, t0=0.0):
    """Prepared windows; with ``window_history_days`` each window is conditioned
    on the events just before it, which excite but are not scored."""
    idx = idx if idx is not None else DistanceIndex(net)
    hist_days = config.window_history_days or 0.0
    out = []
    for j, (ev, length) in enumerate(split_subsequences(events, T, config.window_days, t0)):
        start = t0 + j * config.window_days
        history = None
        if hist_days > 0:
            sel = (events.t < start) & (events.t >= start - hist_days)
            if sel.any():
                history = events.subset(np.flatnonzero(sel)).shifted(-start)
        out.append(PreparedSequence(ev, length, net, zone_fractions, idx, history=history,
                                    r_max_km=config.r_max_km))
    return out


def pair_count(events, T, window_days):
    """Number of time-ordered event pairs summed over windows."""
    return int(sum(len(ev) * (len(ev) - 1) // 2 for ev, _ in split_subsequences(events, T, window_days)))


# ----------------------------------------------------------------- fitting

@dataclass
class FitResult:
    model: Model
    curve: list            # (epoch, total log-likelihood, wall seconds)
    n_windows: int

    @property
    def final_loglik(self):
        return self.curve[-1][1]


def _evaluate(model, seqs, need_grad, pool=None):
    fn = lambda s: model.loglik(s, need_grad)  # noqa: E731
    results = list(pool.map(fn, seqs)) if pool is not None else [fn(s) for s in seqs]
    # fixed reduction order regardless of completion order
    total = math.fsum(r[0] for r in results)
    if not need_grad:
        return total, None
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for _, g in results:
        for k in grads:
            grads[k] += g[k]
    return total, grads


def total_loglik(model, seqs, pool=None):
    return _evaluate(model, seqs, False, pool)[0]


MU_FLOOR_SHARE = 0.05


def base_rates(model, seqs, mode, T_total, zone_len):
    """Closed-form base rates pooled over windows.

    ``empirical`` divides raw counts by exposure.  ``corrected`` first removes
    the count expected from excitation under the current coefficients, keeping
    at least ``MU_FLOOR_SHARE`` of each mark's raw count.
    """
    nm = model.marks.n_marks
    counts = np.zeros(nm)
    for s in seqs:
        counts += np.bincount(s.tgt_mark, minlength=nm)
    if mode == "corrected":
        raw = counts.copy()
        state = model.state()
        if model.kind != "etas":
            state = state.replace(mu=np.zeros(nm))
            for s in seqs:
                counts -= mark_compensator(state, s.src_t, s.src_mark, sequence_masses(s, state),
                                           s.zone_len, 0.0, s.T)
        else:
            for s in seqs:
                E = np.exp(-state.beta * s.src_a) - np.exp(-state.beta * s.src_b)
                counts -= (state.eta[:, s.src_mark] * E).sum(axis=1) / state.beta
        # keep observed marks possible: an event with no history needs mu > 0
        counts = np.maximum(counts, MU_FLOOR_SHARE * raw)
    zl = np.asarray(zone_len)[model.marks.landmark_of(np.arange(nm)) - 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zl > 0, counts / (T_total * zl), 0.0)


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def fit(events, net, zone_fractions, config, T, idx=None, seqs=None, init=None, callback=None):
    """Fit by mini-batch stochastic gradient ascent over time windows.

    Parameters
    ----------
    events : EventSet
        Training events on ``[0, T]``.
    config : TrainConfig
    seqs : list of PreparedSequence, optional
        Pre-built windows (skips preparation).
    init : Model, optional
        Starting point; otherwise initialised from ``config.seed``.
    callback : callable, optional
        Called as ``callback(epoch, model, loglik)`` after each recorded epoch.

    Returns
    -------
    FitResult
        The model after the last epoch and the per-epoch training curve.
        With ``config.average_epochs = K > 0`` the returned parameters are the
        mean of the end-of-epoch parameters over the last ``K`` epochs and the
        final curve row scores that averaged model.
    """
    rng = np.random.default_rng(config.seed)
    zone_fractions = np.asarray(zone_fractions, dtype=float)
    zone_len = zone_street_length(net, zone_fractions)
    if seqs is None:
        seqs = prepare_windows(events, T, net, zone_fractions, config, idx)
    mu = estimate_base_rates(events, zone_len, T)
    if init is None:
        model = Model.initial(config.model, mu, rng, config.heads, config.hidden, config.slope,
                              config.init_beta, config.init_sigma, config.init_row_total,
                              mass_mode=config.mass_mode, eps=config.eps)
    else:
        model = init.copy()
        model.mu = mu
    model.meta.update(config=config.to_dict(), config_digest=config_digest(config.to_dict()),
                      T=float(T), window_days=float(config.window_days))
    if config.mu_mode == "corrected":
        model.mu = base_rates(model, seqs, "corrected", T, zone_len)

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    curve = []
    t_start = time.perf_counter()
    J = len(seqs)
    avg, n_avg = None, 0
    first_avg = config.epochs - config.average_epochs + 1
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(J)
            for bstart in range(0, J, config.batch_size):
                batch = [seqs[i] for i in order[bstart:bstart + config.batch_size]]
                try:
                    L, grads = _evaluate(model, batch, True, pool)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {bstart // config.batch_size}: {exc}") from exc
                n_ev = sum(s.n for s in batch)
                scale = 1.0 / max(n_ev, 1) if config.normalize_loss else 1.0
                # ascend L, i.e. descend the loss -L
                grads = {k: g * scale for k, g in grads.items()}
                grads, _ = _clip(grads, config.clipping)
                for k, g in grads.items():
                    model.params[k] = model.params[k] + config.learning_rate * g
            if config.average_epochs and epoch >= first_avg:
                n_avg += 1
                if avg is None:
                    avg = {k: v.copy() for k, v in model.params.items()}
                else:
                    for k, v in model.params.items():
                        avg[k] += (v - avg[k]) / n_avg
                if epoch == config.epochs:
                    model.params = avg
            if config.mu_mode == "corrected":
                model.mu = base_rates(model, seqs, "corrected", T, zone_len)
            if epoch % config.curve_every == 0 or epoch == config.epochs:
                Ltot = total_loglik(model, seqs, pool)
                if not math.isfinite(Ltot):
                    raise NumericError(f"epoch {epoch}: non-finite training log-likelihood")
                curve.append((epoch, Ltot, time.perf_counter() - t_start))
                if callback is not None:
                    callback(epoch, model, Ltot)
    finally:
        if pool is not None:
            pool.shutdown()
    if model.kind != "etas" and config.window_days < 4.0 / model.beta:
        log.warning("window of %.1f days is short relative to the fitted decay scale 1/beta = %.1f days",
                    config.window_days, 1.0 / model.beta)
    return FitResult(model, curve, J)


def write_curve(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,total_train_loglik,wall_seconds\n")
        for e, L, w in curve:
            fh.write(f"{e},{L!r},{w!r}\n")


# ----------------------------------------------------------- model selection

def assign_folds(J, folds, rng):
    if J < folds:
        raise StructuralError(f"{J} subsequences cannot fill {folds} folds")
    perm = np.random.default_rng(rng).permutation(J)
    return [np.sort(perm[f::folds]) for f in range(folds)]


def cross_validate_R(events, net, zone_fractions, config, T, candidates=(2, 4, 6, 8, 12, 16),
                     folds=4, idx=None, seqs=None):
    """Hold-out log-likelihood per head count over seeded folds of windows.

    Returns a dict with per-R fold scores, mean and sd, and the best R.
    """
    if seqs is None:
        seqs = prepare_windows(events, T, net, zone_fractions, config, idx)
    groups = assign_folds(len(seqs), folds, config.seed)
    scores = {}
    for R in candidates:
        cfg = config.replace(heads=int(R), model="gat")
        row = []
        for f in range(folds):
            train = [seqs[i] for g, grp in enumerate(groups) if g != f for i in grp]
            hold = [seqs[i] for i in groups[f]]
            train_ev = type(events).concat([s.events.shifted(0.0) for s in train])
            res = fit(train_ev, net, zone_fractions, cfg, sum(s.T for s in train), seqs=train)
            row.append(total_loglik(res.model, hold))
        scores[int(R)] = row
    table = {R: {"folds": v, "mean": float(np.mean(v)), "sd": float(np.std(v))} for R, v in scores.items()}
    best = max(table, key=lambda r: table[r]["mean"])
    return {"scores": table, "best": best}


def subsequence_tradeoff_sweep(events, net, zone_fractions, config, T, Js=(6, 8, 10, 12, 14, 16, 18, 20, 24),
                               idx=None):
    """Fit once per window count ``J``; record pairs, seconds per epoch and final log-likelihood."""
    idx = idx if idx is not None else DistanceIndex(net)
    rows = []
    for J in Js:
        w = T / J
        cfg = config.replace(window_days=w)
        t0 = time.perf_counter()
        res = fit(events, net, zone_fractions, cfg, T, idx=idx)
        wall = time.perf_counter() - t0
        rows.append({"J": int(J), "pairs": pair_count(events, T, w),
                     "seconds_per_epoch": wall / cfg.epochs, "train_loglik": res.final_loglik})
    return rows
