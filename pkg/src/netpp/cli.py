"""Command-line front end.

Every subcommand exits 0 on success.  Failures print one line
``error: code=<CODE> message=<text>`` to stderr and exit with 2 (malformed
input), 3 (numerical failure) or 4 (violated precondition).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import NetppError, StructuralError

log = logging.getLogger("netpp")


def _csv_ints(s):
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _out_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _echo_config(config, directory):
    from .training import write_config
    write_config(config, os.path.join(directory, "effective_config.ini"))


def _load_context(args, model=None, with_path=False):
    """Network, zone fractions and distance index from flags or model metadata."""
    from .network import DistanceIndex, load_network
    from .zoning import read_zones_csv
    meta = model.meta if model is not None else {}
    net_path = getattr(args, "net", None) or meta.get("network_path")
    zones_path = getattr(args, "zones", None) or meta.get("zones_path")
    events_path = getattr(args, "events", None)
    if not zones_path and events_path:
        # the file written next to the events by ``prepare``
        zones_path = os.path.splitext(events_path)[0] + "_zones.csv"
    if not net_path or not zones_path:
        raise StructuralError("network and zones files are required (--net/--zones)")
    net = load_network(net_path)
    zones = read_zones_csv(zones_path, net.n_edges)
    if with_path:
        return net, zones, DistanceIndex(net), zones_path
    return net, zones, DistanceIndex(net)


def _train_config(args, model=None):
    from .training import TrainConfig, read_config
    if model is not None and getattr(args, "config", None) is None:
        base = TrainConfig(**model.meta.get("config", {}))
        over = {k: getattr(args, k, None) for k in ("seed", "threads")}
        return base.replace(**{k: v for k, v in over.items() if v is not None})
    return read_config(getattr(args, "config", None),
                       seed=getattr(args, "seed", None), threads=getattr(args, "threads", None),
                       epochs=getattr(args, "epochs", None), model=getattr(args, "model_kind", None),
                       heads=getattr(args, "heads", None))


def _default_T(events):
    return float(math.ceil(events.t.max())) if len(events) else 1.0


# ---------------------------------------------------------------- commands

def cmd_build_network(args):
    from .network import read_network_csv, save_network
    ref = None if args.ref_lon is None else (args.ref_lon, args.ref_lat)
    net = read_network_csv(args.nodes, args.edges, ref)
    _out_dir(args.out)
    save_network(net, args.out)
    print(f"nodes={net.n_nodes} edges={net.n_edges} total_km={net.total_length:.3f}")


def cmd_prepare(args):
    from .network import load_network
    from .zoning import (label_edges, prepare_events, read_landmarks_csv, read_raw_events_csv,
                         write_events_csv, write_zones_csv)
    net = load_network(args.net)
    landmarks = read_landmarks_csv(args.landmarks, net)
    t, lon, lat, crime = read_raw_events_csv(args.events)
    ev = prepare_events(t, lon, lat, crime, net, landmarks, args.k, args.max_snap_km)
    zones = label_edges(net, landmarks, args.k, args.samples_per_edge)
    _out_dir(args.out)
    write_events_csv(ev, args.out)
    zpath = args.zones_out or os.path.splitext(args.out)[0] + "_zones.csv"
    write_zones_csv(zones, zpath)
    counts = np.bincount(ev.mark, minlength=ev.marks.n_marks)
    for m, c in enumerate(counts):
        print(f"mark {m:2d} {ev.marks.name(m):24s} {c}")
    if len(ev):
        q = np.percentile(ev.snap_km, [50, 90, 99, 100])
        print("snap_km p50={:.4f} p90={:.4f} p99={:.4f} max={:.4f}".format(*q))
    print(f"events={len(ev)} zones_file={zpath}")


def cmd_fit(args):
    from .model import save_model
    from .training import fit, write_curve
    from .zoning import read_events_csv
    config = _train_config(args)
    net, zones, idx, zones_path = _load_context(args, with_path=True)
    ev = read_events_csv(args.events, net)
    T = args.T if args.T is not None else _default_T(ev)
    res = fit(ev, net, zones, config, T, idx=idx)
    res.model.meta.update(network_path=os.path.abspath(args.net), zones_path=os.path.abspath(zones_path),
                          events_path=os.path.abspath(args.events))
    d = _out_dir(args.out)
    save_model(res.model, args.out)
    curve_path = args.curve or os.path.splitext(args.out)[0] + "_curve.csv"
    _out_dir(curve_path)
    write_curve(res.curve, curve_path)
    _echo_config(config, d)
    m = res.model
    print(f"windows={res.n_windows} final_train_loglik={res.final_loglik!r} beta={m.beta!r} sigma={m.sigma!r}")


def cmd_crossval(args):
    from .training import cross_validate_R
    from .zoning import read_events_csv
    config = _train_config(args)
    net, zones, idx = _load_context(args)
    ev = read_events_csv(args.events, net)
    T = args.T if args.T is not None else _default_T(ev)
    out = cross_validate_R(ev, net, zones, config, T, args.Rs, args.folds, idx)
    d = _out_dir(args.out)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "mean_heldout_loglik", "sd", *[f"fold{f}" for f in range(args.folds)]])
        for R, row in out["scores"].items():
            w.writerow([R, repr(row["mean"]), repr(row["sd"]), *[repr(v) for v in row["folds"]]])
            print(f"R={R:3d} mean={row['mean']:.4f} sd={row['sd']:.4f}")
    _echo_config(config, d)
    print(f"best_R={out['best']}")


def cmd_simulate(args):
    from .model import load_model
    from .simulation import simulate
    from .zoning import write_events_csv
    model = load_model(args.model)
    if model.kind == "etas":
        raise StructuralError("simulation supports the network models only")
    net, zones, idx = _load_context(args, model)
    ev = simulate(model.state(), net, zones, args.T, seed=args.seed, idx=idx)
    _out_dir(args.out)
    write_events_csv(ev, args.out, with_parent=args.with_parent)
    print(f"events={len(ev)}")


def cmd_predict(args):
    from .evaluation import (crime_index, expected_counts, intensity_field, weekly_counts,
                             write_forecast_csv, write_geojson)
    from .model import load_model
    from .zoning import read_events_csv
    model = load_model(args.model)
    net, zones, idx = _load_context(args, model)
    hist = read_events_csv(args.history, net)
    t1 = args.from_day
    n_weeks = max(1, int(round(args.horizon / 7.0)))
    state = model.compensator_state()
    pred = np.stack([expected_counts(state, hist, t1 + 7 * w, t1 + 7 * (w + 1), net, zones,
                                     "frozen", args.branching, idx) for w in range(n_weeks)]) \
        if args.horizon == 7 * n_weeks else \
        expected_counts(state, hist, t1, t1 + args.horizon, net, zones, "frozen", args.branching, idx)[None]
    obs = weekly_counts(hist, t1, len(pred), model.marks.n_marks) if hist.t.max(initial=-np.inf) >= t1 else None
    _out_dir(args.out)
    write_forecast_csv(t1, pred, obs, args.out)
    label = "branching" if args.branching else "frozen"
    print(f"forecast mode={label} total_expected={pred.sum()!r}")
    if args.field:
        if model.kind == "etas":
            raise StructuralError("intensity fields are defined for the network models only")
        crime = crime_index(args.crime) if args.crime else None
        past = hist.subset(hist.t < t1)
        f = intensity_field(model.state(), past, t1, net, zones, args.step_km, crime=crime, idx=idx)
        _out_dir(args.field)
        write_geojson(f, args.field, args.crime or "all", net)
        print(f"field points={len(f['edge'])}")


def cmd_evaluate(args):
    from .evaluation import (aic, cumulative_fit_curve, heldout_loglik, max_relative_deviation,
                             persistence_forecast, weekly_counts, weekly_expected, weekly_mae,
                             windowed_loglik, write_curve_csv, write_metrics_csv)
    from .model import load_model
    from .zoning import read_events_csv
    model = load_model(args.model)
    config = _train_config(args, model)
    net, zones, idx = _load_context(args, model)
    train = read_events_csv(args.train, net)
    T = float(model.meta.get("T", _default_T(train)))
    frequent = config.frequent_marks or None
    rows = []
    Ltr = windowed_loglik(model, train, T, net, zones, config.window_days, idx, config.r_max_km,
                          history_days=config.window_history_days)
    k = model.n_trainable()
    rows += [("loglik", "train", Ltr), ("aic", "train", aic(Ltr, k)), ("n_params", "train", k)]
    cs = model.compensator_state()
    nm = model.marks.n_marks
    n_in = int(T // 7)
    if n_in:
        pred = weekly_expected(cs, train, 0.0, n_in, net, zones, "in_sample", idx=idx)
        mae = weekly_mae(pred, weekly_counts(train, 0.0, n_in, nm), frequent)
        rows += [("mae_in_sample", g, v) for g, v in mae.items()]
    t, N, lam = cumulative_fit_curve(cs, train, T, net, zones, config.window_days, idx,
                                     config.window_history_days)
    rows.append(("max_rel_cumulative_deviation", "train", max_relative_deviation(N, lam)))
    curve_path = args.curve or os.path.splitext(args.out)[0] + "_cumulative.csv"
    _out_dir(curve_path)
    write_curve_csv(t, N, lam, curve_path)
    if args.test:
        test = read_events_csv(args.test, net)
        T_end = args.T_end if args.T_end is not None else _default_T(test)
        both = type(train).concat([train, test])
        Lte = heldout_loglik(model, train, test, T, T_end, net, zones, idx, config.window_days,
                             config.r_max_km)
        rows.append(("loglik", "test", Lte))
        n_out = int((T_end - T) // 7)
        if n_out:
            obs = weekly_counts(test, T, n_out, nm)
            pred = weekly_expected(cs, both, T, n_out, net, zones, "frozen", idx=idx)
            rows += [("mae_out_of_sample", g, v) for g, v in weekly_mae(pred, obs, frequent).items()]
            series = weekly_counts(both, T - 7, n_out + 1, nm)
            pers = persistence_forecast(series)
            rows += [("mae_persistence", g, v) for g, v in weekly_mae(pers, obs, frequent).items()]
    d = _out_dir(args.out)
    write_metrics_csv(rows, args.out)
    _echo_config(config, d)
    for m, g, v in rows:
        print(f"{m},{g},{v!r}")


def cmd_analyze(args):
    from .analysis import (build_mark_network, detect_communities, expected_triggered,
                           reduced_model_importance, write_communities, write_edge_list,
                           write_importance, write_triggered)
    from .model import load_model
    from .zoning import read_events_csv
    model = load_model(args.model)
    os.makedirs(args.out_dir, exist_ok=True)
    alpha = model.compensator_state().alpha
    mnet = detect_communities(build_mark_network(alpha, args.threshold), args.seed or 0)
    write_edge_list(mnet, os.path.join(args.out_dir, "mark_network.csv"))
    write_communities(mnet.communities, os.path.join(args.out_dir, "communities.csv"), mnet.modularity)
    totals, ranking = expected_triggered(alpha)
    write_triggered(totals, ranking, os.path.join(args.out_dir, "triggered.csv"), model.marks)
    print(f"edges={len(mnet.edges)} communities={int(mnet.communities.max()) + 1} modularity={mnet.modularity!r}")
    if args.train and args.test:
        config = _train_config(args, model)
        net, zones, idx = _load_context(args, model)
        train = read_events_csv(args.train, net)
        test = read_events_csv(args.test, net)
        T = float(model.meta.get("T", _default_T(train)))
        T_end = args.T_end if args.T_end is not None else _default_T(test)
        rows = reduced_model_importance(model, train, T, test, T_end, net, zones, config.window_days,
                                        config.frequent_marks or None, idx, config.r_max_km,
                                        history_days=config.window_history_days)
        write_importance(rows, os.path.join(args.out_dir, "importance.csv"))
        top = max(rows, key=lambda r: r["delta_neg_test_ll"])
        print(f"most_important_mark={top['mark']} delta_neg_test_ll={top['delta_neg_test_ll']!r}")
    _echo_config(_train_config(args, model), args.out_dir)


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="netpp", description="Network spatio-temporal Hawkes toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    s = sub.add_parser("build-network", help="read node/edge CSVs into a network file")
    s.add_argument("--nodes", required=True)
    s.add_argument("--edges", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ref-lon", type=float)
    s.add_argument("--ref-lat", type=float)
    s.set_defaults(func=cmd_build_network)

    s = sub.add_parser("prepare", help="snap, zone-label and mark raw events")
    s.add_argument("--net", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--samples-per-edge", type=int, default=5)
    s.add_argument("--max-snap-km", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--zones-out")
    s.set_defaults(func=cmd_prepare)

    for name, fn, text in (("fit", cmd_fit, "fit a model"), ("crossval", cmd_crossval, "choose the head count")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--net", required=True)
        s.add_argument("--zones", help="zone fractions (default: <events>_zones.csv)")
        s.add_argument("--events", required=True)
        s.add_argument("--config")
        s.add_argument("--T", type=float, help="end of the observation period (days)")
        s.add_argument("--epochs", type=int)
        s.add_argument("--heads", type=int)
        s.add_argument("--model", dest="model_kind", choices=("gat", "free", "etas"))
        s.add_argument("--out", required=True)
        common(s)
        s.set_defaults(func=fn)
        if name == "fit":
            s.add_argument("--curve")
        else:
            s.add_argument("--Rs", type=_csv_ints, default=[2, 4, 6, 8, 12, 16])
            s.add_argument("--folds", type=int, default=4)

    s = sub.add_parser("simulate", help="simulate events from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--net")
    s.add_argument("--zones")
    s.add_argument("--with-parent", action="store_true")
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("predict", help="expected counts after a forecast origin")
    s.add_argument("--model", required=True)
    s.add_argument("--history", required=True)
    s.add_argument("--from", dest="from_day", type=float, required=True)
    s.add_argument("--horizon", type=float, default=7.0)
    s.add_argument("--branching", action="store_true", help="add offspring of predicted events")
    s.add_argument("--out", required=True)
    s.add_argument("--field")
    s.add_argument("--crime")
    s.add_argument("--step-km", type=float, default=0.05)
    s.add_argument("--net")
    s.add_argument("--zones")
    common(s)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="likelihoods, AIC, MAE and cumulative fit")
    s.add_argument("--model", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--test")
    s.add_argument("--T-end", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--curve")
    s.add_argument("--config")
    s.add_argument("--net")
    s.add_argument("--zones")
    common(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", help="mark network, communities, rankings, importance")
    s.add_argument("--model", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--T-end", type=float)
    s.add_argument("--config")
    s.add_argument("--net")
    s.add_argument("--zones")
    common(s)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NetppError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: code={exc.code} message={msg}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: code=STRUCTURAL message=file not found: {exc.filename}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
