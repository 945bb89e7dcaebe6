"""Functional zones from landmarks, the crime-landmark mark space, and events."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import StructuralError
from .network import project_lonlat, snap_points

CRIMES = ("assault", "subtraction", "others")
LANDMARKS = ("financial", "industrial", "market", "nightclub", "police", "restaurant", "taxi")


@dataclass(frozen=True)
class MarkSpace:
    """Marks are (crime, landmark) pairs laid out row-major, 0-based.

    Crime and landmark categories are 1-based as in the source data.
    """

    n_crime: int = len(CRIMES)
    n_landmark: int = len(LANDMARKS)

    @property
    def n_marks(self):
        return self.n_crime * self.n_landmark

    @property
    def dim(self):
        return self.n_crime + self.n_landmark

    def make_mark(self, c, l):
        c = np.asarray(c)
        l = np.asarray(l)
        if np.any((c < 1) | (c > self.n_crime)) or np.any((l < 1) | (l > self.n_landmark)):
            raise StructuralError(f"crime/landmark out of range: {c}, {l}")
        m = (c - 1) * self.n_landmark + (l - 1)
        return int(m) if m.ndim == 0 else m.astype(np.int64)

    def unmake_mark(self, m):
        m = np.asarray(m)
        if np.any((m < 0) | (m >= self.n_marks)):
            raise StructuralError(f"mark out of range: {m}")
        c, l = m // self.n_landmark + 1, m % self.n_landmark + 1
        if m.ndim == 0:
            return int(c), int(l)
        return c, l

    def landmark_of(self, m):
        return np.asarray(m) % self.n_landmark + 1

    def features(self):
        """One-hot crime block followed by one-hot landmark block, one row per mark."""
        X = np.zeros((self.n_marks, self.dim))
        for m in range(self.n_marks):
            c, l = self.unmake_mark(m)
            X[m, c - 1] = 1.0
            X[m, self.n_crime + l - 1] = 1.0
        return X

    def name(self, m):
        c, l = self.unmake_mark(m)
        crime = CRIMES[c - 1] if self.n_crime == len(CRIMES) else f"c{c}"
        lm = LANDMARKS[l - 1] if self.n_landmark == len(LANDMARKS) else f"l{l}"
        return f"{crime}x{lm}"


DEFAULT_MARKS = MarkSpace()


def make_mark(c, l):
    return DEFAULT_MARKS.make_mark(c, l)


def unmake_mark(m):
    return DEFAULT_MARKS.unmake_mark(m)


@dataclass
class Landmarks:
    """Landmark table: ids, planar positions (km) and 1-based categories."""

    ids: np.ndarray
    xy: np.ndarray
    category: np.ndarray
    n_categories: int = len(LANDMARKS)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.category = np.asarray(self.category, dtype=np.int64)
        if np.any((self.category < 1) | (self.category > self.n_categories)):
            raise StructuralError("landmark category out of range")
        # sort by id so the nearest-neighbour tie-break is positional
        order = np.argsort(self.ids, kind="stable")
        self.ids, self.xy, self.category = self.ids[order], self.xy[order], self.category[order]

    def __len__(self):
        return len(self.ids)


def label_points(points, landmarks, k=5):
    """Majority landmark category among the ``k`` nearest landmarks.

    Distance ties at the k-th neighbour go to the lowest landmark id; vote ties
    go to the lowest category index.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(landmarks)
    if k < 1:
        raise StructuralError("k must be at least 1")
    if n < k:
        raise StructuralError(f"need at least k={k} landmarks, have {n}")
    kq = min(n, k + 1)
    tree = cKDTree(landmarks.xy)
    dist, ind = tree.query(pts, k=kq)
    dist = dist.reshape(len(pts), kq)
    ind = ind.reshape(len(pts), kq)
    out = np.empty(len(pts), dtype=np.int64)
    ncat = landmarks.n_categories
    for i in range(len(pts)):
        if kq > k and dist[i, k] > dist[i, k - 1]:
            chosen = ind[i, :k]
        else:
            # tie (or no spare neighbour): settle exactly on the full candidate set
            d = np.hypot(*(landmarks.xy - pts[i]).T)
            chosen = np.lexsort((np.arange(n), d))[:k]
        votes = np.bincount(landmarks.category[chosen], minlength=ncat + 1)[1:]
        out[i] = int(np.argmax(votes)) + 1
    return out


def label_point(point, landmarks, k=5):
    return int(label_points(np.asarray(point, dtype=float)[None], landmarks, k)[0])


def label_edges(net, landmarks, k=5, samples_per_edge=5):
    """Fractional zone membership of each edge, ``(n_edges, n_categories)``.

    Every edge is sampled at the midpoints of ``samples_per_edge`` equal
    pieces; the fraction for zone ``l`` is the share of samples labelled ``l``.
    """
    if samples_per_edge < 1:
        raise StructuralError("samples_per_edge must be at least 1")
    s = samples_per_edge
    frac = (np.arange(s) + 0.5) / s
    e = np.repeat(np.arange(net.n_edges), s)
    offs = np.tile(frac, net.n_edges) * net.lengths[e]
    pts = net.location_xy(e, offs)
    labels = label_points(pts, landmarks, k).reshape(net.n_edges, s)
    ncat = landmarks.n_categories
    out = np.zeros((net.n_edges, ncat))
    for l in range(1, ncat + 1):
        out[:, l - 1] = (labels == l).sum(axis=1) / s
    return out


# --------------------------------------------------------------------- events

@dataclass(frozen=True)
class Event:
    t_days: float
    edge_id: int
    offset_km: float
    crime: int
    landmark: int
    mark: int
    lon: float = float("nan")
    lat: float = float("nan")


def _arr(x, dtype):
    return np.asarray(x, dtype=dtype).reshape(-1)


@dataclass
class EventSet:
    """Column store of processed events, sorted by time.

    ``x``/``y`` hold the planar position of the network location; ``lon``,
    ``lat`` and ``snap_km`` keep the raw record for QA.  ``parent`` is the
    index of the triggering event for simulated data (-1 for background).
    """

    t: np.ndarray
    edge: np.ndarray
    offset: np.ndarray
    crime: np.ndarray
    landmark: np.ndarray
    marks: MarkSpace = field(default_factory=MarkSpace)
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    lon: np.ndarray | None = None
    lat: np.ndarray | None = None
    snap_km: np.ndarray | None = None
    parent: np.ndarray | None = None

    def __post_init__(self):
        self.t = _arr(self.t, float)
        n = len(self.t)
        self.edge = _arr(self.edge, np.int64)
        self.offset = _arr(self.offset, float)
        self.crime = _arr(self.crime, np.int64)
        self.landmark = _arr(self.landmark, np.int64)
        for name in ("edge", "offset", "crime", "landmark"):
            if len(getattr(self, name)) != n:
                raise StructuralError(f"event column {name} has the wrong length")
        nan = np.full(n, np.nan)
        self.x = nan.copy() if self.x is None else _arr(self.x, float)
        self.y = nan.copy() if self.y is None else _arr(self.y, float)
        self.lon = nan.copy() if self.lon is None else _arr(self.lon, float)
        self.lat = nan.copy() if self.lat is None else _arr(self.lat, float)
        self.snap_km = np.zeros(n) if self.snap_km is None else _arr(self.snap_km, float)
        if self.parent is not None:
            self.parent = _arr(self.parent, np.int64)
        self.mark = self.marks.make_mark(self.crime, self.landmark) if n else np.zeros(0, np.int64)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        i = int(i)
        return Event(float(self.t[i]), int(self.edge[i]), float(self.offset[i]),
                     int(self.crime[i]), int(self.landmark[i]), int(self.mark[i]),
                     float(self.lon[i]), float(self.lat[i]))

    def is_sorted(self):
        return bool(np.all(np.diff(self.t) >= 0))

    def check_sorted(self):
        if not self.is_sorted():
            raise StructuralError("events are not sorted by time")

    def subset(self, sel):
        if not isinstance(sel, slice):
            sel = np.asarray(sel)
        return EventSet(self.t[sel], self.edge[sel], self.offset[sel], self.crime[sel],
                        self.landmark[sel], self.marks, self.x[sel], self.y[sel],
                        self.lon[sel], self.lat[sel], self.snap_km[sel],
                        None if self.parent is None else self.parent[sel])

    def shifted(self, dt):
        out = self.subset(slice(None))
        out.t = out.t + dt
        return out

    def with_locations(self, net):
        """Fill planar coordinates from the network locations."""
        out = self.subset(slice(None))
        if len(out):
            xy = net.location_xy(out.edge, out.offset)
            out.x, out.y = xy[:, 0].copy(), xy[:, 1].copy()
        return out

    @staticmethod
    def concat(sets):
        sets = list(sets)
        if not sets:
            raise StructuralError("nothing to concatenate")
        cols = {}
        for name in ("t", "edge", "offset", "crime", "landmark", "x", "y", "lon", "lat", "snap_km"):
            cols[name] = np.concatenate([getattr(s, name) for s in sets])
        parent = None
        if all(s.parent is not None for s in sets):
            parent = np.concatenate([s.parent for s in sets])
        out = EventSet(marks=sets[0].marks, parent=parent, **cols)
        order = np.argsort(out.t, kind="stable")
        return out.subset(order) if not out.is_sorted() else out

    @staticmethod
    def empty(marks=DEFAULT_MARKS):
        z = np.zeros(0)
        return EventSet(z, z.astype(np.int64), z, z.astype(np.int64), z.astype(np.int64), marks)


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise StructuralError(f"{path}: header must contain {','.join(required)}")
        return list(reader)


def _category(value, names, what):
    v = value.strip().lower()
    if v in names:
        return names.index(v) + 1
    try:
        i = int(v)
    except ValueError:
        raise StructuralError(f"unknown {what} category {value!r}") from None
    if not 1 <= i <= len(names):
        raise StructuralError(f"{what} category {i} out of range")
    return i


def read_landmarks_csv(path, net):
    """``id,lon,lat,category`` with category names in the documented order."""
    rows = _read_rows(path, ("id", "lon", "lat", "category"))
    try:
        ids = [int(r["id"]) for r in rows]
        lon = np.array([float(r["lon"]) for r in rows])
        lat = np.array([float(r["lat"]) for r in rows])
    except ValueError as exc:
        raise StructuralError(f"{path}: {exc}") from exc
    cat = [_category(r["category"], LANDMARKS, "landmark") for r in rows]
    ref_lon, ref_lat = net.ref_lonlat
    x, y = project_lonlat(lon, lat, ref_lat, ref_lon) if rows else (np.zeros(0), np.zeros(0))
    return Landmarks(ids, np.column_stack([x, y]), cat)


def read_raw_events_csv(path):
    """``t_days,lon,lat,crime``; returns arrays sorted by time."""
    rows = _read_rows(path, ("t_days", "lon", "lat", "crime"))
    try:
        t = np.array([float(r["t_days"]) for r in rows])
        lon = np.array([float(r["lon"]) for r in rows])
        lat = np.array([float(r["lat"]) for r in rows])
    except ValueError as exc:
        raise StructuralError(f"{path}: {exc}") from exc
    crime = np.array([_category(r["crime"], CRIMES, "crime") for r in rows], dtype=np.int64)
    order = np.argsort(t, kind="stable")
    return t[order], lon[order], lat[order], crime[order]


def prepare_events(t, lon, lat, crime, net, landmarks, k=5, max_snap_km=None):
    """Snap raw records to the network and attach zone labels and marks.

    The zone label is taken at the snapped network position.  Records farther
    than ``max_snap_km`` from any street are dropped when a threshold is given.
    """
    ref_lon, ref_lat = net.ref_lonlat
    x, y = project_lonlat(lon, lat, ref_lat, ref_lon)
    edge, off, snap = snap_points(np.column_stack([x, y]), net)
    keep = np.ones(len(t), dtype=bool) if max_snap_km is None else snap <= max_snap_km
    edge, off, snap = edge[keep], off[keep], snap[keep]
    xy = net.location_xy(edge, off)
    labels = label_points(xy, landmarks, k) if len(xy) else np.zeros(0, np.int64)
    return EventSet(np.asarray(t)[keep], edge, off, np.asarray(crime)[keep], labels,
                    x=xy[:, 0], y=xy[:, 1], lon=np.asarray(lon)[keep],
                    lat=np.asarray(lat)[keep], snap_km=snap)


PROCESSED_FIELDS = ("t_days", "lon", "lat", "crime", "edge_id", "offset_km", "landmark", "mark", "snap_km")


def write_events_csv(events, path, with_parent=False):
    fields = list(PROCESSED_FIELDS) + (["parent_idx"] if with_parent else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for i in range(len(events)):
            row = [repr(float(events.t[i])), repr(float(events.lon[i])), repr(float(events.lat[i])),
                   CRIMES[events.crime[i] - 1], int(events.edge[i]), repr(float(events.offset[i])),
                   LANDMARKS[events.landmark[i] - 1], int(events.mark[i]),
                   repr(float(events.snap_km[i]))]
            if with_parent:
                row.append(-1 if events.parent is None else int(events.parent[i]))
            w.writerow(row)


def read_events_csv(path, net=None):
    """Read a processed events file; validates marks against crime/landmark."""
    rows = _read_rows(path, PROCESSED_FIELDS)
    try:
        t = [float(r["t_days"]) for r in rows]
        edge = [int(r["edge_id"]) for r in rows]
        off = [float(r["offset_km"]) for r in rows]
        lon = [float(r["lon"]) for r in rows]
        lat = [float(r["lat"]) for r in rows]
        snap = [float(r["snap_km"]) for r in rows]
        mark = np.array([int(r["mark"]) for r in rows], dtype=np.int64)
        parent = [int(r["parent_idx"]) for r in rows] if rows and "parent_idx" in rows[0] else None
    except ValueError as exc:
        raise StructuralError(f"{path}: {exc}") from exc
    crime = [_category(r["crime"], CRIMES, "crime") for r in rows]
    lm = [_category(r["landmark"], LANDMARKS, "landmark") for r in rows]
    ev = EventSet(t, edge, off, crime, lm, lon=lon, lat=lat, snap_km=snap, parent=parent)
    if not np.array_equal(ev.mark, mark):
        raise StructuralError(f"{path}: mark column disagrees with crime/landmark")
    ev.check_sorted()
    if net is not None:
        if len(ev) and (ev.edge.min() < 0 or ev.edge.max() >= net.n_edges):
            raise StructuralError(f"{path}: edge id outside the network")
        if np.any(ev.offset < 0) or np.any(ev.offset > net.lengths[ev.edge] * (1 + 1e-12)):
            raise StructuralError(f"{path}: offset outside its edge")
        ev = ev.with_locations(net)
    return ev


def write_zones_csv(zone_fractions, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_id", *LANDMARKS[: zone_fractions.shape[1]]])
        for e, row in enumerate(zone_fractions):
            w.writerow([e, *[repr(float(v)) for v in row]])


def read_zones_csv(path, n_edges=None):
    rows = _read_rows(path, ("edge_id",))
    names = [n for n in rows[0] if n != "edge_id"] if rows else list(LANDMARKS)
    try:
        frac = np.array([[float(r[n]) for n in names] for r in rows])
        ids = np.array([int(r["edge_id"]) for r in rows])
    except ValueError as exc:
        raise StructuralError(f"{path}: {exc}") from exc
    if not np.array_equal(np.sort(ids), np.arange(len(ids))):
        raise StructuralError(f"{path}: edge ids must be dense")
    frac = frac[np.argsort(ids)]
    if n_edges is not None and len(frac) != n_edges:
        raise StructuralError(f"{path}: {len(frac)} rows for {n_edges} edges")
    return frac
