"""Street network geometry: projection, snapping and network distance.

Events live on the edges of an undirected street network.  A position is an
``(edge_id, offset_km)`` pair measured from the edge's first endpoint.  The
distance between two positions is the shortest route along the network; on a
shared edge it is simply the offset difference.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import StructuralError

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
NET_HEADER = "NETPP-NET v1"


def project_lonlat(lon_deg, lat_deg, ref_lat_deg, ref_lon_deg=0.0):
    """Equirectangular projection to planar kilometres.

    ``x = R cos(ref_lat) dlon``, ``y = R dlat`` with angles in radians and
    differences taken against ``(ref_lon_deg, ref_lat_deg)``.  Works on
    scalars and arrays.
    """
    lon = np.asarray(lon_deg, dtype=float)
    lat = np.asarray(lat_deg, dtype=float)
    if np.any(np.abs(lat) >= 89.0):
        raise StructuralError("latitude must satisfy |lat| < 89 degrees")
    k = math.pi / 180.0
    x = EARTH_RADIUS_KM * math.cos(ref_lat_deg * k) * (lon - ref_lon_deg) * k
    y = EARTH_RADIUS_KM * (lat - ref_lat_deg) * k
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def unproject_xy(x_km, y_km, ref_lat_deg, ref_lon_deg=0.0):
    """Inverse of :func:`project_lonlat`."""
    k = math.pi / 180.0
    x = np.asarray(x_km, dtype=float)
    y = np.asarray(y_km, dtype=float)
    lon = ref_lon_deg + x / (EARTH_RADIUS_KM * math.cos(ref_lat_deg * k) * k)
    lat = ref_lat_deg + y / (EARTH_RADIUS_KM * k)
    if lon.ndim == 0:
        return float(lon), float(lat)
    return lon, lat


@dataclass(frozen=True)
class NetworkLocation:
    edge_id: int
    offset_km: float


class StreetNetwork:
    """Immutable undirected street network with straight edges.

    Parameters
    ----------
    node_xy : (N, 2) array
        Planar node coordinates in km.
    edges : (E, 2) int array
        Endpoint node ids; edge ``e`` runs from ``edges[e, 0]`` to ``edges[e, 1]``.
    lengths : (E,) array, optional
        Edge lengths in km.  Defaults to the planar endpoint distance.
    node_lonlat : (N, 2) array, optional
    ref_lonlat : (lon, lat) of the projection origin, optional
    length_rtol : float
        Relative disagreement between stated and planar length that gets
        logged (curved streets are common, so this never raises).
    """

    def __init__(self, node_xy, edges, lengths=None, node_lonlat=None,
                 ref_lonlat=(0.0, 0.0), length_rtol=0.05):
        node_xy = np.array(node_xy, dtype=float).reshape(-1, 2)
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        n_nodes = len(node_xy)
        if len(edges) and (edges.min() < 0 or edges.max() >= n_nodes):
            raise StructuralError("edge endpoint refers to an unknown node id")
        planar = np.hypot(*(node_xy[edges[:, 1]] - node_xy[edges[:, 0]]).T) if len(edges) else np.zeros(0)
        if lengths is None:
            lengths = planar.copy()
        lengths = np.array(lengths, dtype=float).reshape(-1)
        if len(lengths) != len(edges):
            raise StructuralError("lengths and edges differ in size")
        if np.any(~np.isfinite(lengths)) or np.any(lengths <= 0):
            bad = int(np.flatnonzero(~(lengths > 0))[0]) if np.any(~(lengths > 0)) else -1
            raise StructuralError(f"edge {bad} has non-positive length")
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(lengths - planar) / lengths
        n_off = int(np.sum(rel > length_rtol))
        if n_off:
            log.warning("%d edges disagree with planar length by more than %.0f%%",
                        n_off, 100 * length_rtol)

        self.node_xy = node_xy
        self.edges = edges
        self.lengths = lengths
        self.node_lonlat = None if node_lonlat is None else np.array(node_lonlat, dtype=float).reshape(-1, 2)
        self.ref_lonlat = (float(ref_lonlat[0]), float(ref_lonlat[1]))
        for arr in (self.node_xy, self.edges, self.lengths):
            arr.setflags(write=False)

        adjacency = [[] for _ in range(n_nodes)]
        for e, (u, v) in enumerate(edges):
            adjacency[u].append((e, int(v)))
            if u != v:
                adjacency[v].append((e, int(u)))
        self.adjacency = adjacency

        # parallel edges collapse to their shortest member for routing
        u, v = edges[:, 0], edges[:, 1]
        keep = u != v
        a, b, w = np.minimum(u, v)[keep], np.maximum(u, v)[keep], lengths[keep]
        order = np.lexsort((w, b, a))
        a, b, w = a[order], b[order], w[order]
        first = np.ones(len(a), dtype=bool)
        first[1:] = (a[1:] != a[:-1]) | (b[1:] != b[:-1])
        a, b, w = a[first], b[first], w[first]
        self._graph = coo_matrix((w, (a, b)), shape=(n_nodes, n_nodes)).tocsr()

    @property
    def n_nodes(self):
        return len(self.node_xy)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def total_length(self):
        return float(self.lengths.sum())

    def __repr__(self):
        return f"StreetNetwork(n_nodes={self.n_nodes}, n_edges={self.n_edges})"

    def check_location(self, loc):
        e = int(loc.edge_id)
        if e < 0 or e >= self.n_edges:
            raise StructuralError(f"invalid edge id {e}")
        if not (0.0 <= loc.offset_km <= self.lengths[e]):
            raise StructuralError(f"offset {loc.offset_km} outside edge {e}")

    def location_xy(self, edge_ids, offsets):
        """Planar coordinates of network positions (straight-edge interpolation)."""
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        frac = np.asarray(offsets, dtype=float) / self.lengths[edge_ids]
        a = self.node_xy[self.edges[edge_ids, 0]]
        b = self.node_xy[self.edges[edge_ids, 1]]
        return a + frac[..., None] * (b - a)

    def components(self):
        """Connected-component label per node."""
        from scipy.sparse.csgraph import connected_components
        _, labels = connected_components(self._graph, directed=False)
        return labels

    def shortest_paths(self, sources, limit=None):
        """Dijkstra rows for the given source nodes (``inf`` when unreachable)."""
        kw = {} if limit is None else {"limit": float(limit)}
        return dijkstra(self._graph, directed=False, indices=np.asarray(sources, dtype=np.int64), **kw)


class DistanceIndex:
    """Memoised single-source node distances with optional radius cutoff.

    Rows are computed on demand and kept in a bounded LRU cache.  Lookups are
    safe from several threads; insertions serialise on an internal lock.
    Distances beyond ``r_max_km`` are reported as ``inf``.
    """

    def __init__(self, net, r_max_km=None, max_cached=4096):
        self.net = net
        self.r_max_km = None if r_max_km is None else float(r_max_km)
        self.max_cached = int(max_cached)
        self._rows = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._rows)

    def node_distances(self, node):
        return self.rows([node])[0]

    def rows(self, nodes):
        """Distance rows for ``nodes`` as a ``(len(nodes), n_nodes)`` array."""
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        with self._lock:
            missing = [int(n) for n in dict.fromkeys(nodes.tolist()) if n not in self._rows]
        if missing:
            fresh = self.net.shortest_paths(missing, self.r_max_km)
            with self._lock:
                for n, row in zip(missing, fresh):
                    row.setflags(write=False)
                    self._rows[n] = row
                    self._rows.move_to_end(n)
        with self._lock:
            out = np.empty((len(nodes), self.net.n_nodes))
            for i, n in enumerate(nodes.tolist()):
                out[i] = self._rows[n]
                self._rows.move_to_end(n)
            while len(self._rows) > max(self.max_cached, len(set(nodes.tolist()))):
                self._rows.popitem(last=False)
        return out


def _index(net, idx):
    return idx if idx is not None else DistanceIndex(net, max_cached=8)


def net_distance(s, s2, net, idx=None):
    """Shortest network distance between two on-edge positions.

    On a shared edge the distance is ``|offset - offset2|``.  Otherwise it is
    the best of the four endpoint-to-endpoint routes.  Disconnected positions
    are ``inf`` apart.
    """
    net.check_location(s)
    net.check_location(s2)
    e1, e2 = int(s.edge_id), int(s2.edge_id)
    if e1 == e2:
        return abs(float(s.offset_km) - float(s2.offset_km))
    a, b = net.edges[e1]
    c, d = net.edges[e2]
    rows = _index(net, idx).rows([a, b])
    o1, l1 = float(s.offset_km), float(net.lengths[e1])
    o2, l2 = float(s2.offset_km), float(net.lengths[e2])
    return float(min(
        o1 + rows[0, c] + o2,
        o1 + rows[0, d] + (l2 - o2),
        (l1 - o1) + rows[1, c] + o2,
        (l1 - o1) + rows[1, d] + (l2 - o2),
    ))


def location_distances(net, edges_a, offs_a, edges_b, offs_b, idx=None):
    """Matrix of network distances between two sets of positions."""
    edges_a = np.asarray(edges_a, dtype=np.int64)
    edges_b = np.asarray(edges_b, dtype=np.int64)
    offs_a = np.asarray(offs_a, dtype=float)
    offs_b = np.asarray(offs_b, dtype=float)
    idx = _index(net, idx)
    ua, va = net.edges[edges_a, 0], net.edges[edges_a, 1]
    ub, vb = net.edges[edges_b, 0], net.edges[edges_b, 1]
    la, lb = net.lengths[edges_a], net.lengths[edges_b]
    nodes, inv = np.unique(np.concatenate([ua, va]), return_inverse=True)
    rows = idx.rows(nodes)
    pu, pv = inv[: len(ua)], inv[len(ua):]
    oa, ra = offs_a[:, None], (la - offs_a)[:, None]
    ob, rb = offs_b[None, :], (lb - offs_b)[None, :]
    d = oa + rows[np.ix_(pu, ub)] + ob
    np.minimum(d, oa + rows[np.ix_(pu, vb)] + rb, out=d)
    np.minimum(d, ra + rows[np.ix_(pv, ub)] + ob, out=d)
    np.minimum(d, ra + rows[np.ix_(pv, vb)] + rb, out=d)
    same = edges_a[:, None] == edges_b[None, :]
    if same.any():
        d[same] = np.abs(oa - ob)[same]
    return d


def node_distances_from(net, edge_id, offset_km, idx=None):
    """Distance from one on-edge position to every node."""
    a, b = net.edges[int(edge_id)]
    rows = _index(net, idx).rows([a, b])
    return np.minimum(offset_km + rows[0], (net.lengths[int(edge_id)] - offset_km) + rows[1])


def snap_points(points, net, chunk=2048):
    """Snap planar points to their nearest edge segment.

    Returns ``(edge_ids, offsets_km, snap_km)``.  Ties go to the lowest edge
    id.  Offsets are rescaled from the planar segment to the edge's stated
    length.
    """
    if net.n_edges == 0:
        raise StructuralError("cannot snap to an empty network")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a = net.node_xy[net.edges[:, 0]]
    ab = net.node_xy[net.edges[:, 1]] - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    safe = np.where(ab2 > 0, ab2, 1.0)
    out_e = np.empty(len(pts), dtype=np.int64)
    out_f = np.empty(len(pts))
    out_d = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        ap = p[:, None, :] - a[None, :, :]
        f = np.clip(np.einsum("pej,ej->pe", ap, ab) / safe, 0.0, 1.0)
        f[:, ab2 == 0] = 0.0
        diff = ap - f[..., None] * ab[None]
        dist = np.sqrt(np.einsum("pej,pej->pe", diff, diff))
        best = dist.min(axis=1, keepdims=True)
        # lowest id among (numerically) tied edges
        e = np.argmax(dist <= best + 1e-12 * np.maximum(1.0, best), axis=1)
        rows = np.arange(len(p))
        out_e[s:s + chunk] = e
        out_f[s:s + chunk] = f[rows, e]
        out_d[s:s + chunk] = dist[rows, e]
    offsets = np.clip(out_f * net.lengths[out_e], 0.0, net.lengths[out_e])
    return out_e, offsets, out_d


def snap_event(point, net):
    """Snap one planar point; returns ``(NetworkLocation, snap_km)``."""
    e, o, d = snap_points(np.asarray(point, dtype=float)[None], net)
    return NetworkLocation(int(e[0]), float(o[0])), float(d[0])


def zone_street_length(net, zone_fractions):
    """Street length per zone from per-edge fractional zone membership.

    ``zone_fractions`` is ``(n_edges, n_zones)`` with rows summing to one.
    """
    frac = np.asarray(zone_fractions, dtype=float)
    if frac.ndim != 2 or frac.shape[0] != net.n_edges:
        raise StructuralError(
            f"zone fractions must have one row per edge ({net.n_edges}), got {frac.shape}")
    if not np.all(np.isfinite(frac)) or np.any(frac < 0):
        raise StructuralError("zone fractions must be finite and non-negative")
    if not np.allclose(frac.sum(axis=1), 1.0, atol=1e-9):
        raise StructuralError("zone fractions of some edge do not sum to one (missing labels)")
    return frac.T @ net.lengths


# --------------------------------------------------------------------- I/O

def read_network_csv(nodes_path, edges_path, ref_lonlat=None, length_rtol=0.05):
    """Read ``node_id,lon,lat`` and ``edge_id,u,v[,length_km]`` CSV files."""
    with open(nodes_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"node_id", "lon", "lat"} <= set(rows[0]):
        raise StructuralError(f"{nodes_path}: expected header node_id,lon,lat")
    try:
        ids = np.array([int(r["node_id"]) for r in rows])
        lonlat = np.array([[float(r["lon"]), float(r["lat"])] for r in rows])
    except ValueError as exc:
        raise StructuralError(f"{nodes_path}: {exc}") from exc
    order = np.argsort(ids)
    if not np.array_equal(ids[order], np.arange(len(ids))):
        raise StructuralError(f"{nodes_path}: node ids must be dense and 0-based")
    lonlat = lonlat[order]

    with open(edges_path, newline="", encoding="utf-8") as fh:
        erows = list(csv.DictReader(fh))
    if erows and not {"edge_id", "u", "v"} <= set(erows[0]):
        raise StructuralError(f"{edges_path}: expected header edge_id,u,v[,length_km]")
    try:
        eids = np.array([int(r["edge_id"]) for r in erows], dtype=np.int64)
        uv = np.array([[int(r["u"]), int(r["v"])] for r in erows], dtype=np.int64).reshape(-1, 2)
        has_len = bool(erows) and "length_km" in erows[0]
        lens = [r.get("length_km", "") for r in erows]
    except ValueError as exc:
        raise StructuralError(f"{edges_path}: {exc}") from exc
    eorder = np.argsort(eids)
    if not np.array_equal(eids[eorder], np.arange(len(eids))):
        raise StructuralError(f"{edges_path}: edge ids must be dense and 0-based")
    uv = uv[eorder]

    if ref_lonlat is None:
        ref_lonlat = (float(lonlat[:, 0].mean()), float(lonlat[:, 1].mean()))
    x, y = project_lonlat(lonlat[:, 0], lonlat[:, 1], ref_lonlat[1], ref_lonlat[0])
    xy = np.column_stack([x, y])
    lengths = None
    if has_len:
        planar = np.hypot(*(xy[uv[:, 1]] - xy[uv[:, 0]]).T)
        lengths = np.array([float(lens[i]) if lens[i].strip() else planar[j]
                            for j, i in enumerate(eorder)])
    return StreetNetwork(xy, uv, lengths, node_lonlat=lonlat, ref_lonlat=ref_lonlat,
                         length_rtol=length_rtol)


def save_network(net, path):
    body = {
        "ref_lonlat": list(net.ref_lonlat),
        "node_xy": net.node_xy.tolist(),
        "node_lonlat": None if net.node_lonlat is None else net.node_lonlat.tolist(),
        "edges": net.edges.tolist(),
        "lengths": net.lengths.tolist(),
    }
    Path(path).write_text(NET_HEADER + "\n" + json.dumps(body) + "\n", encoding="utf-8")


def load_network(path):
    text = Path(path).read_text(encoding="utf-8")
    header, _, body = text.partition("\n")
    if header.strip() != NET_HEADER:
        raise StructuralError(f"{path}: not a {NET_HEADER} file")
    try:
        d = json.loads(body)
        return StreetNetwork(d["node_xy"], d["edges"], d["lengths"],
                             node_lonlat=d.get("node_lonlat"), ref_lonlat=d["ref_lonlat"],
                             length_rtol=float("inf"))
    except (KeyError, ValueError, TypeError) as exc:
        raise StructuralError(f"{path}: corrupt network file ({exc})") from exc
