"""Synthetic networks, zone layouts and coefficient matrices for experiments."""

from __future__ import annotations

import numpy as np

from .attention import assemble_alpha, attention_forward, init_attention
from .network import StreetNetwork
from .zoning import DEFAULT_MARKS


def grid_network(n=20, spacing_km=0.5):
    """``n`` by ``n`` lattice of straight streets."""
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xy = np.column_stack([jj.ravel(), ii.ravel()]).astype(float) * spacing_km
    node = (ii * n + jj)
    horiz = np.column_stack([node[:, :-1].ravel(), node[:, 1:].ravel()])
    vert = np.column_stack([node[:-1, :].ravel(), node[1:, :].ravel()])
    return StreetNetwork(xy, np.vstack([horiz, vert]))


def random_network(n_nodes, n_edges, rng=None, extent_km=2.0, connected=False, curvature=0.0):
    """Random geometric multigraph; lengths may exceed the chord by up to ``curvature``."""
    rng = np.random.default_rng(rng)
    xy = rng.uniform(0, extent_km, size=(n_nodes, 2))
    edges = []
    if connected:
        perm = rng.permutation(n_nodes)
        for i in range(1, n_nodes):
            edges.append((perm[rng.integers(i)], perm[i]))
    while len(edges) < n_edges:
        u, v = rng.integers(n_nodes, size=2)
        if u != v:
            edges.append((u, v))
    edges = np.array(edges[:max(n_edges, len(edges))], dtype=np.int64)
    chord = np.linalg.norm(xy[edges[:, 0]] - xy[edges[:, 1]], axis=1)
    lengths = np.maximum(chord, 1e-3) * (1 + curvature * rng.uniform(size=len(edges)))
    return StreetNetwork(xy, edges, lengths=lengths, length_rtol=np.inf)


def random_zones(n_edges, n_zones=7, rng=None, fractional=False):
    """Per-edge zone fractions; one zone per edge unless ``fractional``."""
    rng = np.random.default_rng(rng)
    if fractional:
        return rng.dirichlet(np.ones(n_zones), size=n_edges)
    frac = np.zeros((n_edges, n_zones))
    frac[np.arange(n_edges), rng.integers(n_zones, size=n_edges)] = 1.0
    return frac


def block_alpha(marks=DEFAULT_MARKS, within=0.08, across=0.005, by="crime"):
    """Coefficients that are large between marks sharing a crime (or landmark) type."""
    m = np.arange(marks.n_marks)
    c, l = marks.unmake_mark(m)
    key = c if by == "crime" else l
    return np.where(key[:, None] == key[None, :], within, across).astype(float)


def gat_alpha(heads=8, hidden=8, strength=0.5, rng=None, marks=DEFAULT_MARKS, temperature=3.0):
    """Coefficients from a random attention layer with constant strength.

    ``temperature`` scales the attention weights so that the chances are far
    from uniform.
    """
    rng = np.random.default_rng(rng)
    params = init_attention(heads, marks.dim, hidden, rng)
    params.W *= temperature
    p = attention_forward(marks.features(), params)
    return assemble_alpha(p, np.full_like(p, strength)), params


def planted_source_alpha(source, marks=DEFAULT_MARKS, base=0.002, strong=0.4):
    """One mark excites all others strongly; everything else is weak."""
    a = np.full((marks.n_marks, marks.n_marks), base)
    a[:, source] = strong / marks.n_marks
    return a
