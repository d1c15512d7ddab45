"""Desk-scale street networks and demand pools for experiments and tests."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .market import OrderPool
from .network import RoadNetwork, haversine_m

M_PER_DEG_LAT = 111_195.0


def grid_city(rows, cols, spacing_m=150.0, *, jitter=0.15, drop_fraction=0.05, one_way_fraction=0.1,
              lon0=-73.99, lat0=40.73, seed=0) -> RoadNetwork:
    """Perturbed-lattice street network, restricted to its largest strongly connected part.

    Nodes sit on a jittered lattice; each lattice edge is dropped with
    `drop_fraction`, turned one-way with `one_way_fraction`, and given a length
    slightly above the straight-line distance.
    """
    rng = np.random.default_rng(seed)
    n = rows * cols
    r, c = np.divmod(np.arange(n), cols)
    m_per_deg_lon = M_PER_DEG_LAT * np.cos(np.radians(lat0))
    x = (c + rng.uniform(-jitter, jitter, n)) * spacing_m
    y = (r + rng.uniform(-jitter, jitter, n)) * spacing_m
    lon = lon0 + x / m_per_deg_lon
    lat = lat0 + y / M_PER_DEG_LAT

    src, dst = [], []
    for i in range(n):
        for j in ((i + 1) if c[i] < cols - 1 else None, (i + cols) if r[i] < rows - 1 else None):
            if j is None or rng.random() < drop_fraction:
                continue
            if rng.random() < one_way_fraction:
                a, b = (i, j) if rng.random() < 0.5 else (j, i)
                src.append(a)
                dst.append(b)
            else:
                src += [i, j]
                dst += [j, i]
    src = np.array(src)
    dst = np.array(dst)
    straight = haversine_m(lon[src], lat[src], lon[dst], lat[dst])
    length = np.round(straight * rng.uniform(1.0, 1.15, len(src)), 3)
    # both directions of a two-way street share one length
    key = {}
    for k, (a, b) in enumerate(zip(src.tolist(), dst.tolist())):
        pair = (min(a, b), max(a, b))
        if pair in key:
            length[k] = length[key[pair]]
        else:
            key[pair] = k

    g = csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    _, labels = connected_components(g, directed=True, connection="strong")
    keep = labels == np.bincount(labels).argmax()
    ids = np.arange(n)
    emask = keep[src] & keep[dst]
    return RoadNetwork(ids[keep], lon[keep], lat[keep], src[emask], dst[emask], length[emask])


def poisson_pool(net: RoadNetwork, rate, start, end, rng, *, origin_weights=None, destination_weights=None,
                 fare=None) -> OrderPool:
    """Poisson request stream at `rate` per second with OD nodes drawn by weight."""
    n = int(rng.poisson(rate * (end - start)))
    times = np.sort(rng.uniform(start, end, n))
    nodes = net.node_ids

    def draw(weights, size):
        if weights is None:
            return nodes[rng.integers(len(nodes), size=size)]
        p = np.asarray(weights, dtype=float)
        return nodes[rng.choice(len(nodes), size=size, p=p / p.sum())]

    o = draw(origin_weights, n)
    d = draw(destination_weights, n)
    same = o == d
    while same.any():
        d[same] = draw(destination_weights, int(same.sum()))
        same = o == d
    return OrderPool(times, o, d, None if fare is None else np.full(n, float(fare)))


def merge_pools(*pools) -> OrderPool:
    t = np.concatenate([p.request_time for p in pools])
    o = np.concatenate([p.origin for p in pools])
    d = np.concatenate([p.destination for p in pools])
    fares = None
    if all(p.fare is not None for p in pools):
        fares = np.concatenate([p.fare for p in pools])
    return OrderPool(t, o, d, fares)


def grid_node_weights(overlay, grid_weights):
    """Spread per-grid weights uniformly over each grid's nodes."""
    w = np.zeros(overlay.net.n_nodes)
    for g in range(overlay.n_grids):
        members = overlay.nodes_in(g)
        if members:
            idx = [overlay.net.index[m] for m in members]
            w[idx] = grid_weights[g] / len(members)
    return w
