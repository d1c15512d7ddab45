"""Road graph, shortest paths, the route cache and the square-grid overlay."""

from __future__ import annotations

import csv
import hashlib
import heapq
import json
import logging
import math
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8

CACHE_MAGIC = b"RIDESIM-ROUTECACHE"
CACHE_VERSION = 1


class NetworkError(ValueError):
    """Malformed or inconsistent network input."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class NoRouteError(LookupError):
    def __init__(self, origin, destination):
        self.origin = origin
        self.destination = destination
        super().__init__(f"no route from {origin} to {destination}")


class StaleCacheError(ValueError):
    pass


@dataclass(frozen=True)
class Route:
    node_sequence: tuple
    leg_lengths: tuple
    total_length: float = field(init=False)

    def __post_init__(self):
        if len(self.leg_lengths) != max(len(self.node_sequence) - 1, 0):
            raise ValueError("leg_lengths must have one entry per consecutive node pair")
        total = 0.0
        for leg in self.leg_lengths:
            total += leg
        object.__setattr__(self, "total_length", total)

    @property
    def origin(self):
        return self.node_sequence[0]

    @property
    def destination(self):
        return self.node_sequence[-1]

    def __len__(self):
        return len(self.node_sequence)


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; works elementwise on arrays."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


class RoadNetwork:
    """Directed weighted road graph.

    Node ids are arbitrary integers; internally nodes are addressed by a
    contiguous index sorted by id, so expanding lower indices first is the same
    as expanding lower node ids first.
    """

    def __init__(self, node_ids, lon, lat, edge_from, edge_to, edge_length, pruned_count=0):
        node_ids = np.asarray(node_ids, dtype=np.int64)
        order = np.argsort(node_ids, kind="stable")
        self.node_ids = node_ids[order]
        self.lon = np.asarray(lon, dtype=float)[order]
        self.lat = np.asarray(lat, dtype=float)[order]
        if len(np.unique(self.node_ids)) != len(self.node_ids):
            raise NetworkError("duplicate node ids")
        self.index = {int(n): i for i, n in enumerate(self.node_ids)}
        self.pruned_count = pruned_count

        src = np.array([self.index[int(u)] for u in edge_from], dtype=np.int64)
        dst = np.array([self.index[int(v)] for v in edge_to], dtype=np.int64)
        length = np.asarray(edge_length, dtype=float)
        # parallel edges collapse to the shortest one
        best = {}
        for s, d, w in zip(src.tolist(), dst.tolist(), length.tolist()):
            if s == d:
                continue
            key = (s, d)
            if key not in best or w < best[key]:
                best[key] = w
        keys = sorted(best)
        self.edge_src = np.array([k[0] for k in keys], dtype=np.int64)
        self.edge_dst = np.array([k[1] for k in keys], dtype=np.int64)
        self.edge_len = np.array([best[k] for k in keys], dtype=float)

        n = len(self.node_ids)
        self.adjacency = [[] for _ in range(n)]
        for s, d, w in zip(self.edge_src.tolist(), self.edge_dst.tolist(), self.edge_len.tolist()):
            self.adjacency[s].append((d, w))
        self._csr = None
        self._csr_t = None
        self._fingerprint = None

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_edges(self):
        return len(self.edge_src)

    def __contains__(self, node):
        return int(node) in self.index

    def edge_length(self, u, v):
        iu, iv = self.index[int(u)], self.index[int(v)]
        for d, w in self.adjacency[iu]:
            if d == iv:
                return w
        raise KeyError(f"no edge {u}->{v}")

    def has_edge(self, u, v):
        try:
            self.edge_length(u, v)
        except KeyError:
            return False
        return True

    @property
    def csr(self):
        if self._csr is None:
            n = self.n_nodes
            self._csr = csr_matrix((self.edge_len, (self.edge_src, self.edge_dst)), shape=(n, n))
        return self._csr

    @property
    def csr_transposed(self):
        if self._csr_t is None:
            self._csr_t = self.csr.T.tocsr()
        return self._csr_t

    @property
    def fingerprint(self):
        if self._fingerprint is None:
            h = hashlib.sha256()
            for arr in (self.node_ids, self.edge_src, self.edge_dst, self.edge_len):
                h.update(np.ascontiguousarray(arr).tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    def coords(self, node):
        i = self.index[int(node)]
        return float(self.lon[i]), float(self.lat[i])

    def straight_distance(self, u, v):
        iu, iv = self.index[int(u)], self.index[int(v)]
        return float(haversine_m(self.lon[iu], self.lat[iu], self.lon[iv], self.lat[iv]))

    def bbox(self):
        return (float(self.lon.min()), float(self.lat.min()), float(self.lon.max()), float(self.lat.max()))

    def area_m2(self):
        lon0, lat0, lon1, lat1 = self.bbox()
        width = float(haversine_m(lon0, (lat0 + lat1) / 2, lon1, (lat0 + lat1) / 2))
        height = float(haversine_m(lon0, lat0, lon0, lat1))
        return width * height

    def __repr__(self):
        return f"RoadNetwork(nodes={self.n_nodes}, edges={self.n_edges}, pruned={self.pruned_count})"


def _largest_weak_component(node_ids, edge_from, edge_to):
    index = {n: i for i, n in enumerate(node_ids)}
    n = len(node_ids)
    if len(edge_from):
        rows = np.array([index[u] for u in edge_from])
        cols = np.array([index[v] for v in edge_to])
    else:
        rows = cols = np.zeros(0, dtype=int)
    g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(g, directed=True, connection="weak")
    counts = np.bincount(labels)
    # ties go to the component containing the earliest node in input order
    biggest = int(np.flatnonzero(counts == counts.max())[0])
    return labels == biggest


def build_network(nodes, edges, undirected=False):
    """Validate raw node/edge records and return the pruned network.

    `nodes` is an iterable of (node_id, lon, lat), `edges` of (from, to, length_m).
    """
    nodes = [(int(n), float(x), float(y)) for n, x, y in nodes]
    if not nodes:
        raise NetworkError("empty graph: no nodes")
    known = {n for n, _, _ in nodes}
    if len(known) != len(nodes):
        raise NetworkError("duplicate node ids")
    ef, et, el = [], [], []
    for u, v, w in edges:
        u, v, w = int(u), int(v), float(w)
        for node in (u, v):
            if node not in known:
                raise NetworkError(f"unknown node {node}")
        if not w > 0 or not math.isfinite(w):
            raise NetworkError(f"edge {u}->{v} has non-positive length {w}")
        ef.append(u)
        et.append(v)
        el.append(w)
        if undirected:
            ef.append(v)
            et.append(u)
            el.append(w)
    return _assemble(nodes, ef, et, el)


def _assemble(nodes, ef, et, el):
    ids = [n for n, _, _ in nodes]
    keep = _largest_weak_component(ids, ef, et)
    pruned = int((~keep).sum())
    kept_ids = {n for n, k in zip(ids, keep) if k}
    if pruned:
        log.warning("pruned %d nodes outside the largest weakly-connected component", pruned)
    kn = [rec for rec, k in zip(nodes, keep) if k]
    mask = [u in kept_ids and v in kept_ids for u, v in zip(ef, et)]
    return RoadNetwork(
        [r[0] for r in kn],
        [r[1] for r in kn],
        [r[2] for r in kn],
        [u for u, m in zip(ef, mask) if m],
        [v for v, m in zip(et, mask) if m],
        [w for w, m in zip(el, mask) if m],
        pruned_count=pruned,
    )


def _read_csv(path, header):
    path = Path(path)
    if not path.exists():
        raise NetworkError("file not found", path=path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise NetworkError("empty file", path=path) from None
        if [c.strip() for c in first] != header:
            raise NetworkError(f"expected header {','.join(header)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise NetworkError(f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno)
            yield lineno, row


def load_network(node_file, edge_file, undirected=False):
    """Read node and edge CSV files, validate, and prune to the main component."""
    nodes = []
    for lineno, (nid, lon, lat) in _read_csv(node_file, ["node_id", "lon", "lat"]):
        try:
            nodes.append((int(nid), float(lon), float(lat)))
        except ValueError as exc:
            raise NetworkError(f"cannot parse node record: {exc}", path=node_file, line=lineno) from None
    if not nodes:
        raise NetworkError("empty graph: no nodes", path=node_file)
    known = set()
    for lineno, (n, _, _) in enumerate(nodes, start=2):
        if n in known:
            raise NetworkError(f"duplicate node {n}", path=node_file, line=lineno)
        known.add(n)
    ef, et, el = [], [], []
    for lineno, (u, v, w) in _read_csv(edge_file, ["from", "to", "length_m"]):
        try:
            u, v, w = int(u), int(v), float(w)
        except ValueError as exc:
            raise NetworkError(f"cannot parse edge record: {exc}", path=edge_file, line=lineno) from None
        for node in (u, v):
            if node not in known:
                raise NetworkError(f"unknown node {node}", path=edge_file, line=lineno)
        if not (w > 0 and math.isfinite(w)):
            raise NetworkError(f"non-positive length {w}", path=edge_file, line=lineno)
        ef.append(u)
        et.append(v)
        el.append(w)
        if undirected:
            ef.append(v)
            et.append(u)
            el.append(w)
    net = _assemble(nodes, ef, et, el)
    log.info("loaded %r from %s, %s", net, node_file, edge_file)
    return net


def write_network(net, node_file, edge_file):
    with open(node_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lon", "lat"])
        for n, x, y in zip(net.node_ids.tolist(), net.lon.tolist(), net.lat.tolist()):
            w.writerow([n, repr(x), repr(y)])
    with open(edge_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "length_m"])
        ids = net.node_ids
        for s, d, length in zip(net.edge_src.tolist(), net.edge_dst.tolist(), net.edge_len.tolist()):
            w.writerow([int(ids[s]), int(ids[d]), repr(length)])


def _route_from_indices(net, path_idx):
    nodes = tuple(int(net.node_ids[i]) for i in path_idx)
    legs = []
    for a, b in zip(path_idx[:-1], path_idx[1:]):
        for d, w in net.adjacency[a]:
            if d == b:
                legs.append(w)
                break
    return Route(nodes, tuple(legs))


def shortest_path(net, origin, destination):
    """Point-to-point Dijkstra on the network.

    The heap is keyed on (distance, node index) and a label only changes on
    strict improvement, so among equal-length candidates the one settled via
    the lower node id wins.  Raises NoRouteError if unreachable.
    """
    if origin not in net or destination not in net:
        missing = origin if origin not in net else destination
        raise KeyError(f"unknown node {missing}")
    src = net.index[int(origin)]
    dst = net.index[int(destination)]
    if src == dst:
        return Route((int(origin),), ())
    dist = {src: 0.0}
    pred = {}
    done = set()
    heap = [(0.0, src)]
    adjacency = net.adjacency
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == dst:
            break
        done.add(u)
        for v, w in adjacency[u]:
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    else:
        raise NoRouteError(origin, destination)
    path = [dst]
    while path[-1] != src:
        path.append(pred[path[-1]])
    path.reverse()
    return _route_from_indices(net, path)


class RouteCache:
    """Shortest-path trees keyed by origin, answering (origin, destination) queries.

    Each stored tree (distance and predecessor arrays from one origin) is the
    record for every OD pair starting there; materialized routes are memoized
    per pair.  `eager=True` means trees were precomputed and a miss on a covered
    origin never happens; in lazy mode a tree is computed on the first query from
    an origin.  `max_trees` bounds memory in lazy mode (least recently used
    trees are dropped, their routes stay memoized).

    Readers may share a cache across threads; tree insertion is serialized.
    """

    def __init__(self, net, eager=False, max_trees=None):
        self.net = net
        self.eager = eager
        self.max_trees = max_trees
        self._trees = OrderedDict()
        self._routes = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._trees) * self.net.n_nodes

    @property
    def sources(self):
        return [int(self.net.node_ids[i]) for i in self._trees]

    def _compute_trees(self, src_idx):
        dist, pred = dijkstra(self.net.csr, directed=True, indices=src_idx, return_predecessors=True)
        return np.atleast_2d(dist), np.atleast_2d(pred).astype(np.int32)

    def _insert(self, i, dist_row, pred_row):
        self._trees[i] = (dist_row, pred_row)
        if self.max_trees is not None and not self.eager:
            while len(self._trees) > self.max_trees:
                self._trees.popitem(last=False)

    def _tree(self, i):
        tree = self._trees.get(i)
        if tree is not None:
            self.hits += 1
            if not self.eager:
                self._trees.move_to_end(i)
            return tree
        with self._lock:
            tree = self._trees.get(i)
            if tree is None:
                self.misses += 1
                dist, pred = self._compute_trees([i])
                tree = (dist[0], pred[0])
                self._insert(i, *tree)
        return tree

    def precompute(self, origins=None, chunk=256):
        n = self.net.n_nodes
        idx = list(range(n)) if origins is None else sorted({self.net.index[int(o)] for o in origins})
        with self._lock:
            for k in range(0, len(idx), chunk):
                part = [i for i in idx[k:k + chunk] if i not in self._trees]
                if not part:
                    continue
                dist, pred = self._compute_trees(part)
                for j, i in enumerate(part):
                    self._trees[i] = (dist[j].copy(), pred[j].copy())
        self.eager = True
        return self

    def distance(self, origin, destination):
        """Network distance in meters; inf if unreachable."""
        i = self.net.index[int(origin)]
        j = self.net.index[int(destination)]
        return float(self._tree(i)[0][j])

    def has_route(self, origin, destination):
        return math.isfinite(self.distance(origin, destination))

    def route(self, origin, destination):
        key = (int(origin), int(destination))
        r = self._routes.get(key)
        if r is not None:
            self.hits += 1
            return r
        i = self.net.index[key[0]]
        j = self.net.index[key[1]]
        dist, pred = self._tree(i)
        if not math.isfinite(dist[j]):
            raise NoRouteError(origin, destination)
        path = [j]
        while path[-1] != i:
            path.append(int(pred[path[-1]]))
        path.reverse()
        r = _route_from_indices(self.net, path)
        self._routes[key] = r
        return r

    def distance_matrix(self, origins, destinations, limit=np.inf):
        """Distances from each origin to each destination (inf beyond `limit`).

        Uses stored trees when every origin is covered; otherwise one bounded
        multi-source search on the reversed graph from the destinations, which is
        cheap for small radii and leaves the cache untouched.
        """
        origins = [self.net.index[int(o)] for o in origins]
        destinations = [self.net.index[int(d)] for d in destinations]
        if not origins or not destinations:
            return np.zeros((len(origins), len(destinations)))
        if all(i in self._trees for i in origins):
            out = np.array([self._trees[i][0][destinations] for i in origins])
        else:
            uniq = sorted(set(destinations))
            back = dijkstra(self.net.csr_transposed, directed=True, indices=uniq, limit=limit)
            back = np.atleast_2d(back)
            pos = {d: k for k, d in enumerate(uniq)}
            cols = [pos[d] for d in destinations]
            out = back[cols][:, origins].T
        if math.isfinite(limit):
            out = np.where(out <= limit, out, np.inf)
        return out

    # persistence: magic line, JSON metadata line, then raw npy arrays

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        idx = np.array(sorted(self._trees), dtype=np.int64)
        try:
            with open(tmp, "wb") as fh:
                fh.write(CACHE_MAGIC + b" v%d\n" % CACHE_VERSION)
                meta = {"fingerprint": self.net.fingerprint, "n_nodes": self.net.n_nodes, "n_sources": len(idx)}
                fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
                np.save(fh, idx)
                if len(idx):
                    np.save(fh, np.stack([self._trees[i][0] for i in idx]))
                    np.save(fh, np.stack([self._trees[i][1] for i in idx]))
            os.replace(tmp, path)
        except BaseException:
            if tmp.exists():
                tmp.unlink()
            raise
        return path

    @classmethod
    def load(cls, path, net):
        with open(path, "rb") as fh:
            magic = fh.readline()
            if not magic.startswith(CACHE_MAGIC):
                raise StaleCacheError(f"{path}: not a route cache file")
            if magic.strip() != CACHE_MAGIC + b" v%d" % CACHE_VERSION:
                raise StaleCacheError(f"{path}: unsupported cache version {magic.strip().decode(errors='replace')}")
            meta = json.loads(fh.readline())
            if meta["fingerprint"] != net.fingerprint:
                raise StaleCacheError(f"{path}: cache was built for a different network")
            idx = np.load(fh)
            cache = cls(net, eager=True)
            if len(idx):
                dist = np.load(fh)
                pred = np.load(fh)
                for k, i in enumerate(idx.tolist()):
                    cache._trees[i] = (dist[k], pred[k])
        return cache


def precompute_routes(net, origins=None, path=None):
    """Build an eager cache (all origins by default), optionally persisting it.

    If writing fails, the partially written file is removed and the error
    propagates.
    """
    cache = RouteCache(net, eager=True).precompute(origins)
    if path is not None:
        cache.save(path)
    return cache


class GridOverlay:
    """Equal-size lon/lat rectangles laid over the network's bounding box.

    Cells are half-open, so a node on an interior boundary belongs to the cell
    with the larger index; nodes outside the box are clamped to the edge cells.
    grid_id = row * cols + col with row 0 at the southern edge.
    """

    def __init__(self, net, rows, cols, bbox=None):
        if rows < 1 or cols < 1:
            raise ValueError("rows and cols must be positive")
        self.net = net
        self.rows = int(rows)
        self.cols = int(cols)
        self.bbox = tuple(bbox) if bbox is not None else net.bbox()
        self.node_grid = self.cell_of(net.lon, net.lat)
        self._grid_of = dict(zip(net.node_ids.tolist(), self.node_grid.tolist()))
        self.members = [[] for _ in range(self.n_grids)]
        for n, g in zip(net.node_ids.tolist(), self.node_grid.tolist()):
            self.members[g].append(n)

    @property
    def n_grids(self):
        return self.rows * self.cols

    def cell_of(self, lon, lat):
        lon0, lat0, lon1, lat1 = self.bbox
        w = (lon1 - lon0) or 1.0
        h = (lat1 - lat0) or 1.0
        col = np.clip(np.floor((np.asarray(lon) - lon0) / w * self.cols), 0, self.cols - 1).astype(np.int64)
        row = np.clip(np.floor((np.asarray(lat) - lat0) / h * self.rows), 0, self.rows - 1).astype(np.int64)
        return row * self.cols + col

    def node_to_grid(self, node):
        return self._grid_of[int(node)]

    def row_col(self, g):
        return divmod(int(g), self.cols)

    def neighbor_grids(self, g):
        return frozenset(self.neighbor_actions(g).values())

    def neighbor_actions(self, g):
        """Map action index 0..8 -> neighbor grid; action 4 is staying put.

        Action index is (d_row + 1) * 3 + (d_col + 1); offsets falling off the
        grid are absent.
        """
        if not 0 <= g < self.n_grids:
            raise ValueError(f"grid id {g} out of range")
        r, c = divmod(int(g), self.cols)
        out = {}
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < self.rows and 0 <= cc < self.cols:
                    out[(dr + 1) * 3 + (dc + 1)] = rr * self.cols + cc
        return out

    def nodes_in(self, g):
        return self.members[g]

    def center(self, g):
        lon0, lat0, lon1, lat1 = self.bbox
        r, c = self.row_col(g)
        return (lon0 + (c + 0.5) * (lon1 - lon0) / self.cols, lat0 + (r + 0.5) * (lat1 - lat0) / self.rows)


def node_to_grid(overlay, node):
    return overlay.node_to_grid(node)


def neighbor_grids(overlay, g):
    return overlay.neighbor_grids(g)
