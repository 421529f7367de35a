"""Spatiotemporal multigraph: node features, ellipsoidal spatial/temporal
neighbourhoods with degree caps, edge attributes, a spatial hash index, and
two construction routes (vectorised batch build and per-event insertion)
that must agree exactly.

Edge convention: an edge ``j -> i`` means node ``i`` consumes messages from
``j``. Under the default ``causal`` direction sources are earlier events.
``printed`` flips this: later events feed earlier ones, and an older node's
in-list is filled by the first arrivals that qualify (it is never rewired).
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EventValidationError, OutOfOrderEventError, StaleEventError, DataError
from .events import Event, EventStream, SensorGeometry, GEN1

SPATIAL, TEMPORAL = "spatial", "temporal"


@dataclass(frozen=True)
class GraphConfig:
    r_xy_spatial: float = 0.04     # fraction of max(width, height)
    r_t_spatial: float = 5000.0    # us
    r_xy_temporal: float = 0.01
    r_t_temporal: float = 40000.0
    cap_spatial: int = 16
    cap_temporal: int = 12
    window: int = 100_000          # us
    v_max: float = 5.0             # px/ms velocity clamp
    edge_direction: str = "causal"

    def __post_init__(self):
        if min(self.r_xy_spatial, self.r_t_spatial, self.r_xy_temporal, self.r_t_temporal) <= 0:
            raise ValueError("all radii must be positive")
        if self.cap_spatial < 1 or self.cap_temporal < 1:
            raise ValueError("caps must be >= 1")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.edge_direction not in ("causal", "printed"):
            raise ValueError(f"unknown edge direction {self.edge_direction!r}")

    def radii(self, geometry: SensorGeometry, kind: str) -> tuple[float, float]:
        m = geometry.max_dim
        if kind == SPATIAL:
            return self.r_xy_spatial * m, float(self.r_t_spatial)
        return self.r_xy_temporal * m, float(self.r_t_temporal)

    def cap(self, kind: str) -> int:
        return self.cap_spatial if kind == SPATIAL else self.cap_temporal


# ---------------------------------------------------------------------------
# elementwise geometry (shared by both construction routes so they agree bitwise)


def ellipsoid_distance(dx, dy, dt, r_xy, r_t):
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    return np.sqrt(dx * dx + dy * dy) / r_xy + np.abs(dt) / r_t


def normalize_node(e: Event, g: SensorGeometry, t_start: int, window: int) -> np.ndarray:
    if not (t_start <= e.t <= t_start + window):
        raise EventValidationError(f"t={e.t} outside window [{t_start}, {t_start + window}]")
    return _node_features(np.array([e.x]), np.array([e.y]), np.array([e.t]), np.array([e.p]),
                          g, t_start, window)[0]


def _node_features(x, y, t, p, g, t_start, window):
    # t saturates at +1 for events past the nominal window end (sliding sessions)
    out = np.empty((len(x), 4))
    out[:, 0] = 2.0 * x / (g.width - 1) - 1.0 if g.width > 1 else 0.0
    out[:, 1] = 2.0 * y / (g.height - 1) - 1.0 if g.height > 1 else 0.0
    out[:, 2] = np.minimum(2.0 * (t - t_start) / window - 1.0, 1.0)
    out[:, 3] = p
    return out


def spatial_edge_attr(dx, dy, dt, r_xy, r_t):
    """Deltas are source minus consumer. Returns [E, 3] in [0, 1]."""
    d = np.stack([np.asarray(dx, np.float64) / r_xy, np.asarray(dy, np.float64) / r_xy,
                  np.asarray(dt, np.float64) / r_t], axis=-1)
    return np.clip((d + 1.0) / 2.0, 0.0, 1.0)


def temporal_edge_attr(dx, dy, dt, dp, r_xy, r_t, v_max):
    """Deltas are source minus consumer (dt != 0). Returns [E, 6]:
    position over R_xy, |dt| over R_t, clamped velocity in px/ms over v_max,
    and half the polarity change."""
    dx = np.asarray(dx, np.float64)
    dy = np.asarray(dy, np.float64)
    dt = np.asarray(dt, np.float64)
    dt_ms = dt / 1000.0
    vx = np.clip(dx / dt_ms, -v_max, v_max) / v_max
    vy = np.clip(dy / dt_ms, -v_max, v_max) / v_max
    return np.stack([dx / r_xy, dy / r_xy, np.abs(dt) / r_t, vx, vy,
                     np.asarray(dp, np.float64) / 2.0], axis=-1)


def _time_rule(kind, direction, t_consumer, t_source):
    if direction == "causal":
        return t_source < t_consumer if kind == TEMPORAL else t_source <= t_consumer
    return t_source > t_consumer if kind == TEMPORAL else t_source >= t_consumer


def _predicate(kind, v_i, v_j, cfg, geometry):
    r_xy, r_t = cfg.radii(geometry, kind)
    d = float(ellipsoid_distance(v_j.x - v_i.x, v_j.y - v_i.y, v_j.t - v_i.t, r_xy, r_t))
    return d < 1.0 and bool(_time_rule(kind, cfg.edge_direction, v_i.t, v_j.t))


def spatial_predicate(v_i, v_j, cfg: GraphConfig, geometry: SensorGeometry = GEN1) -> bool:
    """Can ``v_j`` feed ``v_i`` over a spatial edge."""
    return _predicate(SPATIAL, v_i, v_j, cfg, geometry)


def temporal_predicate(v_i, v_j, cfg: GraphConfig, geometry: SensorGeometry = GEN1) -> bool:
    return _predicate(TEMPORAL, v_i, v_j, cfg, geometry)


def select_neighbors(candidates, distances, cap: int):
    """Keep the ``cap`` candidates with smallest distance, ties by smaller id.
    Candidates are assumed to already pass the predicate."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    candidates = np.asarray(candidates, dtype=np.int64)
    order = np.lexsort((candidates, np.asarray(distances, dtype=np.float64)))
    return candidates[order[:cap]]


# ---------------------------------------------------------------------------
# spatial hash


class SpatialHashIndex:
    """Square xy cells, each holding node ids in arrival (hence time) order."""

    def __init__(self, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self._ids: dict[tuple[int, int], list[int]] = {}
        self._ts: dict[tuple[int, int], list[int]] = {}
        self._xy: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def key(self, x, y):
        return (math.floor(x / self.cell), math.floor(y / self.cell))

    def __len__(self):
        return sum(len(v) for v in self._ids.values())

    def insert(self, node_id: int, x: int, y: int, t: int) -> None:
        k = self.key(x, y)
        ids = self._ids.setdefault(k, [])
        ts = self._ts.setdefault(k, [])
        if ts and t < ts[-1]:
            raise OutOfOrderEventError("index insertions must be time ordered")
        ids.append(node_id)
        ts.append(t)
        self._xy.setdefault(k, []).append((x, y))

    def drop_until(self, t_max: int) -> None:
        """Remove every entry with t <= t_max."""
        for k in list(self._ts):
            cut = bisect_right(self._ts[k], t_max)
            if cut:
                del self._ids[k][:cut], self._ts[k][:cut], self._xy[k][:cut]
                if not self._ids[k]:
                    del self._ids[k], self._ts[k], self._xy[k]

    def query(self, x, y, t, r_xy, r_t) -> np.ndarray:
        """Ids inside the inclusive box |dx|,|dy| <= r_xy, |dt| <= r_t."""
        kx0, ky0 = self.key(x - r_xy, y - r_xy)
        kx1, ky1 = self.key(x + r_xy, y + r_xy)
        out = []
        for kx in range(kx0, kx1 + 1):
            for ky in range(ky0, ky1 + 1):
                ts = self._ts.get((kx, ky))
                if not ts:
                    continue
                lo = bisect_left(ts, t - r_t)
                hi = bisect_right(ts, t + r_t)
                ids, xy = self._ids[(kx, ky)], self._xy[(kx, ky)]
                for m in range(lo, hi):
                    px, py = xy[m]
                    if abs(px - x) <= r_xy and abs(py - y) <= r_xy:
                        out.append(ids[m])
        out.sort()
        return np.asarray(out, dtype=np.int64)


def candidate_neighbors(index: SpatialHashIndex, node, r_xy: float, r_t: float) -> np.ndarray:
    return index.query(node.x, node.y, node.t, r_xy, r_t)


# ---------------------------------------------------------------------------
# graph


@dataclass
class GraphArrays:
    """Compact export of the live graph. Edge endpoints are row indices."""

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    feat: np.ndarray
    s_src: np.ndarray
    s_dst: np.ndarray
    s_attr: np.ndarray
    t_src: np.ndarray
    t_dst: np.ndarray
    t_attr: np.ndarray
    geometry: SensorGeometry = GEN1
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.ids)

    def row_of(self, node_id: int) -> int:
        i = int(np.searchsorted(self.ids, node_id))
        if i >= len(self.ids) or self.ids[i] != node_id:
            raise KeyError(node_id)
        return i


@dataclass
class InsertResult:
    node_id: int
    spatial_edges: list
    temporal_edges: list


@dataclass
class EvictionResult:
    removed: list
    touched: list      # retained nodes whose in-edges changed


class MultiGraph:
    def __init__(self, geometry: SensorGeometry = GEN1, cfg: GraphConfig | None = None,
                 t_start: int = 0):
        self.geometry = geometry
        self.cfg = cfg or GraphConfig()
        self.t_start = int(t_start)
        self.version = 0
        self._n = 0
        cap = 64
        self._x = np.zeros(cap, np.int64)
        self._y = np.zeros(cap, np.int64)
        self._t = np.zeros(cap, np.int64)
        self._p = np.zeros(cap, np.int64)
        self._feat = np.zeros((cap, 4))
        self._alive = np.zeros(cap, bool)
        self.in_src = {SPATIAL: [], TEMPORAL: []}
        self.in_attr = {SPATIAL: [], TEMPORAL: []}
        self.out = {SPATIAL: [], TEMPORAL: []}
        self.index = SpatialHashIndex(self.cfg.radii(geometry, SPATIAL)[0])
        self._arrays = None

    # -- node storage ------------------------------------------------------

    def _grow(self, need):
        cap = len(self._x)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_x", "_y", "_t", "_p", "_alive"):
            a = getattr(self, name)
            b = np.zeros(new, a.dtype)
            b[:cap] = a
            setattr(self, name, b)
        f = np.zeros((new, 4))
        f[:cap] = self._feat
        self._feat = f

    def _append_nodes(self, x, y, t, p):
        n0, k = self._n, len(x)
        self._grow(n0 + k)
        sl = slice(n0, n0 + k)
        self._x[sl], self._y[sl], self._t[sl], self._p[sl] = x, y, t, p
        self._feat[sl] = _node_features(np.asarray(x), np.asarray(y), np.asarray(t),
                                        np.asarray(p), self.geometry, self.t_start, self.cfg.window)
        self._alive[sl] = True
        for kind in (SPATIAL, TEMPORAL):
            self.in_src[kind].extend(np.zeros(0, np.int64) for _ in range(k))
            self.in_attr[kind].extend(np.zeros((0, 3 if kind == SPATIAL else 6)) for _ in range(k))
            self.out[kind].extend([] for _ in range(k))
        self._n += k
        return n0

    @property
    def num_nodes(self) -> int:
        return int(self._alive[: self._n].sum())

    @property
    def next_id(self) -> int:
        return self._n

    @property
    def max_t(self):
        alive = np.flatnonzero(self._alive[: self._n])
        return int(self._t[alive[-1]]) if len(alive) else None

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(self._alive[: self._n])

    def is_alive(self, i: int) -> bool:
        return 0 <= i < self._n and bool(self._alive[i])

    def node(self, i: int) -> Event:
        return Event(int(self._x[i]), int(self._y[i]), int(self._t[i]), int(self._p[i]))

    def features(self, i: int) -> np.ndarray:
        return self._feat[i].copy()

    def consumers(self, i: int) -> set:
        return set(self.out[SPATIAL][i]) | set(self.out[TEMPORAL][i])

    def num_edges(self, kind: str) -> int:
        return sum(len(self.in_src[kind][i]) for i in self.alive_ids())

    # -- insertion ---------------------------------------------------------

    def insert_event(self, e: Event) -> InsertResult:
        g = self.geometry
        if not (0 <= e.x < g.width and 0 <= e.y < g.height):
            raise EventValidationError(f"event ({e.x}, {e.y}) outside sensor")
        if e.p not in (-1, 1):
            raise EventValidationError("polarity must be -1 or +1")
        if e.t < self.t_start:
            raise StaleEventError(f"event t={e.t} precedes window start {self.t_start}")
        mt = self.max_t
        if mt is not None and e.t < mt:
            raise OutOfOrderEventError(f"event t={e.t} arrives after t={mt}")

        nid = self._append_nodes([e.x], [e.y], [e.t], [e.p])
        cfg = self.cfg
        rs = cfg.radii(g, SPATIAL)
        rt = cfg.radii(g, TEMPORAL)
        cand = self.index.query(e.x, e.y, e.t, max(rs[0], rt[0]), max(rs[1], rt[1]))
        created = {}
        for kind, (r_xy, r_t) in ((SPATIAL, rs), (TEMPORAL, rt)):
            created[kind] = self._connect(nid, cand, kind, r_xy, r_t)
        self.index.insert(nid, e.x, e.y, e.t)
        self.version += 1
        self._arrays = None
        return InsertResult(nid, created[SPATIAL], created[TEMPORAL])

    def _connect(self, nid, cand, kind, r_xy, r_t):
        cfg = self.cfg
        cap = cfg.cap(kind)
        if len(cand) == 0:
            return []
        cx, cy, ct, cp = self._x[cand], self._y[cand], self._t[cand], self._p[cand]
        x, y, t, p = self._x[nid], self._y[nid], self._t[nid], self._p[nid]
        causal = cfg.edge_direction == "causal"
        # deltas are source minus consumer
        sgn = 1 if causal else -1
        dx, dy, dt = sgn * (cx - x), sgn * (cy - y), sgn * (ct - t)
        d = ellipsoid_distance(dx, dy, dt, r_xy, r_t)
        if causal:
            ok = (d < 1.0) & _time_rule(kind, "causal", t, ct)
        else:
            ok = (d < 1.0) & _time_rule(kind, "printed", ct, t)
        if not ok.any():
            return []
        cand, dx, dy, dt, d, cp = cand[ok], dx[ok], dy[ok], dt[ok], d[ok], cp[ok]
        dp = sgn * (cp - p)
        if causal:
            order = np.lexsort((cand, d))[:cap]
            src = cand[order]
            attr = self._attr(kind, dx[order], dy[order], dt[order], dp[order], r_xy, r_t)
            self.in_src[kind][nid] = src
            self.in_attr[kind][nid] = attr
            for s in src.tolist():
                self.out[kind][s].append(nid)
            return [(int(s), nid) for s in src]
        made = []
        attr = self._attr(kind, dx, dy, dt, dp, r_xy, r_t)
        for m, k in enumerate(cand.tolist()):
            if len(self.in_src[kind][k]) < cap:
                self.in_src[kind][k] = np.append(self.in_src[kind][k], nid)
                self.in_attr[kind][k] = np.vstack([self.in_attr[kind][k], attr[m:m + 1]])
                self.out[kind][nid].append(k)
                made.append((nid, k))
        return made

    def _attr(self, kind, dx, dy, dt, dp, r_xy, r_t):
        if kind == SPATIAL:
            return spatial_edge_attr(dx, dy, dt, r_xy, r_t)
        return temporal_edge_attr(dx, dy, dt, dp, r_xy, r_t, self.cfg.v_max)

    # -- eviction ----------------------------------------------------------

    def evict_expired(self, t_now: int) -> EvictionResult:
        """Drop nodes with t <= t_now - window unless an in-window node still
        reads from them. Retained nodes lose in-edges from dropped ones."""
        thr = int(t_now) - self.cfg.window
        ids = self.alive_ids()
        expired = ids[self._t[ids] <= thr]
        if len(expired) == 0:
            return EvictionResult([], [])
        keep = set()
        for i in ids[self._t[ids] > thr].tolist():
            for kind in (SPATIAL, TEMPORAL):
                keep.update(self.in_src[kind][i].tolist())
        removed = [i for i in expired.tolist() if i not in keep]
        rem = set(removed)
        touched = set()
        for i in removed:
            for kind in (SPATIAL, TEMPORAL):
                for c in self.out[kind][i]:
                    if c not in rem:
                        touched.add(c)
                for s in self.in_src[kind][i].tolist():
                    if s not in rem:
                        self.out[kind][s] = [c for c in self.out[kind][s] if c != i]
                self.in_src[kind][i] = np.zeros(0, np.int64)
                self.in_attr[kind][i] = self.in_attr[kind][i][:0]
                self.out[kind][i] = []
            self._alive[i] = False
        for c in touched:
            for kind in (SPATIAL, TEMPORAL):
                src = self.in_src[kind][c]
                mask = np.array([s not in rem for s in src.tolist()], dtype=bool)
                if len(src) and not mask.all():
                    self.in_src[kind][c] = src[mask]
                    self.in_attr[kind][c] = self.in_attr[kind][c][mask]
        self.index.drop_until(thr)
        self.t_start = max(self.t_start, thr)
        if removed:
            self.version += 1
            self._arrays = None
        return EvictionResult(removed, sorted(touched))

    # -- export ------------------------------------------------------------

    def to_arrays(self) -> GraphArrays:
        if self._arrays is not None:
            return self._arrays
        ids = self.alive_ids()
        row = np.full(self._n, -1, np.int64)
        row[ids] = np.arange(len(ids))
        parts = {}
        for kind, w in ((SPATIAL, 3), (TEMPORAL, 6)):
            srcs = [self.in_src[kind][i] for i in ids]
            counts = np.array([len(s) for s in srcs], dtype=np.int64)
            if counts.sum():
                src = row[np.concatenate(srcs)]
                attr = np.concatenate([self.in_attr[kind][i] for i in ids])
            else:
                src, attr = np.zeros(0, np.int64), np.zeros((0, w))
            dst = np.repeat(np.arange(len(ids)), counts)
            parts[kind] = (src, dst, attr)
        self._arrays = GraphArrays(
            ids, self._x[ids].copy(), self._y[ids].copy(), self._t[ids].copy(),
            self._p[ids].copy(), self._feat[ids].copy(), *parts[SPATIAL], *parts[TEMPORAL],
            geometry=self.geometry)
        return self._arrays

    def edge_sets(self) -> dict:
        """{kind: {(src, dst): attr tuple}} over live nodes."""
        out = {}
        for kind in (SPATIAL, TEMPORAL):
            d = {}
            for i in self.alive_ids().tolist():
                for s, a in zip(self.in_src[kind][i].tolist(), self.in_attr[kind][i]):
                    d[(s, i)] = tuple(a.tolist())
            out[kind] = d
        return out

    def same_as(self, other: "MultiGraph") -> bool:
        if not np.array_equal(self.alive_ids(), other.alive_ids()):
            return False
        ids = self.alive_ids()
        for a, b in ((self._x, other._x), (self._y, other._y), (self._t, other._t),
                     (self._p, other._p), (self._feat, other._feat)):
            if not np.array_equal(a[ids], b[ids]):
                return False
        for kind in (SPATIAL, TEMPORAL):
            for i in ids.tolist():
                if not np.array_equal(self.in_src[kind][i], other.in_src[kind][i]):
                    return False
                if not np.array_equal(self.in_attr[kind][i], other.in_attr[kind][i]):
                    return False
                if sorted(self.out[kind][i]) != sorted(other.out[kind][i]):
                    return False
        return True


def insert_event(graph: MultiGraph, e: Event) -> InsertResult:
    return graph.insert_event(e)


# ---------------------------------------------------------------------------
# batch build


def _pairs_within(x, y, t, r_xy, r_t):
    """Index pairs (i < j) inside the scaled Chebyshev box; a superset of
    the ellipsoid."""
    if len(x) < 2:
        return np.zeros((0, 2), np.int64)
    pts = np.stack([x / r_xy, y / r_xy, t / r_t], axis=1)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(1.0 + 1e-9, p=np.inf, output_type="ndarray")
    return pairs.astype(np.int64).reshape(-1, 2)


def build_graph(stream: EventStream, cfg: GraphConfig | None = None,
                t_start: int | None = None) -> MultiGraph:
    """Vectorised construction. Equal to folding ``insert_event`` over the
    stream in order. ``t_start`` defaults to the first event time."""
    cfg = cfg or GraphConfig()
    geom = stream.geometry
    if t_start is None:
        t_start = int(stream.t[0]) if len(stream) else 0
    g = MultiGraph(geom, cfg, t_start)
    n = len(stream)
    if n == 0:
        return g
    stream.validate()
    if int(stream.t[0]) < t_start:
        raise StaleEventError(f"event t={stream.t[0]} precedes window start {t_start}")
    if np.any(np.diff(stream.t) < 0):
        raise OutOfOrderEventError("stream must be time sorted")
    x, y, t, p = stream.x, stream.y, stream.t, stream.p
    g._append_nodes(x, y, t, p)
    causal = cfg.edge_direction == "causal"
    for kind in (SPATIAL, TEMPORAL):
        r_xy, r_t = cfg.radii(geom, kind)
        pairs = _pairs_within(x, y, t, r_xy, r_t)
        lo, hi = pairs[:, 0], pairs[:, 1]
        cons, src = (hi, lo) if causal else (lo, hi)
        dx, dy, dt = x[src] - x[cons], y[src] - y[cons], t[src] - t[cons]
        d = ellipsoid_distance(dx, dy, dt, r_xy, r_t)
        ok = (d < 1.0) & _time_rule(kind, cfg.edge_direction, t[cons], t[src])
        cons, src, dx, dy, dt, d = cons[ok], src[ok], dx[ok], dy[ok], dt[ok], d[ok]
        dp = p[src] - p[cons]
        if causal:
            order = np.lexsort((src, d, cons))
        else:
            order = np.lexsort((src, cons))
        cons, src, dx, dy, dt, dp = cons[order], src[order], dx[order], dy[order], dt[order], dp[order]
        # rank within each consumer group, keep the first `cap`
        starts = np.r_[0, np.flatnonzero(np.diff(cons)) + 1] if len(cons) else np.zeros(0, np.int64)
        group_start = np.repeat(starts, np.diff(np.r_[starts, len(cons)]))
        keep = (np.arange(len(cons)) - group_start) < cfg.cap(kind)
        cons, src = cons[keep], src[keep]
        attr = g._attr(kind, dx[keep], dy[keep], dt[keep], dp[keep], r_xy, r_t)
        bounds = np.searchsorted(cons, np.arange(n + 1))
        for i in np.unique(cons).tolist():
            a, b = bounds[i], bounds[i + 1]
            g.in_src[kind][i] = src[a:b].copy()
            g.in_attr[kind][i] = attr[a:b].copy()
        out_order = np.lexsort((cons, src))
        for s, c in zip(src[out_order].tolist(), cons[out_order].tolist()):
            g.out[kind][s].append(c)
    for i in range(n):
        g.index.insert(i, int(x[i]), int(y[i]), int(t[i]))
    g.version = n
    return g


def build_graph_incremental(stream: EventStream, cfg: GraphConfig | None = None,
                            t_start: int | None = None) -> MultiGraph:
    cfg = cfg or GraphConfig()
    if t_start is None:
        t_start = int(stream.t[0]) if len(stream) else 0
    g = MultiGraph(stream.geometry, cfg, t_start)
    for e in stream:
        g.insert_event(e)
    return g


# ---------------------------------------------------------------------------
# dump format


def dump_graph(g: MultiGraph) -> str:
    lines = [f"# stmg-graph width={g.geometry.width} height={g.geometry.height} "
             f"t_start={g.t_start} window={g.cfg.window}"]
    ids = g.alive_ids().tolist()
    for i in ids:
        lines.append(f"N {i} {g._x[i]} {g._y[i]} {g._t[i]} {g._p[i]}")
    for tag, kind in (("S", SPATIAL), ("T", TEMPORAL)):
        for i in ids:
            for s, a in zip(g.in_src[kind][i].tolist(), g.in_attr[kind][i]):
                lines.append(f"{tag} {s} {i} " + " ".join(f"{v:.6f}" for v in a))
    return "\n".join(lines) + "\n"


def load_graph(text: str, cfg: GraphConfig | None = None) -> MultiGraph:
    """Rebuild a graph from its dump. Attributes keep their printed precision;
    the spatial index is rebuilt from node positions."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# stmg-graph"):
        raise DataError("missing graph dump header")
    hdr = dict(tok.split("=") for tok in lines[0].split()[2:])
    geom = SensorGeometry(int(hdr["width"]), int(hdr["height"]))
    base = cfg or GraphConfig()
    if int(hdr.get("window", base.window)) != base.window:
        base = GraphConfig(**{**base.__dict__, "window": int(hdr["window"])})
    g = MultiGraph(geom, base, int(hdr["t_start"]))
    nodes, edges = [], {SPATIAL: [], TEMPORAL: []}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "N":
                nodes.append(tuple(int(v) for v in parts[1:6]))
            elif parts[0] in ("S", "T"):
                kind = SPATIAL if parts[0] == "S" else TEMPORAL
                edges[kind].append((int(parts[1]), int(parts[2]), [float(v) for v in parts[3:]]))
            else:
                raise ValueError(parts[0])
        except (ValueError, IndexError):
            raise DataError(f"graph dump line {lineno}: cannot parse {line!r}") from None
    if nodes:
        arr = np.array(nodes, dtype=np.int64)
        n = int(arr[:, 0].max()) + 1
        g._grow(n)
        # fill placeholder slots so ids are preserved, then mark dead ones
        full = np.zeros((n, 4), np.int64)
        full[:, 3] = 1
        full[arr[:, 0]] = arr[:, 1:]
        g._append_nodes(full[:, 0], full[:, 1], full[:, 2], full[:, 3])
        g._alive[:n] = False
        g._alive[arr[:, 0]] = True
    for kind, w in ((SPATIAL, 3), (TEMPORAL, 6)):
        per = {}
        for s, d, a in edges[kind]:
            if len(a) != w:
                raise DataError(f"{kind} edge {s}->{d} has {len(a)} attributes")
            per.setdefault(d, []).append((s, a))
        for d, lst in per.items():
            g.in_src[kind][d] = np.array([s for s, _ in lst], np.int64)
            g.in_attr[kind][d] = np.array([a for _, a in lst], np.float64).reshape(-1, w)
            for s, _ in lst:
                g.out[kind][s].append(d)
    for i in g.alive_ids().tolist():
        g.index.insert(i, int(g._x[i]), int(g._y[i]), int(g._t[i]))
    return g
