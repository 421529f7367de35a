"""Per-event incremental inference.

Every node owns a cache slot holding its activation at each layer (0 is the
embedding, 1..L the backbone blocks, L+1 the head block) plus its head
outputs. Inserting an event recomputes exactly the forward-influence cone
A_0 = {new}, A_{l+1} = A_l U consumers(A_l); every other row is reused.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import EDGE_DIM
from .detection import Detections, HeadConfig, detect
from .errors import CacheInconsistentError
from .events import Event, EventStream, SensorGeometry, GEN1, generate_synthetic, SceneSpec, RectSpec, window_slice
from .graph import SPATIAL, TEMPORAL, GraphConfig, MultiGraph, build_graph
from .network import (Edges, Model, backbone_forward, embed_nodes, head_block, head_outputs,
                      node_features, smvl_block)
from .spline import spline_edge_flops

BENCH_HEADER = ["graph_size", "mode", "median_ms", "p90_ms", "recomputed_pairs", "mflops_per_event"]


class LayerCache:
    """Slot-addressed activation rows for every cached layer."""

    def __init__(self, widths: list[int], n_out: int, dtype, capacity: int = 256):
        self.widths = list(widths)
        self.n_out = n_out
        self.dtype = dtype
        self.slot_of: dict[int, int] = {}
        self._free: list[int] = []
        self._next = 0
        self.layers = [torch.zeros((capacity, w), dtype=dtype) for w in widths]
        self.logits = torch.zeros((capacity, n_out), dtype=dtype)
        self.box = torch.zeros((capacity, 4), dtype=dtype)
        self.s_logit = torch.zeros(capacity, dtype=dtype)

    @property
    def capacity(self):
        return self.layers[0].shape[0]

    def __len__(self):
        return len(self.slot_of)

    def _grow(self):
        cap = self.capacity * 2

        def g(t):
            out = torch.zeros((cap,) + tuple(t.shape[1:]), dtype=t.dtype)
            out[: t.shape[0]] = t
            return out

        self.layers = [g(t) for t in self.layers]
        self.logits, self.box, self.s_logit = g(self.logits), g(self.box), g(self.s_logit)

    def alloc(self, node_id: int) -> int:
        if node_id in self.slot_of:
            return self.slot_of[node_id]
        if self._free:
            s = self._free.pop()
        else:
            if self._next >= self.capacity:
                self._grow()
            s = self._next
            self._next += 1
        self.slot_of[node_id] = s
        return s

    def free(self, node_id: int) -> None:
        s = self.slot_of.pop(node_id)
        for t in self.layers:
            t[s] = 0
        self._free.append(s)

    def slots(self, ids) -> torch.Tensor:
        return torch.as_tensor([self.slot_of[i] for i in ids], dtype=torch.int64)

    def rows(self, layer: int, ids) -> torch.Tensor:
        return self.layers[layer][self.slots(ids)]

    def clear(self):
        self.slot_of.clear()
        self._free.clear()
        self._next = 0


def affected_subgraph(graph: MultiGraph, new_node, depth: int, start=None) -> list[set]:
    """[A_0 .. A_depth]; ``start`` seeds A_0 (defaults to {new_node})."""
    a = set(start) if start is not None else {new_node}
    out = [a]
    for _ in range(depth):
        nxt = set(a)
        for i in a:
            nxt |= graph.consumers(i)
        out.append(nxt)
        a = nxt
    return out


@dataclass
class UpdateStats:
    affected: list = field(default_factory=list)
    recomputed_pairs: int = 0
    flops: int = 0


def block_flops(model: Model, block: int, n_s: int, n_t: int, mode="kernel") -> int:
    """Analytic FLOPs of one node at one block with the given in-degrees."""
    cfg = model.cfg
    c_in, c_out = cfg.widths()[block]
    last = block == cfg.num_layers
    f = 0
    if cfg.use_ssl:
        grid = cfg.head_grid if last else cfg.grid
        f += n_s * spline_edge_flops(grid, c_in, c_out, cfg.degree, mode) + 2 * c_in * c_out + c_out
    if cfg.use_mvl:
        # consumer/source transforms, edge transform, logit dot product, weighted sum
        f += 2 * c_in * c_out + n_t * (2 * c_in * c_out + 2 * EDGE_DIM * c_out + 4 * c_out)
    if cfg.use_ssl and cfg.use_mvl:
        f += 2 * 2 * c_out * c_out
    return f + 4 * c_out


class AsyncEngine:
    """Streaming session over a sliding window."""

    def __init__(self, model: Model, geometry: SensorGeometry = GEN1, graph_cfg: GraphConfig | None = None,
                 t_start: int = 0, parallel: bool = False, graph: MultiGraph | None = None):
        self.model = model
        self.cfg = model.cfg
        self.graph = graph if graph is not None else MultiGraph(geometry, graph_cfg or GraphConfig(), t_start)
        widths = [self.cfg.embed_dim] + list(self.cfg.channels) + [self.cfg.head_dim]
        self.depth = len(widths) - 1
        self.cache = LayerCache(widths, self.cfg.num_classes + 1, model.dtype)
        self.executor = ThreadPoolExecutor(max_workers=1) if parallel else None
        self.synced_version = self.graph.version
        self.last_stats = UpdateStats()
        self.total_pairs = 0
        if self.graph.num_nodes:
            self.rebuild()

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()
            self.executor = None

    # -- full recompute ------------------------------------------------------

    @torch.no_grad()
    def rebuild(self) -> None:
        """Dense recompute of every cached row."""
        ga = self.graph.to_arrays()
        self.cache.clear()
        acts = backbone_forward(ga, self.model, False, self.executor, return_all=True)
        acts.append(head_block(self.model, acts[-1], ga, False, self.executor))
        logits, box, s = head_outputs(self.model, acts[-1])
        for i in ga.ids.tolist():
            self.cache.alloc(i)
        slots = self.cache.slots(ga.ids.tolist())
        for layer, a in enumerate(acts):
            self.cache.layers[layer][slots] = a
        self.cache.logits[slots], self.cache.box[slots], self.cache.s_logit[slots] = logits, box, s
        self.synced_version = self.graph.version

    # -- incremental -----------------------------------------------------------

    def _edges_for(self, ids: list[int]) -> Edges:
        g, slot = self.graph, self.cache.slot_of
        parts = {}
        for kind, w in ((SPATIAL, 3), (TEMPORAL, EDGE_DIM)):
            src, dst, attr = [], [], []
            for r, i in enumerate(ids):
                s = g.in_src[kind][i]
                if len(s):
                    src.extend(slot[j] for j in s.tolist())
                    dst.extend([r] * len(s))
                    attr.append(g.in_attr[kind][i])
            parts[kind] = (src, dst, np.concatenate(attr) if attr else np.zeros((0, w)))
        return Edges(len(ids), *parts[SPATIAL], *parts[TEMPORAL])

    @torch.no_grad()
    def _propagate(self, start_layer: int, seeds) -> UpdateStats:
        sets = affected_subgraph(self.graph, None, self.depth - start_layer, start=seeds)
        stats = UpdateStats(affected=[set() for _ in range(start_layer)] + sets)
        cache, model = self.cache, self.model
        edges, prev_ids = None, None
        for k, a in enumerate(sets):
            layer = start_layer + k
            ids = sorted(a)
            if not ids:
                continue
            slots = cache.slots(ids)
            if layer == 0:
                feat = torch.as_tensor(np.stack([self.graph._feat[i] for i in ids]), dtype=model.dtype)
                cache.layers[0][slots] = embed_nodes(model, feat)
            else:
                if ids != prev_ids:
                    edges = self._edges_for(ids)
                    prev_ids = ids
                table = cache.layers[layer - 1]
                h = smvl_block(model, layer - 1, table[slots], table, edges, False, self.executor)
                cache.layers[layer][slots] = h
                n_s = torch.bincount(edges.s_dst, minlength=len(ids)).tolist()
                n_t = torch.bincount(edges.t_dst, minlength=len(ids)).tolist()
                stats.flops += sum(block_flops(model, layer - 1, a_, b_) for a_, b_ in zip(n_s, n_t))
            stats.recomputed_pairs += len(ids)
        top = sorted(sets[-1])
        if top:
            slots = cache.slots(top)
            lg, bx, sl = head_outputs(model, cache.layers[self.depth][slots])
            cache.logits[slots], cache.box[slots], cache.s_logit[slots] = lg, bx, sl
        return stats

    def incremental_forward(self, new_node: int) -> UpdateStats:
        """Bring the cache up to date after ``new_node`` was inserted."""
        g = self.graph
        if g.version == self.synced_version and new_node in self.cache.slot_of:
            return UpdateStats()
        if g.version != self.synced_version + 1 or new_node != g.next_id - 1:
            raise CacheInconsistentError(
                f"cache synced at graph version {self.synced_version}, graph is at {g.version}; "
                "call rebuild()")
        self.cache.alloc(new_node)
        stats = self._propagate(0, {new_node})
        self.synced_version = g.version
        self.last_stats = stats
        self.total_pairs += stats.recomputed_pairs
        return stats

    def process(self, e: Event) -> UpdateStats:
        res = self.graph.insert_event(e)
        return self.incremental_forward(res.node_id)

    def evict_expired(self, t_now: int) -> int:
        if self.graph.version != self.synced_version:
            raise CacheInconsistentError("cache out of date; call rebuild()")
        res = self.graph.evict_expired(t_now)
        for i in res.removed:
            self.cache.free(i)
        if res.touched:
            stats = self._propagate(1, set(res.touched))
            self.total_pairs += stats.recomputed_pairs
        self.synced_version = self.graph.version
        return len(res.removed)

    # -- readout -------------------------------------------------------------

    def activations(self, layer: int, ids=None) -> torch.Tensor:
        ids = self.graph.alive_ids().tolist() if ids is None else ids
        return self.cache.rows(layer, ids)

    def outputs(self, ids=None):
        ids = self.graph.alive_ids().tolist() if ids is None else ids
        s = self.cache.slots(ids)
        return self.cache.logits[s], self.cache.box[s], self.cache.s_logit[s]


@torch.no_grad()
def dense_outputs(graph: MultiGraph, model: Model, executor=None):
    """All layer activations and head outputs by full recompute."""
    ga = graph.to_arrays()
    acts = backbone_forward(ga, model, False, executor, return_all=True)
    acts.append(head_block(model, acts[-1], ga, False, executor))
    return acts, head_outputs(model, acts[-1])


def max_cache_deviation(engine: AsyncEngine) -> float:
    """Max |cached - dense| over all layers and head outputs."""
    acts, heads = dense_outputs(engine.graph, engine.model)
    ids = engine.graph.alive_ids().tolist()
    if not ids:
        return 0.0
    worst = 0.0
    for layer, a in enumerate(acts):
        worst = max(worst, float((engine.activations(layer, ids) - a).abs().max()))
    for c, d in zip(engine.outputs(ids), heads):
        worst = max(worst, float((c - d).abs().max()))
    return worst


# ---------------------------------------------------------------------------
# windowed inference


@torch.no_grad()
def window_outputs(model: Model, events: EventStream, t_start: int, graph_cfg: GraphConfig,
                   mode: str = "dense"):
    """Head outputs for every node of the window graph.

    Returns (graph arrays, probs, box, s) as numpy arrays."""
    if mode == "dense":
        g = build_graph(events, graph_cfg, t_start)
        ga = g.to_arrays()
        if ga.num_nodes == 0:
            return ga, np.zeros((0, model.cfg.num_classes + 1)), np.zeros((0, 4)), np.zeros(0)
        _, (logits, box, s) = dense_outputs(g, model)
    elif mode == "async":
        eng = AsyncEngine(model, events.geometry, graph_cfg, t_start)
        for e in events:
            eng.process(e)
        ga = eng.graph.to_arrays()
        if ga.num_nodes == 0:
            return ga, np.zeros((0, model.cfg.num_classes + 1)), np.zeros((0, 4)), np.zeros(0)
        logits, box, s = eng.outputs()
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    return (ga, torch.softmax(logits, 1).double().numpy(), box.double().numpy(),
            torch.sigmoid(s).double().numpy())


def detections_at(ga, probs, box, s, t_label: int, head: HeadConfig) -> Detections:
    sel = ga.t > t_label - head.detect_horizon
    pos = np.stack([ga.x[sel], ga.y[sel]], 1).astype(np.float64)
    return detect(probs[sel], box[sel], s[sel], pos, ga.ids[sel], head, ga.geometry)


def infer_detections(model: Model, stream: EventStream, label_times, graph_cfg: GraphConfig,
                     head: HeadConfig, mode: str = "dense") -> dict:
    """Detections at each label time from the window ending there."""
    out = {}
    for T in label_times:
        win = window_slice(stream, int(T), graph_cfg.window)
        ga, probs, box, s = window_outputs(model, win, int(T) - graph_cfg.window, graph_cfg, mode)
        out[int(T)] = detections_at(ga, probs, box, s, int(T), head) if ga.num_nodes else Detections()
    return out


# ---------------------------------------------------------------------------
# benchmark


def bench_stream(n: int, geometry: SensorGeometry = GEN1, duration_us: int = 100_000,
                 seed: int = 0) -> EventStream:
    """``n`` events within ``duration_us``: moving rectangles plus uniform
    noise, thinned to exactly ``n``."""
    rng = np.random.default_rng(seed)
    shapes = [RectSpec(float(rng.uniform(40, geometry.width - 40)), float(rng.uniform(40, geometry.height - 40)),
                       float(rng.uniform(20, 60)), float(rng.uniform(20, 60)),
                       float(rng.uniform(-0.4, 0.4)), float(rng.uniform(-0.4, 0.4)))
              for _ in range(8)]
    scene = SceneSpec(shapes, duration_us, noise_rate=0.0, emit_prob=1.0, geometry=geometry)
    st, _ = generate_synthetic(scene, seed)
    if len(st) < n:
        k = n - len(st)
        t = np.concatenate([st.t, rng.integers(1, duration_us + 1, k)])
        x = np.concatenate([st.x, rng.integers(0, geometry.width, k)])
        y = np.concatenate([st.y, rng.integers(0, geometry.height, k)])
        p = np.concatenate([st.p, rng.choice([-1, 1], k)])
        st = EventStream(t, x, y, p, geometry)
    keep = np.sort(rng.choice(len(st), n, replace=False))
    return st.subset(keep)


@dataclass
class BenchRow:
    graph_size: int
    mode: str
    median_ms: float
    p90_ms: float
    recomputed_pairs: float
    mflops_per_event: float


def bench_update(sizes, model: Model, modes=("dense", "serial", "parallel"), n_events: int = 100,
                 warmup: int = 10, dense_events: int | None = None, graph_cfg: GraphConfig | None = None,
                 seed: int = 0, log=None) -> list[BenchRow]:
    """Per-event latency at each graph size. Incremental modes time
    insertion plus cone recompute; dense times insertion plus a full
    forward over the graph. ``dense_events`` caps the dense sample count."""
    torch_model = model
    graph_cfg = graph_cfg or GraphConfig(window=10 ** 12)
    rows = []
    for n in sizes:
        total = n + warmup + n_events
        stream = bench_stream(total, seed=seed + n)
        base = stream.subset(slice(0, n))
        tail = stream.subset(slice(n, total))
        for mode in modes:
            g = build_graph(base, graph_cfg, int(stream.t[0]))
            times, pairs, flops = [], [], []
            if mode == "dense":
                m = n_events if dense_events is None else min(dense_events, n_events)
                for k in range(min(warmup, 1) + m):
                    e = tail[k]
                    t0 = time.perf_counter()
                    g.insert_event(e)
                    ga = g.to_arrays()
                    with torch.no_grad():
                        h = backbone_forward(ga, torch_model)
                        head_outputs(torch_model, head_block(torch_model, h, ga))
                    dt = time.perf_counter() - t0
                    if k >= min(warmup, 1):
                        times.append(dt)
                        pairs.append(ga.num_nodes * (torch_model.cfg.num_layers + 2))
                        flops.append(_dense_flops(torch_model, ga))
            else:
                eng = AsyncEngine(torch_model, stream.geometry, graph_cfg, int(stream.t[0]),
                                  parallel=(mode == "parallel"), graph=g)
                for k in range(warmup + n_events):
                    e = tail[k]
                    t0 = time.perf_counter()
                    st = eng.process(e)
                    dt = time.perf_counter() - t0
                    if k >= warmup:
                        times.append(dt)
                        pairs.append(st.recomputed_pairs)
                        flops.append(st.flops)
                eng.close()
            ms = np.array(times) * 1e3
            row = BenchRow(n, mode, float(np.median(ms)), float(np.percentile(ms, 90)),
                           float(np.mean(pairs)), float(np.mean(flops)) / 1e6)
            rows.append(row)
            if log:
                log(row)
    return rows


def _dense_flops(model: Model, ga) -> int:
    # block_flops is affine in the two in-degrees, so sum over nodes in closed form
    e_s, e_t, n = len(ga.s_dst), len(ga.t_dst), ga.num_nodes
    cfg = model.cfg
    total = n * 2 * cfg.in_dim * cfg.embed_dim
    for b in range(cfg.num_layers + 1):
        c = block_flops(model, b, 0, 0)
        total += n * c + e_s * (block_flops(model, b, 1, 0) - c) + e_t * (block_flops(model, b, 0, 1) - c)
    return total


def bench_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r.graph_size, r.mode, f"{r.median_ms:.4f}", f"{r.p90_ms:.4f}",
                    f"{r.recomputed_pairs:.1f}", f"{r.mflops_per_event:.4f}"])
    return buf.getvalue()


def parse_bench_csv(text: str) -> list[BenchRow]:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if header != BENCH_HEADER:
        raise ValueError("unexpected bench header")
    return [BenchRow(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5])) for r in rd if r]
