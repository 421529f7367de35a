import numpy as np
import pytest
import torch

from stmg.engine import (AsyncEngine, affected_subgraph, bench_stream, bench_to_csv, bench_update,
                         block_flops, infer_detections, max_cache_deviation, parse_bench_csv,
                         window_outputs)
from stmg.errors import CacheInconsistentError
from stmg.events import GEN1, Event
from stmg.graph import GraphConfig, MultiGraph
from stmg.detection import HeadConfig
from stmg.network import ModelConfig, init_model

from _util import cluster_stream, rect_sequence

TINY = ModelConfig(embed_dim=4, channels=(4, 8, 8), grid=(3, 3, 1), heads=2, head_grid=(3, 3, 1),
                   head_dim=4, num_classes=2)


def double_model(cfg=TINY, seed=0):
    return init_model(cfg, seed=seed, dtype=torch.float64, bn_stats="random")


def test_affected_chain():
    g = MultiGraph(GEN1, GraphConfig(edge_direction="printed"), 0)
    for x, t in ((0, 0), (8, 1), (16, 2)):
        g.insert_event(Event(x, 100, t, 1))
    c, b, a = 0, 1, 2
    sets = affected_subgraph(g, a, 2)
    assert sets[0] == {a}
    assert b in sets[1] and c not in sets[1]
    assert c in sets[2]


@pytest.mark.parametrize("direction", ["causal", "printed"])
def test_streaming_equals_dense(direction):
    s = cluster_stream(11, n=150, duration=30_000)
    eng = AsyncEngine(double_model(), GEN1, GraphConfig(edge_direction=direction), 0)
    for e in s:
        eng.process(e)
    assert max_cache_deviation(eng) < 1e-6


def test_parallel_engine_equals_dense():
    s = cluster_stream(12, n=120)
    eng = AsyncEngine(double_model(), GEN1, GraphConfig(), 0, parallel=True)
    for e in s:
        eng.process(e)
    assert max_cache_deviation(eng) < 1e-6
    eng.close()


def test_eviction_then_stream_matches_dense():
    s = cluster_stream(13, n=240, duration=180_000)
    cfg = GraphConfig(window=60_000, edge_direction="printed")
    eng = AsyncEngine(double_model(), GEN1, cfg, 0)
    for k, e in enumerate(s):
        eng.process(e)
        if k % 40 == 39:
            eng.evict_expired(e.t)
            assert max_cache_deviation(eng) < 1e-6
    assert eng.graph.num_nodes < len(s)
    assert max_cache_deviation(eng) < 1e-6


def test_corrupted_cache_is_detected():
    s = cluster_stream(14, n=60)
    eng = AsyncEngine(double_model(), GEN1, GraphConfig(), 0)
    for e in s:
        eng.process(e)
    eng.cache.layers[2][eng.cache.slot_of[30], 0] += 1e-3
    assert max_cache_deviation(eng) > 1e-4


def test_version_mismatch_raises():
    eng = AsyncEngine(double_model(), GEN1, GraphConfig(), 0)
    res = eng.graph.insert_event(Event(5, 5, 10, 1))
    eng.graph.insert_event(Event(6, 5, 20, 1))
    with pytest.raises(CacheInconsistentError):
        eng.incremental_forward(res.node_id)
    eng.rebuild()
    assert max_cache_deviation(eng) < 1e-12


def test_repeat_forward_is_noop():
    eng = AsyncEngine(double_model(), GEN1, GraphConfig(), 0)
    stats = eng.process(Event(5, 5, 10, 1))
    again = eng.incremental_forward(0)
    assert stats.recomputed_pairs > 0 and again.recomputed_pairs == 0


def test_dense_and_async_windows_agree():
    stream, gt = rect_sequence(1, 60_000)
    model = init_model(TINY, seed=3, dtype=torch.float64, bn_stats="random")
    a = window_outputs(model, stream, 0, GraphConfig(), "dense")
    b = window_outputs(model, stream, 0, GraphConfig(), "async")
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_allclose(x, y, atol=1e-9)
    da = infer_detections(model, stream, [30_000, 60_000], GraphConfig(), HeadConfig(score_threshold=0.0))
    db = infer_detections(model, stream, [30_000, 60_000], GraphConfig(), HeadConfig(score_threshold=0.0),
                          mode="async")
    for t in da:
        np.testing.assert_allclose(da[t].boxes, db[t].boxes, atol=1e-9)


def test_block_flops_scale_with_degree():
    m = init_model(TINY)
    base = block_flops(m, 1, 0, 0)
    assert block_flops(m, 1, 2, 0) - base == 2 * (block_flops(m, 1, 1, 0) - base)


def test_bench_stream_exact_size():
    s = bench_stream(3000, seed=1)
    assert len(s) == 3000
    assert np.all(np.diff(s.t) >= 0)


def test_bench_smoke_and_csv():
    rows = bench_update([300, 600], init_model(TINY), n_events=5, warmup=2, dense_events=3)
    assert [r.graph_size for r in rows] == [300, 300, 300, 600, 600, 600]
    text = bench_to_csv(rows)
    assert bench_to_csv(parse_bench_csv(text)) == text
    for r in rows:
        assert r.median_ms > 0
