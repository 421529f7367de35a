"""Shared builders for tests."""

import numpy as np

from stmg.events import EventStream, RectSpec, SceneSpec, generate_synthetic
from stmg.graph import GraphConfig, build_graph


def cluster_stream(seed, n=200, duration=40_000, spread=15):
    r = np.random.default_rng(seed)
    cx, cy = r.integers(30, 270), r.integers(30, 210)
    x = np.clip(cx + r.integers(-spread, spread + 1, n), 0, 303)
    y = np.clip(cy + r.integers(-spread, spread + 1, n), 0, 239)
    t = np.sort(r.integers(0, duration, n))
    return EventStream(t, x, y, r.choice([-1, 1], n))


def small_graph(seed=0, n=200, cfg=None):
    s = cluster_stream(seed, n)
    return build_graph(s, cfg or GraphConfig(), 0).to_arrays()


def rect_sequence(seed=0, duration_us=100_000):
    scene = SceneSpec(shapes=[RectSpec(120, 100, 50, 24, vx=0.3, class_id=0)],
                      duration_us=duration_us, noise_rate=1.0)
    return generate_synthetic(scene, seed)
