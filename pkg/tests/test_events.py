import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmg.errors import EventParseError, EventValidationError
from stmg.events import (GEN1, Event, EventStream, GroundTruth, RectSpec, SceneSpec, SensorGeometry,
                         downsample_density, events_to_binary, events_to_csv, generate_synthetic,
                         label_times, labels_to_csv, parse_events, parse_labels, random_scene,
                         window_slice)


def test_parse_csv_basic():
    text = "# t_us,x,y,p\n10,1,2,1\n5,3,4,0\n"
    s = parse_events(text)
    assert len(s) == 2
    # sorted by time, polarity 0 maps to -1
    assert s[0] == Event(3, 4, 5, -1)
    assert s[1] == Event(1, 2, 10, 1)


def test_parse_error_reports_line():
    with pytest.raises(EventParseError) as exc:
        parse_events("# t_us,x,y,p\n10,1,2,1\n11,oops,2,1\n")
    assert exc.value.line == 3


def test_out_of_bounds_rejected():
    with pytest.raises(EventValidationError):
        parse_events("10,304,2,1\n")
    with pytest.raises(EventValidationError):
        parse_events("10,5,240,1\n")


def test_binary_detected_by_magic():
    s = EventStream([1, 2, 3], [0, 10, 303], [0, 5, 239], [1, -1, 1])
    data = events_to_binary(s)
    assert parse_events(data).equals(s)
    assert parse_events(io.BytesIO(data)).equals(s)


def test_file_roundtrip(tmp_path):
    s = EventStream([1, 2, 3], [0, 10, 303], [0, 5, 239], [1, -1, 1])
    p = tmp_path / "ev.csv"
    p.write_text(events_to_csv(s))
    assert parse_events(p).equals(s)


def test_generator_kinematics():
    # rectangle moving +10 px per 10 ms for 100 ms, labels at 30 Hz
    scene = SceneSpec(shapes=[RectSpec(100, 120, 40, 20, vx=1.0)], duration_us=100_000, label_hz=30)
    stream, gt = generate_synthetic(scene, seed=3)
    assert len(gt) == 3
    t = gt.boxes[:, 0]
    assert list(t) == [33333, 66667, 100000]
    np.testing.assert_allclose(gt.boxes[:, 2], 100 + t / 1000, atol=1e-9)
    np.testing.assert_allclose(np.diff(gt.boxes[:, 2]) / (np.diff(t) / 1000), 1.0)
    assert np.all(gt.boxes[:, 3] == 120)
    assert len(stream) > 0
    stream.validate()


def test_generator_deterministic_per_seed():
    scene = random_scene(np.random.default_rng(5))
    a, ga = generate_synthetic(scene, 11)
    b, gb = generate_synthetic(scene, 11)
    c, _ = generate_synthetic(scene, 12)
    assert a.equals(b) and np.array_equal(ga.boxes, gb.boxes)
    assert not a.equals(c)


def test_generator_events_near_edges():
    # noise-free events all lie on the boundary band swept by the rectangle
    scene = SceneSpec(shapes=[RectSpec(150, 120, 40, 30, vx=0.3)], noise_rate=0.0)
    s, _ = generate_synthetic(scene, 0)
    cx = 150 + 0.3 * s.t / 1000
    left, right = cx - 20, cx + 20
    near_x = np.minimum(np.abs(s.x + 0.5 - left), np.abs(s.x + 0.5 - right)) <= 2
    assert near_x.all()


def test_label_times():
    assert label_times(100_000, 30) == [33333, 66667, 100000]
    assert label_times(100_000, 20) == [50000, 100000]


def test_window_slice():
    s = EventStream([10_000, 50_000, 120_000], [1, 2, 3], [1, 1, 1], [1, 1, 1])
    w = window_slice(s, 120_000, 100_000)
    assert list(w.t) == [50_000, 120_000]


def test_downsample_bucket_cap():
    t = np.full(300, 2500)
    s = EventStream(t, np.arange(300) % 304, np.zeros(300, int), np.ones(300, int))
    d = downsample_density(s, 250, seed=0)
    assert len(d) == 250
    assert len(downsample_density(s, 400)) == 300


def test_labels_roundtrip():
    gt = GroundTruth([[33333, 0, 10.5, 20.25, 30, 40], [33333, 1, 1, 2, 3, 4]])
    text = labels_to_csv(gt)
    back = parse_labels(text)
    np.testing.assert_array_equal(back.boxes, gt.boxes)
    assert labels_to_csv(back) == text
    assert list(gt.times()) == [33333]


def test_scene_dict_roundtrip():
    sc = random_scene(np.random.default_rng(0))
    assert SceneSpec.from_dict(sc.to_dict()).to_dict() == sc.to_dict()


def test_geometry_max_dim():
    assert GEN1.max_dim == 304
    assert SensorGeometry(100, 300).max_dim == 300


events_strategy = st.lists(
    st.tuples(st.integers(0, 303), st.integers(0, 239), st.integers(0, 10**7), st.sampled_from([-1, 1])),
    max_size=60,
)


@given(events_strategy)
@settings(max_examples=60, deadline=None)
def test_csv_and_binary_roundtrip_property(evs):
    s = EventStream.from_events([Event(*e) for e in evs])
    csv = events_to_csv(s)
    assert events_to_csv(parse_events(csv)) == csv
    b = events_to_binary(s)
    assert events_to_binary(parse_events(b)) == b
    assert np.all(np.diff(s.t) >= 0)


@given(st.integers(1, 50), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_downsample_never_exceeds_cap(cap, seed):
    r = np.random.default_rng(seed)
    t = np.sort(r.integers(0, 20_000, 500))
    s = EventStream(t, r.integers(0, 304, 500), r.integers(0, 240, 500), r.choice([-1, 1], 500))
    d = downsample_density(s, cap, seed)
    counts = np.bincount(d.t // 1000)
    assert counts.max(initial=0) <= cap
    full = np.bincount(s.t // 1000, minlength=len(counts))
    assert np.all(counts == np.minimum(full[: len(counts)], cap))
