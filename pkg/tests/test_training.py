import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stmg.errors import DataError, NumericError
from stmg.events import EventStream, GroundTruth
from stmg.graph import GraphConfig
from stmg.network import ModelConfig, grad_check
from stmg.training import (AdamState, AugmentConfig, LossWeights, OptimizerConfig, Sequence, TrainConfig,
                           augment, ciou, class_weights_from_counts, conf_targets, crop, huber,
                           loss_cls, loss_conf, loss_dim, loss_loc, lr_at, make_samples, merge_graphs,
                           optimizer_step, total_loss, train, translate)

from _util import rect_sequence, small_graph


def test_uniform_prediction_loss_is_ln3():
    logits = torch.zeros(5, 3, dtype=torch.float64)
    loss = loss_cls(logits, torch.tensor([0, 1, 2, 2, 0]), torch.ones(3))
    assert float(loss) == pytest.approx(math.log(3))
    assert float(loss) == pytest.approx(1.0986, abs=1e-4)


def test_ciou_identical_is_zero():
    b = torch.tensor([[10.0, 20.0, 8.0, 4.0]], dtype=torch.float64)
    assert float(ciou(b, b)) == pytest.approx(0.0, abs=1e-9)


def test_ciou_disjoint_exceeds_one():
    a = torch.tensor([[10.0, 10.0, 4.0, 4.0]], dtype=torch.float64)
    b = torch.tensor([[40.0, 10.0, 4.0, 4.0]], dtype=torch.float64)
    # IoU 0, same aspect; distance term = 30^2 / 34^2
    assert float(ciou(a, b)) == pytest.approx(1 + 900 / (34 ** 2 + 4 ** 2))
    assert float(ciou(a, b)) > 1


def test_huber_pieces():
    r = torch.tensor([0.5, 2.0, -2.0], dtype=torch.float64)
    assert huber(r).tolist() == [0.125, 1.5, 1.5]


def test_total_loss_weights():
    parts = [torch.tensor(v) for v in (0.1, 0.2, 0.3, 0.4)]
    assert float(total_loss(parts, LossWeights())) == pytest.approx(2.0)


def test_conf_target_threshold():
    gt = np.array([[5.0, 5, 10, 10]])
    hit = np.array([[7.5, 5, 10, 10]])     # IoU exactly 0.6
    miss = np.array([[10.0, 5, 10, 10]])   # IoU 1/3
    assert conf_targets(hit, gt, np.array([True]))[0] == 1.0
    assert conf_targets(miss, gt, np.array([True]))[0] == 0.0
    assert conf_targets(hit, gt, np.array([False]))[0] == 0.0


def test_loc_and_dim_without_positives_are_zero_with_grad():
    p = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    none = torch.zeros(4, dtype=torch.bool)
    assert float(loss_loc(p, p.detach(), none).detach()) == 0.0
    assert float(loss_dim(p[:, 2:], p.detach()[:, 2:], none).detach()) == 0.0
    loss_loc(p, p.detach(), none).backward()
    assert torch.equal(p.grad, torch.zeros_like(p))


def _boxes(n, seed):
    g = torch.Generator().manual_seed(seed)
    xy = torch.rand(n, 2, generator=g, dtype=torch.float64) * 50
    wh = 5 + torch.rand(n, 2, generator=g, dtype=torch.float64) * 20
    return torch.cat([xy, wh], 1)


def test_loss_gradients():
    pred, gt = _boxes(6, 0), _boxes(6, 1)
    mask = torch.tensor([1, 1, 0, 1, 1, 1], dtype=torch.bool)
    labels = torch.tensor([0, 1, 2, 2, 1, 0])
    cw = torch.tensor([1.0, 2.0, 0.5], dtype=torch.float64)
    assert grad_check(lambda lg: loss_cls(lg, labels, cw), [torch.randn(6, 3)]) < 1e-4
    # push the pair apart a little so the boxes overlap partially
    assert grad_check(lambda p: loss_loc(p, gt, mask), [gt + torch.randn(6, 4, dtype=torch.float64)]) < 1e-4
    assert grad_check(lambda p: loss_dim(p, gt[:, 2:] / 20, mask), [torch.randn(6, 2) * 0.4]) < 1e-4
    decoded = pred.numpy()

    def conf(s):
        return loss_conf(s, torch.as_tensor(decoded), gt.numpy(), mask.numpy())

    assert grad_check(conf, [torch.randn(6)]) < 1e-4


def test_class_weights_inverse_frequency():
    w = class_weights_from_counts([10, 30, 60])
    np.testing.assert_allclose(w / w[0], [1, 1 / 3, 1 / 6])
    assert w.mean() == pytest.approx(1.0)


def test_translation_shifts_events_and_boxes():
    stream, gt = rect_sequence(0)
    dx = int(round(0.10 * 304))
    s2, g2 = translate(stream, gt, dx, 0)
    keep = stream.x + dx < 304
    np.testing.assert_array_equal(s2.x, stream.x[keep] + dx)
    np.testing.assert_array_equal(s2.t, stream.t[keep])
    np.testing.assert_allclose(g2.boxes[:, 2], gt.boxes[:, 2] + dx)


def test_crop_rebases_and_clips():
    s = EventStream([1, 2, 3], [10, 50, 100], [10, 50, 100], [1, 1, 1])
    gt = GroundTruth([[3, 0, 50, 50, 20, 20]])
    s2, g2 = crop(s, gt, 45, 45, 40, 40)
    assert s2.x.tolist() == [5] and s2.y.tolist() == [5]
    np.testing.assert_allclose(g2.boxes[0, 2:], [7.5, 7.5, 15, 15])


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_augment_keeps_events_on_sensor_and_a_box(seed):
    stream, gt = rect_sequence(1)
    s2, g2 = augment(stream, gt, AugmentConfig(p_translate=0.7, p_crop=0.7), seed)
    s2.validate()
    assert len(g2) >= 1
    assert np.all(g2.boxes[:, 4] > 0) and np.all(g2.boxes[:, 5] > 0)


def test_augment_needs_labels():
    stream, _ = rect_sequence(2)
    with pytest.raises(DataError):
        augment(stream, GroundTruth(), seed=0)


def test_schedule_points():
    cfg = OptimizerConfig()
    assert lr_at(0, cfg) == pytest.approx(1.6e-5)
    assert lr_at(int(0.3 * cfg.total_steps), cfg) == pytest.approx(4e-4)
    assert lr_at(cfg.total_steps, cfg) == pytest.approx(4e-8)
    with pytest.raises(ValueError):
        lr_at(cfg.total_steps + 1, cfg)


@given(st.integers(0, 175_000))
@settings(max_examples=60, deadline=None)
def test_schedule_bounds(step):
    cfg = OptimizerConfig()
    assert 4e-8 - 1e-18 <= lr_at(step, cfg) <= 4e-4 + 1e-18


def test_adamw_hand_recurrence():
    cfg = OptimizerConfig(max_lr=0.1, weight_decay=0.01, total_steps=10)
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    st_ = AdamState()
    grads = [0.5, -0.2, 0.3]
    w, m, v = 1.0, 0.0, 0.0
    lr = 0.01
    for t, g in enumerate(grads, start=1):
        optimizer_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, st_, cfg, t - 1, lr=lr)
        w *= 1 - lr * 0.01
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert float(p["w"]) == pytest.approx(w, rel=1e-12)


def test_adamw_matches_torch():
    cfg = OptimizerConfig(max_lr=1e-2, weight_decay=0.1, total_steps=20)
    g0 = torch.Generator().manual_seed(0)
    w0 = torch.randn(5, 3, generator=g0, dtype=torch.float64)
    mine = {"w": w0.clone()}
    ref = w0.clone().requires_grad_(True)
    opt = torch.optim.AdamW([ref], lr=1e-2, weight_decay=0.1, betas=(0.9, 0.999), eps=1e-8)
    st_ = AdamState()
    for k in range(5):
        g = torch.randn(5, 3, generator=g0, dtype=torch.float64)
        optimizer_step(mine, {"w": g}, st_, cfg, k, lr=1e-2)
        ref.grad = g.clone()
        opt.step()
    torch.testing.assert_close(mine["w"], ref.detach(), rtol=1e-10, atol=1e-12)


def test_non_finite_gradient_raises():
    with pytest.raises(NumericError):
        optimizer_step({"w": torch.zeros(1)}, {"w": torch.tensor([float("nan")])}, AdamState(),
                       OptimizerConfig(), 0)


def test_merge_graphs_offsets():
    a, b = small_graph(0, 50), small_graph(1, 40)
    m = merge_graphs([a, b])
    assert m.num_nodes == 90
    assert len(m.s_src) == len(a.s_src) + len(b.s_src)
    assert m.s_src[len(a.s_src):].min() >= 50


def test_samples_one_per_label_time():
    stream, gt = rect_sequence(3)
    samples = make_samples([Sequence(stream, gt)], 100_000)
    assert [s.t_end for s in samples] == [33333, 66667, 100000]
    assert all(s.events.t.max() <= s.t_end for s in samples)


@pytest.mark.slow
def test_overfit_single_sequence():
    stream, gt = rect_sequence(4)
    samples = make_samples([Sequence(stream, gt)], 100_000)[-1:]
    cfg = ModelConfig(channels=(16, 16, 32, 32), head_dim=32)
    res = train(samples, [], cfg, TrainConfig(steps=500, batch_size=1, augment=False, max_lr=3e-3,
                                              weight_decay=0.0))
    losses = np.array([row[-1] for row in res.log])
    first, last = losses[:10].mean(), losses[-10:].mean()
    print(f"overfit loss {first:.4f} -> {last:.4f}")
    assert last * 10 <= first
