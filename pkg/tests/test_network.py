from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch

from stmg.errors import CheckpointError
from stmg.network import (Edges, ModelConfig, ablation_config, backbone_forward, batch_norm, fuse,
                          grad_check, head_outputs, init_model, load_checkpoint, model_forward,
                          param_count, save_checkpoint, smvl_block)
from stmg.spline import count_kernel_params, ssl_forward
from stmg.attention import mvl_forward

from _util import small_graph

TINY = ModelConfig(embed_dim=4, channels=(4, 8), grid=(3, 3, 1), heads=2, head_grid=(3, 3, 1),
                   head_dim=4, num_classes=2)


def expected_params(cfg):
    """Closed-form count, written independently of param_spec."""
    n = cfg.in_dim * cfg.embed_dim + cfg.embed_dim
    widths = [cfg.embed_dim, *cfg.channels, cfg.head_dim]
    for b in range(len(widths) - 1):
        ci, co = widths[b], widths[b + 1]
        grid = cfg.head_grid if b == len(cfg.channels) else cfg.grid
        heads = cfg.head_heads if b == len(cfg.channels) else cfg.heads
        if cfg.use_ssl:
            n += count_kernel_params(grid, ci, co)
        if cfg.use_mvl:
            n += 2 * ci * co + 6 * co + heads * (co // heads) + co
        if cfg.use_ssl and cfg.use_mvl:
            n += 2 * co * co + co
        n += 2 * co
    return n + cfg.head_dim * (cfg.num_classes + 1) + (cfg.num_classes + 1) + cfg.head_dim * 5 + 5


@pytest.mark.parametrize("cfg", [ModelConfig(), TINY, ablation_config(ssl=False), ablation_config(mvl=False),
                                 ablation_config(ssl_kernel="spline3d")])
def test_param_count_closed_form(cfg):
    assert param_count(init_model(cfg)) == expected_params(cfg)


def test_default_param_count_logged():
    n = param_count(init_model(ModelConfig()))
    print(f"default parameter count: {n}")
    assert n == 2_527_192


def test_ablation_switches():
    assert ablation_config(ssl_kernel="gcn").grid == (1, 1, 1)
    assert ablation_config(mvl_agg="single-head").heads == 1
    assert ablation_config(mvl_agg="uniform").mvl_agg == "uniform"
    assert ablation_config(motion_features=False).strip_motion
    with pytest.raises(ValueError):
        ablation_config(ssl=False, mvl=False)


def test_config_text_roundtrip():
    cfg = ablation_config(TINY, mvl=False)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(KeyError):
        ModelConfig.from_text("nonsense = 3\n")


def test_block_equals_reference_composition():
    ga = small_graph(0, 150)
    model = init_model(TINY, seed=1, dtype=torch.float64, bn_stats="random")
    h = torch.randn(ga.num_nodes, 4, dtype=torch.float64)
    out = smvl_block(model, 0, h, h, Edges.from_graph(ga))
    hs = ssl_forward(ga, h, model.kernel(0))
    ht = mvl_forward(ga, h, model.attention(0))
    p = model.params
    y = torch.relu(torch.cat([hs, ht], 1) @ p["layers.0.fuse.weight"] + p["layers.0.fuse.bias"])
    b = model.buffers
    ref = (y - b["layers.0.bn.mean"]) / torch.sqrt(b["layers.0.bn.var"] + 1e-5) * p["layers.0.bn.gamma"] \
        + p["layers.0.bn.beta"]
    torch.testing.assert_close(out, ref)


@pytest.mark.parametrize("which", ["ssl", "mvl"])
def test_single_branch_passes_through(which):
    cfg = ablation_config(TINY, ssl=which == "ssl", mvl=which == "mvl")
    ga = small_graph(1, 120)
    model = init_model(cfg, seed=2, dtype=torch.float64)
    h = torch.randn(ga.num_nodes, 4, dtype=torch.float64)
    out, hs, ht = smvl_block(model, 0, h, h, Edges.from_graph(ga), return_branches=True)
    branch = hs if which == "ssl" else ht
    assert (ht if which == "ssl" else hs) is None
    # identity running stats, unit gamma, zero beta
    torch.testing.assert_close(out, torch.relu(branch) / np.sqrt(1 + 1e-5))


def test_parallel_branches_match_serial():
    ga = small_graph(2, 150)
    model = init_model(TINY, seed=3, dtype=torch.float64, bn_stats="random")
    with ThreadPoolExecutor(1) as ex:
        a = model_forward(ga, model, executor=ex)
    b = model_forward(ga, model)
    for x, y in zip(a, b):
        torch.testing.assert_close(x, y, rtol=0, atol=0)


def test_batch_norm_train_updates_stats():
    x = torch.randn(50, 3, dtype=torch.float64) * 2 + 1
    mean, var = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    y = batch_norm(x, torch.ones(3), torch.zeros(3), mean, var, train=True, momentum=0.1)
    torch.testing.assert_close(y.mean(0), torch.zeros(3, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(mean, 0.1 * x.mean(0))
    torch.testing.assert_close(var, 0.9 + 0.1 * x.var(0, unbiased=True))


def test_fuse_gradients():
    hs, ht = torch.randn(7, 4, dtype=torch.float64), torch.randn(7, 4, dtype=torch.float64)
    w, b = torch.randn(8, 4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    assert grad_check(fuse, [hs, ht, w, b]) < 1e-4


def _block_op(model, ga, block):
    names = sorted(k for k in model.params if k.startswith(("layers.0.", "head.block.")))
    edges = Edges.from_graph(ga)

    def op(h, *vals):
        m = model.clone()
        m.params.update(dict(zip(names, vals)))
        return smvl_block(m, block, h, h, edges)

    return op, [model.params[k] for k in names]


def test_block_gradients_eval_mode():
    ga = small_graph(3, 60)
    model = init_model(TINY, seed=4, dtype=torch.float64, bn_stats="random")
    op, vals = _block_op(model, ga, 0)
    h = torch.randn(ga.num_nodes, 4, dtype=torch.float64)
    assert grad_check(op, [h, *vals], n_coords=120) < 1e-4


def test_head_gradients():
    z = torch.randn(9, TINY.head_dim, dtype=torch.float64)
    model = init_model(TINY, dtype=torch.float64)
    names = ["head.cls.weight", "head.cls.bias", "head.reg.weight", "head.reg.bias"]

    def op(z, *vals):
        m = model.clone()
        m.params.update(dict(zip(names, vals)))
        lg, box, s = head_outputs(m, z)
        return torch.cat([lg, box, s[:, None]], 1)

    assert grad_check(op, [z] + [model.params[k] for k in names]) < 1e-4


def test_head_shapes():
    ga = small_graph(4, 80)
    lg, box, s = model_forward(ga, init_model(TINY))
    assert lg.shape == (ga.num_nodes, 3) and box.shape == (ga.num_nodes, 4) and s.shape == (ga.num_nodes,)


def test_backbone_return_all_depths():
    ga = small_graph(5, 80)
    acts = backbone_forward(ga, init_model(TINY), return_all=True)
    assert [a.shape[1] for a in acts] == [4, 4, 8]


def test_checkpoint_roundtrip_bytes(tmp_path):
    model = init_model(TINY, seed=7, bn_stats="random")
    save_checkpoint(model, tmp_path / "a.ckpt", {"graph_window": 100000})
    m2, extra = load_checkpoint(tmp_path / "a.ckpt")
    assert extra == {"graph_window": "100000"}
    assert m2.cfg == TINY and m2.dtype == torch.float32
    save_checkpoint(m2, tmp_path / "b.ckpt", extra)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.cfg").read_text() == (tmp_path / "b.ckpt.cfg").read_text()


def test_checkpoint_corruption_detected(tmp_path):
    save_checkpoint(init_model(TINY), tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt")
    (tmp_path / "a.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt")
