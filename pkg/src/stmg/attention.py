"""Motion-vector attention over temporal edges (GATv2-style, edge features
added inside the shared nonlinearity and to the value)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EDGE_DIM = 6
MOTION_COMPONENTS = (3, 4, 5)


@dataclass
class AttentionParams:
    w_t: torch.Tensor      # [C_in, H*C_h]  consumer (target) transform
    w_s: torch.Tensor      # [C_in, H*C_h]  source transform
    w_e: torch.Tensor      # [6, H*C_h]     edge transform
    att: torch.Tensor      # [H, C_h]
    bias: torch.Tensor     # [H*C_h]
    heads: int = 4
    slope: float = 0.2

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.w_s.shape[1] % self.heads:
            raise ValueError("output width must be divisible by heads")

    @property
    def c_out(self) -> int:
        return self.w_s.shape[1]

    @property
    def c_head(self) -> int:
        return self.c_out // self.heads

    @classmethod
    def random(cls, c_in, c_out, heads=4, seed=0, dtype=torch.float64):
        if c_out % heads:
            raise ValueError("output width must be divisible by heads")
        gen = torch.Generator().manual_seed(seed)
        std = (1.0 / c_in) ** 0.5
        r = lambda *s, sc=std: torch.randn(*s, generator=gen, dtype=dtype) * sc  # noqa: E731
        return cls(r(c_in, c_out), r(c_in, c_out), r(EDGE_DIM, c_out, sc=0.4),
                   r(heads, c_out // heads, sc=(1.0 / (c_out // heads)) ** 0.5),
                   r(c_out, sc=0.1), heads)


def strip_motion_features(e):
    """Zero the velocity and polarity components of temporal attributes."""
    if isinstance(e, torch.Tensor):
        out = e.clone()
    else:
        out = np.array(e, dtype=np.float64, copy=True)
    out[..., list(MOTION_COMPONENTS)] = 0
    return out


def attention_logit(h_i, h_j, e_ij, params: AttentionParams, head: int) -> float:
    """a_h . leaky_relu(W_t h_i + W_s h_j + W_e e) for a single edge."""
    h_i, h_j, e_ij = (torch.as_tensor(v, dtype=params.w_s.dtype) for v in (h_i, h_j, e_ij))
    sl = slice(head * params.c_head, (head + 1) * params.c_head)
    z = h_i @ params.w_t[:, sl] + h_j @ params.w_s[:, sl] + e_ij @ params.w_e[:, sl]
    return float(F.leaky_relu(z, params.slope) @ params.att[head])


def segment_softmax(logits: torch.Tensor, dst: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax over edges sharing a consumer. logits [E, H]."""
    h = logits.shape[1]
    idx = dst[:, None].expand(-1, h)
    mx = logits.new_full((n, h), -torch.inf).scatter_reduce(
        0, idx, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - mx[dst])
    den = logits.new_zeros((n, h)).index_add(0, dst, ex)
    return ex / den[dst]


def mvl_apply(h_dst: torch.Tensor, h_src: torch.Tensor, attr: torch.Tensor, dst: torch.Tensor,
              params: AttentionParams, agg: str = "attention") -> torch.Tensor:
    """Per-consumer attention aggregation. h_src/attr are per edge; dst [E]
    indexes rows of h_dst. Returns [M, H*C_h]."""
    m = h_dst.shape[0]
    H, ch = params.heads, params.c_head
    out = h_dst.new_zeros((m, H, ch))
    if h_src.shape[0]:
        src_t = h_src @ params.w_s
        edge_t = attr.to(h_src.dtype) @ params.w_e
        value = (src_t + edge_t).view(-1, H, ch)
        if agg == "uniform":
            deg = torch.bincount(dst, minlength=m).clamp(min=1).to(h_src.dtype)
            alpha = (1.0 / deg[dst])[:, None].expand(-1, H)
        elif agg == "attention":
            z = (h_dst @ params.w_t)[dst] + src_t + edge_t
            logits = (F.leaky_relu(z.view(-1, H, ch), params.slope) * params.att).sum(-1)
            alpha = segment_softmax(logits, dst, m)
        else:
            raise ValueError(f"unknown aggregation {agg!r}")
        out = out.index_add(0, dst, alpha[:, :, None] * value)
    return out.reshape(m, H * ch) + params.bias


def mvl_forward(graph, features: torch.Tensor, params: AttentionParams,
                agg: str = "attention", strip_motion: bool = False) -> torch.Tensor:
    src = torch.as_tensor(graph.t_src)
    dst = torch.as_tensor(graph.t_dst)
    attr = torch.as_tensor(graph.t_attr, dtype=features.dtype)
    if strip_motion:
        attr = strip_motion_features(attr)
    return mvl_apply(features, features[src], attr, dst, params, agg)


def attention_weights(graph, features: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """alpha [E_t, H] for the temporal edges of ``graph``."""
    src = torch.as_tensor(graph.t_src)
    dst = torch.as_tensor(graph.t_dst)
    attr = torch.as_tensor(graph.t_attr, dtype=features.dtype)
    H, ch = params.heads, params.c_head
    z = (features @ params.w_t)[dst] + features[src] @ params.w_s + attr @ params.w_e
    logits = (F.leaky_relu(z.view(-1, H, ch), params.slope) * params.att).sum(-1)
    return segment_softmax(logits, dst, features.shape[0])
