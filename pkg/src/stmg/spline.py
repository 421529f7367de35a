"""B-spline convolution over spatial edges.

Pseudo-coordinates live in [0, 1]^D. Each dimension with ``k`` control
points uses an open uniform B-spline of the configured degree; the tensor
product of the per-dimension bases selects weighted kernel cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np
import torch

# local B-spline segments on [0, 1): weights of the (degree + 1) active controls
_SEGMENTS = {
    1: lambda f: [1.0 - f, f],
    2: lambda f: [0.5 * (1 - f) ** 2, 0.5 * (-2 * f * f + 2 * f + 1), 0.5 * f * f],
    3: lambda f: [(1 - f) ** 3 / 6, (3 * f ** 3 - 6 * f * f + 4) / 6,
                  (-3 * f ** 3 + 3 * f * f + 3 * f + 1) / 6, f ** 3 / 6],
}


def basis(u: float, k: int, degree: int = 1) -> list[tuple[int, float]]:
    """Active (index, weight) pairs for one coordinate."""
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"pseudo-coordinate {u} outside [0, 1]")
    idx, w = _basis_arrays(np.array([u], dtype=np.float64), k, degree)
    return [(int(i), float(v)) for i, v in zip(idx[0], w[0])]


def _basis_arrays(u: np.ndarray, k: int, degree: int):
    if k < 1:
        raise ValueError("control count must be >= 1")
    if k == 1:
        return np.zeros((len(u), 1), np.int64), np.ones((len(u), 1))
    if len(u) == 0:
        return np.zeros((0, degree + 1), np.int64), np.zeros((0, degree + 1))
    if degree not in _SEGMENTS:
        raise ValueError(f"unsupported spline degree {degree}")
    if k <= degree:
        raise ValueError(f"{k} control points cannot carry degree {degree}")
    s = u * (k - degree)
    i0 = np.minimum(np.floor(s).astype(np.int64), k - degree - 1)
    f = s - i0
    idx = i0[:, None] + np.arange(degree + 1)[None, :]
    w = np.stack(_SEGMENTS[degree](f), axis=1)
    return idx, w


def basis_tensor(attr: np.ndarray, grid, degree: int = 1):
    """Tensor-product basis for edge pseudo-coordinates ``attr`` [E, D].

    Returns (cells [E, P], weights [E, P]). Cell index is
    ix + kx * (iy + ky * it) for a 3D grid.
    """
    attr = np.asarray(attr, dtype=np.float64)
    if attr.ndim != 2 or attr.shape[1] != len(grid):
        raise ValueError(f"attr shape {attr.shape} does not match grid {grid}")
    if attr.size and (attr.min() < 0.0 or attr.max() > 1.0):
        raise ValueError("pseudo-coordinates must lie in [0, 1]")
    e = attr.shape[0]
    cells = np.zeros((e, 1), np.int64)
    weights = np.ones((e, 1))
    stride = 1
    for d, k in enumerate(grid):
        idx, w = _basis_arrays(attr[:, d], k, degree)
        width = cells.shape[1] * idx.shape[1]
        cells = (cells[:, :, None] + stride * idx[:, None, :]).reshape(e, width)
        weights = (weights[:, :, None] * w[:, None, :]).reshape(e, width)
        stride *= k
    return cells, weights


@dataclass
class SplineKernel:
    grid: tuple
    weight: torch.Tensor       # [K, C_in, C_out]
    root: torch.Tensor         # [C_in, C_out]
    bias: torch.Tensor         # [C_out]
    degree: int = 1

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.grid))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def random(cls, grid, c_in, c_out, degree=1, seed=0, dtype=torch.float64):
        gen = torch.Generator().manual_seed(seed)
        k = int(np.prod(grid))
        std = (1.0 / c_in) ** 0.5
        return cls(tuple(grid),
                   torch.randn(k, c_in, c_out, generator=gen, dtype=dtype) * std,
                   torch.randn(c_in, c_out, generator=gen, dtype=dtype) * std,
                   torch.randn(c_out, generator=gen, dtype=dtype) * 0.1,
                   degree)


def count_kernel_params(grid, c_in: int, c_out: int) -> int:
    return int(np.prod(grid)) * c_in * c_out + c_in * c_out + c_out


def spline_term_reduction(grid_a, grid_b) -> float:
    """Fraction of spline weights saved by ``grid_a`` relative to ``grid_b``."""
    return 1.0 - float(np.prod(grid_a)) / float(np.prod(grid_b))


def edge_message(h_j, attr, kernel: SplineKernel) -> np.ndarray:
    """Single-edge message sum_b w_b(attr) * h_j @ W_b (reference form)."""
    h_j = np.asarray(h_j, dtype=np.float64)
    w = kernel.weight.detach().cpu().numpy().astype(np.float64)
    if h_j.shape != (w.shape[1],):
        raise ValueError(f"feature width {h_j.shape} does not match kernel C_in={w.shape[1]}")
    cells, bw = basis_tensor(np.asarray(attr, dtype=np.float64).reshape(1, -1),
                             kernel.grid, kernel.degree)
    out = np.zeros(w.shape[2])
    for c, b in zip(cells[0], bw[0]):
        out += b * (h_j @ w[c])
    return out


# the dense path materialises [n_dst, K * C_in] and runs one GEMM; the gather
# path materialises [U, C_in, C_out]; otherwise fall back to per-cell groups
_DENSE_LIMIT = 1 << 24
_GATHER_LIMIT = 1 << 22


def spline_aggregate(h_src: torch.Tensor, cells: torch.Tensor, bw: torch.Tensor,
                     dst: torch.Tensor, n_dst: int, weight: torch.Tensor) -> torch.Tensor:
    """Mean over in-edges of spline messages.

    h_src [E, C_in] source features per edge, cells/bw [E, P] basis, dst [E]
    consumer rows in [0, n_dst). Returns [n_dst, C_out].
    """
    k, c_in, c_out = weight.shape
    out = h_src.new_zeros((n_dst, c_out))
    e = h_src.shape[0]
    if e == 0:
        return out
    p = cells.shape[1]
    vals = (h_src[:, None, :] * bw[:, :, None].to(h_src.dtype)).reshape(e * p, c_in)
    deg = torch.bincount(dst, minlength=n_dst).clamp(min=1).to(h_src.dtype)
    if n_dst * k * c_in <= _DENSE_LIMIT:
        slab = h_src.new_zeros((n_dst * k, c_in)).index_add_(0, (dst[:, None] * k + cells).reshape(-1), vals)
        return (slab.view(n_dst, k * c_in) @ weight.reshape(k * c_in, c_out)) / deg[:, None]
    # fold edges into unique (dst, cell) slots before touching the weights
    key = (dst[:, None] * k + cells).reshape(-1)
    uniq, inv = torch.unique(key, return_inverse=True)
    z = h_src.new_zeros((len(uniq), c_in)).index_add_(0, inv, vals)
    u_dst = torch.div(uniq, k, rounding_mode="floor")
    u_cell = uniq - u_dst * k
    if len(uniq) * c_in * c_out <= _GATHER_LIMIT:
        msg = torch.bmm(z[:, None, :], weight[u_cell]).squeeze(1)
        out = out.index_add(0, u_dst, msg)
    else:
        order = torch.argsort(u_cell, stable=True)
        counts = torch.bincount(u_cell, minlength=k).tolist()
        chunks, start = [], 0
        for c, n in enumerate(counts):
            if n:
                chunks.append(z[order[start:start + n]] @ weight[c])
                start += n
        out = out.index_add(0, u_dst[order], torch.cat(chunks))
    return out / deg[:, None]


def ssl_apply(h_dst: torch.Tensor, h_src: torch.Tensor, cells, bw, dst, kernel: SplineKernel):
    """bias + h_i @ root + mean spline message; rows of h_dst are consumers."""
    agg = spline_aggregate(h_src, cells, bw, dst, h_dst.shape[0], kernel.weight)
    return kernel.bias + h_dst @ kernel.root + agg


def ssl_forward(graph, features: torch.Tensor, kernel: SplineKernel) -> torch.Tensor:
    """Dense SSL over a :class:`~stmg.graph.GraphArrays` export."""
    if features.shape[1] != kernel.c_in:
        raise ValueError("feature width does not match kernel")
    cells, bw = cached_basis(graph, kernel.grid, kernel.degree)
    src = torch.as_tensor(graph.s_src)
    dst = torch.as_tensor(graph.s_dst)
    return ssl_apply(features, features[src], cells, bw, dst, kernel)


def cached_basis(graph, grid, degree):
    """Basis tensors for a graph export, memoised on the export object."""
    key = ("basis", tuple(grid), degree)
    hit = graph.cache.get(key)
    if hit is None:
        attr = np.asarray(graph.s_attr, dtype=np.float64)
        if len(grid) < 3:
            attr = attr[:, : len(grid)]
        c, w = basis_tensor(attr, grid, degree)
        hit = (torch.as_tensor(c), torch.as_tensor(w))
        graph.cache[key] = hit
    return hit


def spline_edge_flops(grid, c_in: int, c_out: int, degree: int = 1, mode: str = "kernel") -> int:
    """FLOPs of one spline edge message.

    ``kernel`` counts every kernel cell (2*K*C_in*C_out), the quantity that
    scales with kernel size; ``active`` counts only the cells with non-zero
    basis weight."""
    if mode == "kernel":
        cells = int(np.prod(grid))
    elif mode == "active":
        cells = reduce(lambda a, k: a * (1 if k == 1 else degree + 1), grid, 1)
    else:
        raise ValueError(f"unknown FLOP mode {mode!r}")
    return 2 * cells * c_in * c_out

