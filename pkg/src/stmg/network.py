"""Model composition: embedding, SMVL blocks (SSL || MVL -> fusion -> ReLU ->
BatchNorm), the detection-head block, parameter bookkeeping, checkpoints and
a finite-difference gradient checker.

Layer numbering used by the asynchronous engine: 0 is the embedding, 1..L
are backbone blocks, L+1 is the head block.
"""

from __future__ import annotations

import struct
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionParams, mvl_apply, strip_motion_features
from .errors import CheckpointError
from .spline import SplineKernel, basis_tensor, ssl_apply

SSL_KERNELS = ("spline2d", "spline3d", "gcn")
MVL_AGGS = ("attention", "uniform", "single-head")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 4
    embed_dim: int = 16
    channels: tuple = (16, 16, 32, 32, 64, 64, 128, 128)
    grid: tuple = (8, 8, 1)
    degree: int = 1
    heads: int = 4
    head_grid: tuple = (5, 5, 1)
    head_heads: int = 1
    head_dim: int = 64
    num_classes: int = 2
    use_ssl: bool = True
    use_mvl: bool = True
    mvl_agg: str = "attention"
    strip_motion: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "grid", tuple(int(k) for k in self.grid))
        object.__setattr__(self, "head_grid", tuple(int(k) for k in self.head_grid))
        if not self.channels or min(self.channels) <= 0 or self.embed_dim <= 0 or self.head_dim <= 0:
            raise ValueError("channel widths must be positive and non-empty")
        if not (self.use_ssl or self.use_mvl):
            raise ValueError("at least one of SSL and MVL must be enabled")
        if self.mvl_agg not in ("attention", "uniform"):
            raise ValueError(f"unknown MVL aggregation {self.mvl_agg!r}")
        if self.use_mvl:
            for c in self.channels:
                if c % self.heads:
                    raise ValueError(f"width {c} not divisible by {self.heads} heads")
            if self.head_dim % self.head_heads:
                raise ValueError("head width not divisible by head heads")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    def widths(self) -> list[tuple[int, int]]:
        """(C_in, C_out) of every message-passing block, head block last."""
        ins = (self.embed_dim,) + self.channels
        outs = self.channels + (self.head_dim,)
        return list(zip(ins, outs))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_kv(text, cls))


def parse_kv(text: str, cls) -> dict:
    """Line-based ``key = value`` parsing typed by the dataclass defaults.
    Unknown keys are rejected."""
    types = {f.name: f for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise KeyError(f"unknown config key {k!r}")
        out[k] = coerce(types[k], v)
    return out


def coerce(f, v: str):
    default = f.default
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes"):
            return True
        if v.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{f.name}: not a boolean: {v!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in v.replace("(", "").replace(")", "").split(",") if x.strip())
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


def ablation_config(base: ModelConfig | None = None, *, ssl=True, mvl=True, ssl_kernel="spline2d",
                    mvl_agg="attention", motion_features=True, **kw) -> ModelConfig:
    """Map the ablation switches onto a ModelConfig."""
    base = base or ModelConfig()
    if ssl_kernel not in SSL_KERNELS:
        raise ValueError(f"unknown SSL kernel {ssl_kernel!r}")
    if mvl_agg not in MVL_AGGS:
        raise ValueError(f"unknown MVL aggregation {mvl_agg!r}")
    k = base.grid[0]
    grid = {"spline2d": (k, k, 1), "spline3d": (k, k, k), "gcn": (1, 1, 1)}[ssl_kernel]
    hk = base.head_grid[0]
    head_grid = {"spline2d": (hk, hk, 1), "spline3d": (hk, hk, hk), "gcn": (1, 1, 1)}[ssl_kernel]
    heads = 1 if mvl_agg == "single-head" else base.heads
    agg = "uniform" if mvl_agg == "uniform" else "attention"
    return replace(base, use_ssl=ssl, use_mvl=mvl, grid=grid, head_grid=head_grid, heads=heads,
                   mvl_agg=agg, strip_motion=not motion_features, **kw)


# ---------------------------------------------------------------------------
# parameters


def _block_names(prefix: str, cfg: ModelConfig, c_in: int, c_out: int, grid, heads):
    """name -> (shape, init kind) for one SMVL block."""
    spec = {}
    if cfg.use_ssl:
        spec[f"{prefix}.ssl.weight"] = ((int(np.prod(grid)), c_in, c_out), "fan", c_in)
        spec[f"{prefix}.ssl.root"] = ((c_in, c_out), "fan", c_in)
        spec[f"{prefix}.ssl.bias"] = ((c_out,), "zero", 0)
    if cfg.use_mvl:
        spec[f"{prefix}.mvl.w_t"] = ((c_in, c_out), "fan", c_in)
        spec[f"{prefix}.mvl.w_s"] = ((c_in, c_out), "fan", c_in)
        spec[f"{prefix}.mvl.w_e"] = ((6, c_out), "fan", 6)
        spec[f"{prefix}.mvl.att"] = ((heads, c_out // heads), "fan", c_out // heads)
        spec[f"{prefix}.mvl.bias"] = ((c_out,), "zero", 0)
    if cfg.use_ssl and cfg.use_mvl:
        spec[f"{prefix}.fuse.weight"] = ((2 * c_out, c_out), "fan", 2 * c_out)
        spec[f"{prefix}.fuse.bias"] = ((c_out,), "zero", 0)
    spec[f"{prefix}.bn.gamma"] = ((c_out,), "one", 0)
    spec[f"{prefix}.bn.beta"] = ((c_out,), "zero", 0)
    return spec


def param_spec(cfg: ModelConfig) -> dict:
    spec = {"embed.weight": ((cfg.in_dim, cfg.embed_dim), "fan", cfg.in_dim),
            "embed.bias": ((cfg.embed_dim,), "zero", 0)}
    for i, (c_in, c_out) in enumerate(cfg.widths()):
        last = i == cfg.num_layers
        prefix = "head.block" if last else f"layers.{i}"
        spec.update(_block_names(prefix, cfg, c_in, c_out,
                                 cfg.head_grid if last else cfg.grid,
                                 cfg.head_heads if last else cfg.heads))
    n = cfg.num_classes + 1
    spec["head.cls.weight"] = ((cfg.head_dim, n), "fan", cfg.head_dim)
    spec["head.cls.bias"] = ((n,), "zero", 0)
    spec["head.reg.weight"] = ((cfg.head_dim, 5), "small", cfg.head_dim)
    spec["head.reg.bias"] = ((5,), "zero", 0)
    return spec


def block_prefix(cfg: ModelConfig, block: int) -> str:
    return "head.block" if block == cfg.num_layers else f"layers.{block}"


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    buffers: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def to(self, dtype) -> "Model":
        return Model(self.cfg, {k: v.detach().to(dtype).requires_grad_(v.requires_grad)
                                for k, v in self.params.items()},
                     {k: v.to(dtype) for k, v in self.buffers.items()})

    def clone(self) -> "Model":
        return Model(self.cfg, {k: v.detach().clone().requires_grad_(v.requires_grad)
                                for k, v in self.params.items()},
                     {k: v.clone() for k, v in self.buffers.items()})

    def requires_grad_(self, flag=True) -> "Model":
        for v in self.params.values():
            v.requires_grad_(flag)
        return self

    def state(self) -> dict:
        return {**self.params, **self.buffers}

    def kernel(self, block: int) -> SplineKernel:
        p = block_prefix(self.cfg, block)
        grid = self.cfg.head_grid if block == self.cfg.num_layers else self.cfg.grid
        return SplineKernel(grid, self.params[f"{p}.ssl.weight"], self.params[f"{p}.ssl.root"],
                            self.params[f"{p}.ssl.bias"], self.cfg.degree)

    def attention(self, block: int) -> AttentionParams:
        p = block_prefix(self.cfg, block)
        heads = self.cfg.head_heads if block == self.cfg.num_layers else self.cfg.heads
        pp = self.params
        return AttentionParams(pp[f"{p}.mvl.w_t"], pp[f"{p}.mvl.w_s"], pp[f"{p}.mvl.w_e"],
                               pp[f"{p}.mvl.att"], pp[f"{p}.mvl.bias"], heads)


def init_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=torch.float32,
               bn_stats: str = "identity") -> Model:
    """He-style initialisation. ``bn_stats='random'`` draws non-trivial
    running statistics (handy for testing frozen normalisation)."""
    cfg = cfg or ModelConfig()
    gen = torch.Generator().manual_seed(seed)
    params, buffers = {}, {}
    for name, (shape, kind, fan) in param_spec(cfg).items():
        if kind == "fan":
            t = torch.randn(*shape, generator=gen, dtype=torch.float64) * (2.0 / fan) ** 0.5
        elif kind == "small":
            t = torch.randn(*shape, generator=gen, dtype=torch.float64) * 0.01
        elif kind == "one":
            t = torch.ones(*shape, dtype=torch.float64)
        else:
            t = torch.zeros(*shape, dtype=torch.float64)
        params[name] = t.to(dtype).requires_grad_(True)
        if name.endswith(".bn.gamma"):
            base = name[: -len("gamma")]
            c = shape[0]
            if bn_stats == "random":
                buffers[base + "mean"] = (torch.rand(c, generator=gen, dtype=torch.float64) * 0.5).to(dtype)
                buffers[base + "var"] = (0.5 + torch.rand(c, generator=gen, dtype=torch.float64)).to(dtype)
            else:
                buffers[base + "mean"] = torch.zeros(c, dtype=dtype)
                buffers[base + "var"] = torch.ones(c, dtype=dtype)
    return Model(cfg, params, buffers)


def param_count(params) -> int:
    if isinstance(params, Model):
        params = params.params
    return int(sum(v.numel() for v in params.values()))


# ---------------------------------------------------------------------------
# forward building blocks


def embed(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise ValueError(f"embedding expects [N, {weight.shape[0]}], got {tuple(features.shape)}")
    return torch.relu(features @ weight + bias)


def fuse(h_s: torch.Tensor, h_t: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor):
    """Concatenate then one affine map and ReLU."""
    if h_s.shape != h_t.shape:
        raise ValueError("branch widths differ")
    return torch.relu(torch.cat([h_s, h_t], dim=1) @ weight + bias)


def batch_norm(x, gamma, beta, mean, var, train: bool, momentum=0.1, eps=1e-5):
    if train:
        mu = x.mean(0)
        v = x.var(0, unbiased=False)
        with torch.no_grad():
            n = x.shape[0]
            unbiased = v * (n / max(n - 1, 1))
            mean.mul_(1 - momentum).add_(momentum * mu.detach())
            var.mul_(1 - momentum).add_(momentum * unbiased.detach())
        return (x - mu) / torch.sqrt(v + eps) * gamma + beta
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


class Edges:
    """In-edges of a set of consumer rows.

    ``s_src``/``t_src`` index a source feature table; ``s_dst``/``t_dst``
    index consumer rows 0..n-1. Spline bases are memoised per grid."""

    def __init__(self, n, s_src, s_dst, s_attr, t_src, t_dst, t_attr, cache=None):
        self.n = int(n)
        self.s_src = torch.as_tensor(s_src, dtype=torch.int64)
        self.s_dst = torch.as_tensor(s_dst, dtype=torch.int64)
        self.s_attr = np.asarray(s_attr, dtype=np.float64).reshape(-1, 3)
        self.t_src = torch.as_tensor(t_src, dtype=torch.int64)
        self.t_dst = torch.as_tensor(t_dst, dtype=torch.int64)
        self._t_attr = np.asarray(t_attr, dtype=np.float64).reshape(-1, 6)
        self.cache = {} if cache is None else cache

    @classmethod
    def from_graph(cls, ga) -> "Edges":
        hit = ga.cache.get("edges")
        if hit is None:
            hit = cls(ga.num_nodes, ga.s_src, ga.s_dst, ga.s_attr, ga.t_src, ga.t_dst, ga.t_attr,
                      cache=ga.cache)
            ga.cache["edges"] = hit
        return hit

    def basis(self, grid, degree):
        key = ("basis", tuple(grid), degree)
        hit = self.cache.get(key)
        if hit is None:
            attr = self.s_attr[:, : len(grid)]
            c, w = basis_tensor(attr, grid, degree)
            hit = (torch.as_tensor(c), torch.as_tensor(w))
            self.cache[key] = hit
        return hit

    def t_attr(self, dtype, strip=False):
        key = ("t_attr", dtype, strip)
        hit = self.cache.get(key)
        if hit is None:
            a = self._t_attr
            if strip:
                a = strip_motion_features(a)
            hit = torch.as_tensor(a, dtype=dtype)
            self.cache[key] = hit
        return hit


def _branch_ssl(model, block, h_dst, table, edges):
    k = model.kernel(block)
    cells, bw = edges.basis(k.grid, k.degree)
    return ssl_apply(h_dst, table[edges.s_src], cells, bw.to(table.dtype), edges.s_dst, k)


def _branch_mvl(model, block, h_dst, table, edges):
    cfg = model.cfg
    attr = edges.t_attr(table.dtype, cfg.strip_motion)
    return mvl_apply(h_dst, table[edges.t_src], attr, edges.t_dst, model.attention(block), cfg.mvl_agg)


def _in_thread(fn, grad, *args):
    with torch.set_grad_enabled(grad):
        return fn(*args)


def smvl_block(model: Model, block: int, h_dst: torch.Tensor, table: torch.Tensor, edges: Edges,
               train: bool = False, executor: Executor | None = None, return_branches=False):
    """One message-passing block for the consumer rows ``h_dst``.

    ``table`` holds source features indexed by ``edges.*_src``. With an
    executor the two branches are evaluated concurrently."""
    cfg = model.cfg
    p = block_prefix(cfg, block)
    h_s = h_t = None
    if executor is not None and cfg.use_ssl and cfg.use_mvl:
        grad = torch.is_grad_enabled()
        fut = executor.submit(_in_thread, _branch_mvl, grad, model, block, h_dst, table, edges)
        h_s = _branch_ssl(model, block, h_dst, table, edges)
        h_t = fut.result()
    else:
        if cfg.use_ssl:
            h_s = _branch_ssl(model, block, h_dst, table, edges)
        if cfg.use_mvl:
            h_t = _branch_mvl(model, block, h_dst, table, edges)
    if h_s is not None and h_t is not None:
        y = fuse(h_s, h_t, model.params[f"{p}.fuse.weight"], model.params[f"{p}.fuse.bias"])
    else:
        y = torch.relu(h_s if h_s is not None else h_t)
    out = batch_norm(y, model.params[f"{p}.bn.gamma"], model.params[f"{p}.bn.beta"],
                     model.buffers[f"{p}.bn.mean"], model.buffers[f"{p}.bn.var"],
                     train, cfg.bn_momentum, cfg.bn_eps)
    if return_branches:
        return out, h_s, h_t
    return out


def node_features(ga, dtype) -> torch.Tensor:
    key = ("feat", dtype)
    hit = ga.cache.get(key)
    if hit is None:
        hit = torch.as_tensor(ga.feat, dtype=dtype)
        ga.cache[key] = hit
    return hit


def embed_nodes(model: Model, feat: torch.Tensor) -> torch.Tensor:
    return embed(feat, model.params["embed.weight"], model.params["embed.bias"])


def backbone_forward(ga, model: Model, train: bool = False, executor=None,
                     return_all: bool = False, upto: int | None = None):
    """Embedding then the backbone blocks. Returns the final features, or the
    list of every layer's activations with ``return_all``."""
    edges = Edges.from_graph(ga)
    h = embed_nodes(model, node_features(ga, model.dtype))
    acts = [h]
    last = model.cfg.num_layers if upto is None else upto
    for b in range(last):
        h = smvl_block(model, b, h, h, edges, train, executor)
        acts.append(h)
    return acts if return_all else h


def head_block(model: Model, h: torch.Tensor, ga, train=False, executor=None):
    return smvl_block(model, model.cfg.num_layers, h, h, Edges.from_graph(ga), train, executor)


def head_outputs(model: Model, z: torch.Tensor):
    """Pointwise branches on head-block features: (class logits [N, n+1],
    box [N, 4], confidence logit [N])."""
    pp = model.params
    logits = z @ pp["head.cls.weight"] + pp["head.cls.bias"]
    reg = z @ pp["head.reg.weight"] + pp["head.reg.bias"]
    return logits, reg[:, :4], reg[:, 4]


def model_forward(ga, model: Model, train=False, executor=None):
    h = backbone_forward(ga, model, train, executor)
    z = head_block(model, h, ga, train, executor)
    return head_outputs(model, z)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"EGSM"
VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Binary tensors plus a sibling ``.cfg`` text file."""
    path = Path(path)
    state = model.state()
    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(state)))
    for name in sorted(state):
        t = state[name].detach().to(torch.float64).contiguous()
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.numpy().astype("<f8").tobytes()
    path.write_bytes(bytes(buf))
    text = model.cfg.to_text() + f"dtype = {str(model.dtype).replace('torch.', '')}\n"
    for k, v in (extra or {}).items():
        text += f"{k} = {v}\n"
    config_path(path).write_text(text)


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def read_tensors(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            vals = np.frombuffer(data, dtype="<f8", count=n, offset=off)
            off += 8 * n
            out[name] = torch.from_numpy(vals.reshape(shape).copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[Model, dict]:
    """Returns the model and any extra ``key = value`` entries of the config
    file (e.g. graph settings)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from None
    tensors = read_tensors(data)
    extra = {}
    dtype = torch.float64
    cp = config_path(path)
    if cfg is None:
        if not cp.exists():
            raise CheckpointError(f"missing config file {cp}")
        known = {f.name for f in fields(ModelConfig)}
        mine, rest = [], []
        for line in cp.read_text().splitlines():
            key = line.split("=", 1)[0].strip()
            (mine if key in known else rest).append(line)
        cfg = ModelConfig.from_text("\n".join(mine))
        for line in rest:
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                extra[k] = v
        dtype = getattr(torch, extra.pop("dtype", "float64"))
    spec = param_spec(cfg)
    params, buffers = {}, {}
    for name, (shape, _, _) in spec.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: shape {tuple(tensors[name].shape)} != {shape}")
        params[name] = tensors.pop(name).to(dtype).requires_grad_(True)
    for name in list(tensors):
        if name.endswith((".bn.mean", ".bn.var")):
            buffers[name] = tensors.pop(name).to(dtype)
    if tensors:
        raise CheckpointError(f"unexpected tensors: {sorted(tensors)[:3]}")
    return Model(cfg, params, buffers), extra


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(op, inputs, eps: float = 1e-4, n_coords: int = 64, seed: int = 0,
               floor: float = 1e-6, return_details: bool = False):
    """Max relative error between autograd and central differences.

    ``op(*inputs)`` may return any tensor; it is reduced to a scalar with a
    fixed random projection. Coordinates are drawn at random across all
    inputs (all of them when there are at most ``n_coords``)."""
    inputs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    out = op(*inputs)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs):
        return (op(*xs) * proj).sum()

    grads = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    sizes = [x.numel() for x in inputs]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, n_coords, replace=False)
    offsets = np.cumsum([0] + sizes)
    worst, details = 0.0, []
    with torch.no_grad():
        base = [x.detach().clone() for x in inputs]
        for flat in picks.tolist():
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = flat - offsets[k]
            xs = [b.clone() for b in base]
            xs[k].view(-1)[j] += eps
            fp = float(scalar(*xs))
            xs[k].view(-1)[j] -= 2 * eps
            fm = float(scalar(*xs))
            num = (fp - fm) / (2 * eps)
            ana = float(grads[k].reshape(-1)[j])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            details.append((k, j, ana, num, rel))
            worst = max(worst, rel)
    return (worst, details) if return_details else worst


__all__ = [
    "ModelConfig", "Model", "init_model", "param_count", "param_spec", "ablation_config",
    "embed", "fuse", "batch_norm", "smvl_block", "backbone_forward", "head_block",
    "head_outputs", "model_forward", "save_checkpoint", "load_checkpoint", "grad_check",
    "Edges",
]
