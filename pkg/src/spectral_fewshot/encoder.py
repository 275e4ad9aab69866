"""Low-pass / high-pass spectral experts and the node-wise gate that mixes them."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import GATING_BLOCKS, GatingFeatures, Graph, gating_features, normalized_adjacency

LAYER_NORM_EPS = 1e-5


def to_torch(m, dtype=torch.float32) -> torch.Tensor:
    """scipy sparse -> torch sparse CSR, ndarray -> dense tensor."""
    if sp.issparse(m):
        m = m.tocsr()
        with warnings.catch_warnings():  # "sparse CSR support is in beta"
            warnings.simplefilter("ignore", UserWarning)
            return torch.sparse_csr_tensor(
                torch.from_numpy(m.indptr.astype(np.int64)),
                torch.from_numpy(m.indices.astype(np.int64)),
                torch.from_numpy(m.data).to(dtype),
                size=m.shape,
                check_invariants=False,
            )
    return torch.as_tensor(np.asarray(m), dtype=dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.layout != torch.strided:
        return torch.sparse.mm(a, b)
    return a @ b


class GraphTensors:
    """Torch views of everything the encoder reads from a graph.

    Built once per (graph, dtype) and reused across forward passes.
    """

    def __init__(self, graph: Graph, dtype=torch.float32, gating_blocks=GATING_BLOCKS,
                 gating: Optional[GatingFeatures] = None):
        self.num_nodes = graph.num_nodes
        self.dtype = dtype
        self.norm_adj = to_torch(normalized_adjacency(graph), dtype)
        self.features = to_torch(graph.features, dtype)
        if gating is None:
            gating = gating_features(graph, gating_blocks)
        self.gating = gating
        self.gate_x = to_torch(gating.x, dtype)
        self.gate_n = to_torch(gating.n, dtype)
        self.gate_phi = torch.as_tensor(gating.phi, dtype=dtype)
        self.gate_deg = torch.as_tensor(gating.degree, dtype=dtype)
        # attention runs over every edge in both directions plus self-loops
        n = graph.num_nodes
        loops = np.arange(n, dtype=np.int64)
        src = np.concatenate([graph.edges[:, 0], graph.edges[:, 1], loops])
        dst = np.concatenate([graph.edges[:, 1], graph.edges[:, 0], loops])
        order = np.lexsort((src, dst))
        self.att_src = torch.from_numpy(src[order])
        self.att_dst = torch.from_numpy(dst[order])


@dataclass
class EncodedNodes:
    h_low: torch.Tensor
    h_high: torch.Tensor
    alpha: torch.Tensor
    z: torch.Tensor


class LowPassExpert(nn.Module):
    """Two GCN layers, each followed by batch norm and ReLU."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(in_dim, hidden))
        self.w2 = nn.Parameter(torch.empty(hidden, hidden))
        self.bn1 = nn.BatchNorm1d(hidden)
        self.bn2 = nn.BatchNorm1d(hidden)

    def forward(self, norm_adj, x, use_bn=True, activation=F.relu):
        h = x
        for w, bn in ((self.w1, self.bn1), (self.w2, self.bn2)):
            # (A X) W == A (X W); propagate the narrower side
            h = matmul(norm_adj, matmul(h, w))
            if use_bn:
                h = bn(h)
            h = activation(h)
        return h


class HighPassExpert(nn.Module):
    """Self-attention over differential features ``LayerNorm(lam * (X W' - H_low))``."""

    def __init__(self, in_dim: int, hidden: int, lambda_scale: float = 1.0,
                 trainable_lambda: bool = False):
        super().__init__()
        self.hidden = hidden
        self.w_in = nn.Parameter(torch.empty(in_dim, hidden))
        self.w_q = nn.Parameter(torch.empty(hidden, hidden))
        self.w_k = nn.Parameter(torch.empty(hidden, hidden))
        self.w_v = nn.Parameter(torch.empty(hidden, hidden))
        self.norm = nn.LayerNorm(hidden, eps=LAYER_NORM_EPS)
        lam = torch.tensor(float(lambda_scale))
        if trainable_lambda:
            self.lam = nn.Parameter(lam)
        else:
            self.register_buffer("lam", lam)

    def differential(self, x, h_low):
        return self.norm(self.lam * (matmul(x, self.w_in) - h_low))

    def forward(self, gt: GraphTensors, x, h_low, attention="sparse"):
        f = self.differential(x, h_low)
        q, k, v = f @ self.w_q, f @ self.w_k, f @ self.w_v
        scale = math.sqrt(self.hidden)
        if attention == "dense":
            weights = torch.softmax(q @ k.T / scale, dim=1)
            return weights @ v
        if attention != "sparse":
            raise ValueError(f"unknown attention mode {attention!r}")
        src, dst = gt.att_src, gt.att_dst
        logits = (q[dst] * k[src]).sum(dim=1) / scale
        n = q.shape[0]
        row_max = torch.full((n,), -math.inf, dtype=logits.dtype).scatter_reduce(
            0, dst, logits, reduce="amax", include_self=True)
        ex = torch.exp(logits - row_max[dst].detach())
        denom = torch.zeros(n, dtype=logits.dtype).index_add(0, dst, ex)
        weights = ex / denom[dst]
        return torch.zeros_like(v).index_add(0, dst, weights[:, None] * v[src])


class Gate(nn.Module):
    """Two-layer MLP over the gating descriptors, tempered softmax over 2 experts."""

    def __init__(self, feature_dim: int, hidden: int = 96, blocks=GATING_BLOCKS):
        super().__init__()
        self.blocks = tuple(blocks)
        self.feature_dim = feature_dim
        self.fc1 = nn.Linear(len(self.blocks) * feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def hidden_input(self, gt: GraphTensors) -> torch.Tensor:
        """``X_g @ W1^T`` computed block by block.

        The phi block is the same row everywhere and the degree block is a
        scalar per row, so their products reduce to a broadcast row and an
        outer product.
        """
        d = self.feature_dim
        w = self.fc1.weight  # [hidden, width]
        out = self.fc1.bias.expand(gt.num_nodes, -1)
        for i, name in enumerate(self.blocks):
            wb = w[:, i * d : (i + 1) * d]
            if name == "x":
                out = out + matmul(gt.gate_x, wb.T)
            elif name == "n":
                out = out + matmul(gt.gate_n, wb.T)
            elif name == "phi":
                out = out + (gt.gate_phi @ wb.T)[None, :]
            elif name == "deg":
                out = out + gt.gate_deg[:, None] * wb.sum(dim=1)[None, :]
        return out

    def logits(self, gt: GraphTensors) -> torch.Tensor:
        return self.fc2(F.relu(self.hidden_input(gt)))

    def logits_from_composite(self, xg: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(xg)))


def gate_softmax(logits: torch.Tensor, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ValueError(f"gate temperature must be positive, got {tau}")
    return torch.softmax(logits / tau, dim=1)


class SpectralEncoder(nn.Module):
    """All trainable state: both experts, the gate, the metric head and beta."""

    def __init__(self, in_dim: int, hidden: int = 32, gate_hidden: int = 96,
                 lambda_scale: float = 1.0, trainable_lambda: bool = False,
                 gating_blocks=GATING_BLOCKS):
        super().__init__()
        self.in_dim, self.hidden = in_dim, hidden
        self.low_pass = LowPassExpert(in_dim, hidden)
        self.high_pass = HighPassExpert(in_dim, hidden, lambda_scale, trainable_lambda)
        self.gate = Gate(in_dim, gate_hidden, gating_blocks)
        self.metric_head = nn.Parameter(torch.empty(hidden, hidden))
        self.beta = nn.Parameter(torch.zeros(()))

    @property
    def beta_hat(self) -> torch.Tensor:
        return 0.5 * (torch.tanh(self.beta) + 1.0)

    def forward(self, gt: GraphTensors, tau: float = 2.0, alpha_override=None,
                attention="sparse", need_high=True) -> EncodedNodes:
        return encode_tensors(self, gt, tau, alpha_override, attention, need_high)


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound).to(t.dtype))


def init_params(d: int, d_prime: int = 32, seed: int = 0, gate_hidden: int = 96,
                lambda_scale: float = 1.0, trainable_lambda: bool = False,
                gating_blocks=GATING_BLOCKS, metric_head_init: str = "uniform") -> SpectralEncoder:
    """Build an encoder with seeded fan-in-scaled uniform weights.

    Every tensor draws from its own generator keyed by (seed, name), so
    variants that change one module's shape keep all other weights equal.
    ``metric_head_init="identity"`` starts W_l at the plain Euclidean metric
    (an all-ones scaling) instead of treating it like the other weights.
    """
    if metric_head_init not in ("identity", "uniform"):
        raise ValueError(f"unknown metric_head_init {metric_head_init!r}")
    if d < 1 or d_prime < 1:
        raise ValueError("dimensions must be >= 1")
    model = SpectralEncoder(d, d_prime, gate_hidden, lambda_scale, trainable_lambda,
                            gating_blocks)
    for name, p in model.named_parameters():
        if name in ("beta", "high_pass.lam") or "bn" in name or "norm" in name:
            continue
        if name == "metric_head" and metric_head_init == "identity":
            with torch.no_grad():
                p.copy_(torch.eye(d_prime, dtype=p.dtype))
            continue
        key = int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:8], "little")
        gen = torch.Generator().manual_seed(key % (2**63))
        if name.endswith(".bias"):
            fan_in = model.gate.fc1.in_features if "fc1" in name else model.gate.fc2.in_features
        elif name.startswith("gate."):
            fan_in = p.shape[1]  # nn.Linear stores [out, in]
        else:
            fan_in = p.shape[0]
        _uniform_(p, fan_in, gen)
    return model


def low_pass_forward(norm_adj, features, params: SpectralEncoder, training: bool,
                     use_bn: bool = True, activation=F.relu) -> torch.Tensor:
    params.low_pass.train(training)
    return params.low_pass(norm_adj, features, use_bn=use_bn, activation=activation)


def high_pass_forward(gt: GraphTensors, features, h_low, params: SpectralEncoder,
                      attention="sparse") -> torch.Tensor:
    if h_low.shape != (gt.num_nodes, params.hidden):
        raise ValueError(f"h_low has shape {tuple(h_low.shape)}, expected "
                         f"{(gt.num_nodes, params.hidden)}")
    return params.high_pass(gt, features, h_low, attention=attention)


def gate_forward(gt_or_composite, params: SpectralEncoder, tau: float) -> torch.Tensor:
    """Gate weights ``softmax(MLP(X_g) / tau)``; accepts GraphTensors or a dense X_g."""
    if isinstance(gt_or_composite, GraphTensors):
        logits = params.gate.logits(gt_or_composite)
    else:
        logits = params.gate.logits_from_composite(gt_or_composite)
    return gate_softmax(logits, tau)


def encode_tensors(params: SpectralEncoder, gt: GraphTensors, tau: float,
                   alpha_override=None, attention="sparse", need_high=True) -> EncodedNodes:
    h_low = params.low_pass(gt.norm_adj, gt.features)
    if need_high:
        h_high = params.high_pass(gt, gt.features, h_low, attention=attention)
    else:
        h_high = torch.zeros_like(h_low)
    if alpha_override is not None:
        alpha = torch.as_tensor(alpha_override, dtype=h_low.dtype).expand(gt.num_nodes, 2)
    else:
        alpha = gate_softmax(params.gate.logits(gt), tau)
    z = alpha[:, :1] * h_low + alpha[:, 1:] * h_high
    return EncodedNodes(h_low=h_low, h_high=h_high, alpha=alpha, z=z)


def encode(graph_or_tensors, params: SpectralEncoder, tau: float = 2.0, training: bool = False,
           alpha_override=None, attention="sparse") -> EncodedNodes:
    """Run both experts and the gate over the whole graph."""
    gt = graph_or_tensors
    if isinstance(gt, Graph):
        dtype = next(params.parameters()).dtype
        gt = GraphTensors(gt, dtype, params.gate.blocks)
    params.train(training)
    need_high = alpha_override is None or float(torch.as_tensor(alpha_override)[..., 1].max()) > 0
    if training:
        return encode_tensors(params, gt, tau, alpha_override, attention, need_high)
    with torch.no_grad():
        return encode_tensors(params, gt, tau, alpha_override, attention, need_high)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(params: SpectralEncoder, path, config: Optional[dict] = None) -> Path:
    """Flat named-tensor container (``.npz``) plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    np.savez(path.with_suffix(".npz"), **state)
    manifest = {
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "in_dim": params.in_dim,
        "hidden": params.hidden,
        "gate_hidden": params.gate.fc1.out_features,
        "gating_blocks": list(params.gate.blocks),
        "trainable_lambda": isinstance(params.high_pass.lam, nn.Parameter),
        "config": config or {},
        "config_hash": config_hash(config or {}),
    }
    out = path.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".npz")


def load_checkpoint(path) -> SpectralEncoder:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz")) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    model = SpectralEncoder(manifest["in_dim"], manifest["hidden"], manifest["gate_hidden"],
                            trainable_lambda=manifest["trainable_lambda"],
                            gating_blocks=tuple(manifest["gating_blocks"]))
    dtype = next(iter(v for k, v in state.items() if v.is_floating_point())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def params_hash(params: nn.Module, prefix: str = "") -> str:
    """Digest of all tensors whose name starts with ``prefix``."""
    h = hashlib.sha256()
    for name, t in sorted(params.state_dict().items()):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
